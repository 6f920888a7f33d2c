import os
from dotenv import load_dotenv

# Load environment variables from .env if present
load_dotenv()

# Dampening
DEFAULT_DAMP = "auto"
AUTO_DAMP_FRACTION = 0.01  # fraction of mean diag(2XX^T)

# Pivot breakdown: inv[p][p] must exceed this factor * trace(inv)/d_col
PIVOT_BREAKDOWN_FACTOR = 1e-12

# Quantization grid search
GRID_CANDIDATES = 128
GRID_MIN_RATIO = 0.5
SUPPORTED_BITS = range(2, 33)

# Allocation
DP_RESOLUTION = int(os.getenv('OBC_DP_RESOLUTION', 10000))
DP_MIN_RESOLUTION = 100

# Statistics correction
STD_EPS = 1e-6

# Trace mode keeps every row snapshot in memory up to this many megabytes
SNAPSHOT_CAP_MB = float(os.getenv('OBC_SNAPSHOT_CAP_MB', 1024))

# Sparsity grid (fraction of remaining weights kept per level)
SPARSITY_GRID_DELTA = 0.9
SPARSITY_GRID_STOP = 0.99
BLOCK_SPARSITY_GRID_STOP = 0.95

# --verify runs the brute-force oracles only on small layers
VERIFY_MAX_COLS = 16
VERIFY_MAX_ROWS = 8
VERIFY_TOLERANCE = 1e-8

# Brute-force enumeration limit for the oracles
EXHAUSTIVE_LIMIT = 1_000_000

# Exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3

# Default file names inside an output directory
WEIGHTS_FILENAME = "weights.npy"
LEDGER_FILENAME = "ledger.json"
GRIDS_FILENAME = "grids.json"
REPORT_FILENAME = "report.json"
MANIFEST_FILENAME = "manifest.json"
DATABASE_FILENAME = "db.json"
CORRECTED_FILENAME = "corrected.npy"
DENSE_STATS_FILENAME = "dense_stats.json"
COMP_STATS_FILENAME = "comp_stats.json"
AFFINE_SCALE_FILENAME = "affine_scale.npy"
AFFINE_SHIFT_FILENAME = "affine_shift.npy"

RUN_LOG_FILENAME = "runs.txt"


def get_thread_count(requested=None):
    """
    Resolve the row worker count.

    Args:
        requested (int): Value of --threads, if given

    Returns:
        int: --threads, else OBC_THREADS, else the number of available cores
    """
    if requested:
        return max(1, int(requested))
    env_threads = os.getenv('OBC_THREADS')
    if env_threads:
        return max(1, int(env_threads))
    return os.cpu_count() or 1


def get_log_dir():
    """Directory for the tab-separated run log (read at call time)."""
    return os.getenv('OBC_LOG_DIR', 'logs')
