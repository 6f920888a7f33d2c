import os
import traceback
from datetime import datetime

from config.settings import RUN_LOG_FILENAME, get_log_dir

RUN_LOG_HEADER = [
    'Date/Time',
    'Seconds',
    'Command',
    'Inputs',
    'Output',
    'Status',
    'Error_Message',
    'Target',
    'Damp',
    'Loss',
    'Threads',
]


def log_run(command, inputs, output, elapsed_time, success, error_msg=None, debug=False, **kwargs):
    """
    Append one run to <log dir>/runs.txt as a tab-separated row.

    Args:
        command (str): CLI subcommand
        inputs (str|list): Input file(s)
        output (str): Output path
        elapsed_time (float): Time taken in seconds
        success (bool): Whether the command succeeded
        error_msg (str): Error message if failed
        debug (bool): Print diagnostics
        **kwargs: target, damp, loss, threads
    """
    try:
        log_dir = get_log_dir()
        os.makedirs(log_dir, exist_ok=True)
        path = os.path.join(log_dir, RUN_LOG_FILENAME)
        file_exists = os.path.exists(path)

        if isinstance(inputs, (list, tuple)):
            inputs = ','.join(str(i) for i in inputs)
        loss = kwargs.get('loss')
        entry = [
            datetime.now().strftime('%Y-%m-%d %H:%M:%S'),
            f"{elapsed_time:.1f}",
            command,
            inputs or '',
            output or '',
            "SUCCESS" if success else "FAILED",
            (error_msg or '').replace('\t', ' ').replace('\n', ' '),
            kwargs.get('target', ''),
            kwargs.get('damp', ''),
            f"{loss:.6g}" if isinstance(loss, float) else (loss if loss is not None else ''),
            kwargs.get('threads', ''),
        ]

        with open(path, 'a', encoding='utf-8') as f:
            if not file_exists:
                f.write('\t'.join(RUN_LOG_HEADER) + '\n')
            f.write('\t'.join(str(item) for item in entry) + '\n')
        if debug:
            print(f"DEBUG: Logged run to {path}")

    except Exception as e:
        # Logging never fails the command
        print(f"Warning: Could not write to log file: {e}")
        if debug:
            traceback.print_exc()
