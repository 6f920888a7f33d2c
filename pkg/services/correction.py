"""
Mean/variance correction of compressed layer outputs toward the dense
model's per-channel statistics.
"""
from dataclasses import dataclass

import numpy as np

from config.settings import STD_EPS
from services.tensor_io import as_matrix
from utils.errors import TensorFormatError, UsageError


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64).ravel(), STD_EPS)
        if self.mean.shape != self.std.shape:
            raise UsageError(f"Mean/std channel counts differ: {self.mean.size} vs {self.std.size}")

    @property
    def channels(self):
        return self.mean.size

    def to_json(self):
        return {str(c): {"mean": float(m), "std": float(s)} for c, (m, s) in enumerate(zip(self.mean, self.std))}

    @classmethod
    def from_json(cls, data):
        try:
            entries = [data[str(c)] for c in range(len(data))]
            return cls([e["mean"] for e in entries], [e["std"] for e in entries])
        except (KeyError, TypeError) as e:
            raise TensorFormatError(f"Malformed stats JSON: missing {e}")


def collect_stats(outputs):
    """
    Per-channel mean and population standard deviation of layer outputs.

    Args:
        outputs (np.ndarray): channels x samples

    Returns:
        ChannelStats: std clamped to STD_EPS
    """
    outputs = as_matrix(outputs, "outputs")
    if outputs.shape[1] < 2:
        raise UsageError(f"Statistics need at least 2 samples, got {outputs.shape[1]}")
    return ChannelStats(outputs.mean(axis=1), outputs.std(axis=1))


def _check_channels(n, *stats):
    for s in stats:
        if s.channels != n:
            raise UsageError(f"Channel count mismatch: {s.channels} stats for {n} channels")


def apply_correction(outputs, dense, comp, textbook=False):
    """
    Rescale compressed outputs toward the dense statistics.

    The default form is Y = (std_d / std_c) * (X - mean_c + mean_d); with
    textbook=True it is Y = (std_d / std_c) * (X - mean_c) + mean_d, which
    also matches the dense mean.

    Args:
        outputs (np.ndarray): channels x samples of the compressed layer
        dense (ChannelStats): Target statistics
        comp (ChannelStats): Statistics of the compressed outputs
        textbook (bool): Use the standard normalization form

    Returns:
        np.ndarray: Corrected outputs
    """
    outputs = as_matrix(outputs, "outputs")
    _check_channels(outputs.shape[0], dense, comp)
    ratio = (dense.std / comp.std)[:, None]
    mu_c, mu_d = comp.mean[:, None], dense.mean[:, None]
    if textbook:
        return ratio * (outputs - mu_c) + mu_d
    return ratio * (outputs - mu_c + mu_d)


def merge_affine(dense, comp, scale, shift, textbook=False):
    """
    Fold the correction into a following per-channel affine map
    y -> scale * y + shift.

    Returns:
        tuple: (scale', shift') with scale' * x + shift' equal to the affine
        map applied after apply_correction
    """
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), dense.mean.shape)
    shift = np.broadcast_to(np.asarray(shift, dtype=np.float64), dense.mean.shape)
    _check_channels(dense.channels, comp)
    ratio = dense.std / comp.std
    new_scale = scale * ratio
    if textbook:
        new_shift = scale * (dense.mean - ratio * comp.mean) + shift
    else:
        new_shift = scale * ratio * (dense.mean - comp.mean) + shift
    return new_scale, new_shift


def stats_to_json(layer_stats):
    """{layer: ChannelStats} -> {layer: {channel: {mean, std}}}."""
    return {name: stats.to_json() for name, stats in layer_stats.items()}


def stats_from_json(data):
    return {name: ChannelStats.from_json(entry) for name, entry in data.items()}
