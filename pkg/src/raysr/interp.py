"""Linear interpolation baseline along the receiver route.

An unknown snapshot N between known snapshots M1 and M2 gets

    f(N) = |M1 N| / |M1 M2| * f(M2) + |N M2| / |M1 M2| * f(M1)

per cluster slot and feature, with distances measured as arc length along
the route (identical to straight-line distance on a straight route).  The
same routine pre-upsamples the input of the learned model.
"""

from __future__ import annotations

import numpy as np

from .dataset import PairBatch, SRPair


def arc_length(rx) -> np.ndarray:
    """Cumulative distance along ``rx`` (..., n, 3)."""
    rx = np.asarray(rx, dtype=float)
    step = np.linalg.norm(np.diff(rx, axis=-2), axis=-1)
    zero = np.zeros(step.shape[:-1] + (1,))
    return np.concatenate([zero, np.cumsum(step, axis=-1)], axis=-1)


def interpolate_array(lr, known, rx, power_domain: str = "db") -> np.ndarray:
    """Pre-upsample ``lr`` (N, K, J, F) to (N, n, J, F) using positions ``rx`` (N, n, 3).

    ``power_domain="linear"`` blends the last feature channel in milliwatts
    instead of dBm.
    """
    lr = np.asarray(lr, dtype=float)
    known = np.asarray(known)
    squeeze = lr.ndim == 3
    if squeeze:
        lr, rx = lr[None], np.asarray(rx)[None]
    rx = np.asarray(rx, dtype=float)
    n_snap = rx.shape[1]
    if lr.shape[1] != len(known):
        raise ValueError(f"lr has {lr.shape[1]} snapshots but {len(known)} known indices")
    if known[0] != 0 or known[-1] != n_snap - 1 or np.any(np.diff(known) <= 0):
        raise ValueError("known indices must be increasing and span the whole window")
    s = arc_length(rx)  # (N, n)
    seg = np.searchsorted(known, np.arange(n_snap), side="right") - 1
    seg = np.clip(seg, 0, len(known) - 2)
    i1, i2 = known[seg], known[seg + 1]
    s1, s2 = s[:, i1], s[:, i2]
    span = s2 - s1
    if np.any(span <= 0):
        raise ValueError("degenerate interval between known snapshots (duplicate route points)")
    w2 = (s - s1) / span  # |M1 N| / |M1 M2|
    w1 = (s2 - s) / span  # |N M2| / |M1 M2|
    f1, f2 = lr[:, seg], lr[:, seg + 1]
    if power_domain == "linear":
        f1 = f1.copy()
        f2 = f2.copy()
        f1[..., -1] = 10 ** (f1[..., -1] / 10)
        f2[..., -1] = 10 ** (f2[..., -1] / 10)
    elif power_domain != "db":
        raise ValueError(f"unknown power domain {power_domain!r}")
    out = w2[:, :, None, None] * f2 + w1[:, :, None, None] * f1
    if power_domain == "linear":
        with np.errstate(divide="ignore"):
            out[..., -1] = 10 * np.log10(out[..., -1])
    out[:, known] = lr
    return out[0] if squeeze else out


def interpolate(pair: SRPair, rx_positions=None, power_domain: str = "db") -> np.ndarray:
    """Full-window features for one pair; known rows are copied verbatim."""
    rx = pair.rx_positions if rx_positions is None else rx_positions
    return interpolate_array(pair.lr_features, pair.known_indices, rx, power_domain)


def predict_batch(batch: PairBatch, power_domain: str = "db") -> np.ndarray:
    """Baseline predictions at the predicted snapshots, (N, P, J, F)."""
    full = interpolate_array(batch.lr, batch.known_indices, batch.rx, power_domain)
    return full[:, batch.predicted_indices]
