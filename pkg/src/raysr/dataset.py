"""Low/high-resolution training pairs, route-wise splits and normalisation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import WINDOW, Sample, load_samples, save_samples

SCALES = (2, 4, 8, 16)
MIN_SPLIT_SAMPLES = 12
MIN_SPLIT_ROUTES = 6


class DatasetError(ValueError):
    pass


def check_scale(scale: int) -> int:
    if scale not in SCALES:
        raise DatasetError(f"scale factor must be one of {SCALES}, got {scale}")
    return int(scale)


def known_indices(scale: int, window: int = WINDOW) -> np.ndarray:
    check_scale(scale)
    if (window - 1) % scale:
        raise DatasetError(f"scale {scale} does not divide window span {window - 1}")
    return np.arange(0, window, scale)


def predicted_indices(scale: int, window: int = WINDOW) -> np.ndarray:
    return np.setdiff1d(np.arange(window), known_indices(scale, window))


@dataclass
class SRPair:
    scale: int
    known_indices: np.ndarray
    lr_features: np.ndarray  # (K, J, 4)
    hr_features: np.ndarray  # (17, J, 4)
    weights: np.ndarray  # (17, J)
    rx_positions: np.ndarray  # (17, 3)
    sample: Sample | None = None

    @property
    def predicted_indices(self) -> np.ndarray:
        return np.setdiff1d(np.arange(len(self.hr_features)), self.known_indices)


def downsample(sample: Sample, scale: int) -> SRPair:
    known = known_indices(scale, len(sample.features))
    return SRPair(
        scale,
        known,
        sample.features[known].copy(),
        sample.features,
        sample.weights,
        sample.rx_positions,
        sample,
    )


@dataclass
class PairBatch:
    """Stacked arrays for many pairs of one scale."""

    scale: int
    known_indices: np.ndarray
    lr: np.ndarray  # (N, K, J, 4)
    hr: np.ndarray  # (N, 17, J, 4)
    weights: np.ndarray  # (N, 17, J)
    rx: np.ndarray  # (N, 17, 3)

    def __len__(self) -> int:
        return len(self.lr)

    def subset(self, idx) -> "PairBatch":
        return PairBatch(self.scale, self.known_indices, self.lr[idx], self.hr[idx], self.weights[idx], self.rx[idx])

    @property
    def predicted_indices(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.hr.shape[1]), self.known_indices)

    @classmethod
    def from_samples(cls, samples, scale: int) -> "PairBatch":
        samples = list(samples)
        if not samples:
            raise DatasetError("no samples")
        shapes = {s.features.shape for s in samples}
        if len(shapes) != 1:
            raise DatasetError(f"samples disagree on shape: {sorted(shapes)}")
        known = known_indices(scale, samples[0].features.shape[0])
        hr = np.stack([s.features for s in samples])
        return cls(
            scale,
            known,
            hr[:, known].copy(),
            hr,
            np.stack([s.weights for s in samples]),
            np.stack([s.rx_positions for s in samples]),
        )


# ---------------------------------------------------------------- splitting


def split(samples, seed: int) -> dict[str, list[Sample]]:
    """About 5:1 train : (val + test), val and test halving the holdout.

    With at least six routes whole routes go to one side; otherwise samples
    are split individually.
    """
    samples = list(samples)
    n = len(samples)
    if n < MIN_SPLIT_SAMPLES:
        raise DatasetError(f"need at least {MIN_SPLIT_SAMPLES} samples to split, got {n}")
    rng = np.random.default_rng(seed)
    routes = sorted({s.route_id for s in samples})
    if len(routes) >= MIN_SPLIT_ROUTES:
        by_route = {r: [s for s in samples if s.route_id == r] for r in routes}
        order = [routes[i] for i in rng.permutation(len(routes))]
        target = n / 6
        held, count = [], 0
        for r in order:
            if len(held) >= 2 and abs(count + len(by_route[r]) - target) >= abs(count - target):
                break
            held.append(r)
            count += len(by_route[r])
        n_val = len(held) // 2
        val_routes, test_routes = set(held[:n_val]), set(held[n_val:])
        pick = lambda rs: [s for s in samples if s.route_id in rs]  # noqa: E731
        return {
            "train": [s for s in samples if s.route_id not in val_routes | test_routes],
            "val": pick(val_routes),
            "test": pick(test_routes),
        }
    perm = rng.permutation(n)
    n_hold = max(2, int(round(n / 6)))
    n_val = n_hold // 2
    hold = perm[:n_hold]
    val_idx = set(hold[:n_val].tolist())
    test_idx = set(hold[n_val:].tolist())
    return {
        "train": [s for i, s in enumerate(samples) if i not in val_idx and i not in test_idx],
        "val": [s for i, s in enumerate(samples) if i in val_idx],
        "test": [s for i, s in enumerate(samples) if i in test_idx],
    }


# ---------------------------------------------------------------- normalisation


@dataclass(frozen=True)
class NormStats:
    """Per-feature-channel statistics (x, y, z, power) pooled over slots and snapshots."""

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), np.asarray(d["constant"], bool))

    @classmethod
    def identity(cls, n_features: int = 4) -> "NormStats":
        return cls(np.zeros(n_features), np.ones(n_features), np.zeros(n_features, bool))


def fit_norm(train, eps: float = 1e-12) -> NormStats:
    """Statistics over the entries of ``train`` with positive weight."""
    if isinstance(train, PairBatch):
        feats, w = train.hr, train.weights
    else:
        train = list(train)
        if not train:
            raise DatasetError("cannot fit normalisation on an empty set")
        feats = np.stack([s.features for s in train])
        w = np.stack([s.weights for s in train])
    vals = feats[w > 0]
    if len(vals) == 0:
        raise DatasetError("no weighted entries to fit normalisation on")
    mean = vals.mean(axis=0)
    std = vals.std(axis=0)
    constant = std <= eps * np.maximum(1.0, np.abs(mean))
    std = np.where(constant, 1.0, std)
    return NormStats(mean, std, constant)


def apply_norm(x, stats: NormStats) -> np.ndarray:
    return (np.asarray(x, dtype=float) - stats.mean) / stats.std


def invert_norm(z, stats: NormStats) -> np.ndarray:
    return np.asarray(z, dtype=float) * stats.std + stats.mean


# ---------------------------------------------------------------- persistence


def save_dataset(out_dir, splits: dict, scale: int, stats: NormStats, seed: int, extra: dict | None = None) -> Path:
    """Write the three splits as JSON lines plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in ("train", "val", "test"):
        path = out / f"{name}.jsonl"
        save_samples(splits[name], path)
        files[name] = path.name
    manifest = {"scale": scale, "seed": seed, "norm_stats": stats.to_dict(), "files": files}
    if extra:
        manifest.update(extra)
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return mpath


def load_dataset(manifest_path) -> tuple[dict, dict[str, list[Sample]], NormStats]:
    mpath = Path(manifest_path)
    if mpath.is_dir():
        mpath = mpath / "manifest.json"
    manifest = json.loads(mpath.read_text())
    splits = {name: load_samples(mpath.parent / f) for name, f in manifest["files"].items()}
    return manifest, splits, NormStats.from_dict(manifest["norm_stats"])


# ---------------------------------------------------------------- synthetic data


def affine_samples(n: int, n_slots: int, seed: int, spacing: float = 1.0) -> list[Sample]:
    """Samples whose every slot feature is an affine function of arc length."""
    rng = np.random.default_rng(seed)
    out = []
    s = np.arange(WINDOW) * spacing
    for k in range(n):
        d = rng.normal(size=2)
        d /= np.linalg.norm(d)
        start = rng.uniform(-100, 100, size=2)
        rx = np.zeros((WINDOW, 3))
        rx[:, :2] = start + s[:, None] * d
        rx[:, 2] = 2.0
        a = rng.uniform(-50, 50, size=(n_slots, 4))
        b = rng.uniform(-2, 2, size=(n_slots, 4))
        a[:, 3] -= 90.0
        feats = a[None] + s[:, None, None] * b[None]
        out.append(
            Sample(k // 10, 0, rx, np.arange(n_slots), feats, np.ones((WINDOW, n_slots)))
        )
    return out
