"""Error metrics, baseline/model comparison tables and the ablation harness."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import PairBatch
from .interp import predict_batch
from .mll import SRModel, TrainConfig, init_model, predict, train

EVAL_COLUMNS = (
    "scale",
    "method",
    "ame_power",
    "ame_loc",
    "rmse_power",
    "rmse_loc",
    "scene",
    "mae_power",
    "mae_loc",
    "count",
)


def _entry_mask(weights, include_gap: bool) -> np.ndarray:
    w = np.asarray(weights)
    return w > 0 if include_gap else w == 1.0


def power_errors(pred, truth, weights, include_gap: bool = False) -> np.ndarray:
    """Signed dB errors (pred - truth) of scored entries."""
    m = _entry_mask(weights, include_gap)
    return (np.asarray(pred)[..., 3] - np.asarray(truth)[..., 3])[m]


def location_axis_errors(pred, truth, weights, include_gap: bool = False) -> np.ndarray:
    """Signed per-axis centre errors, (n, 3)."""
    m = _entry_mask(weights, include_gap)
    return (np.asarray(pred)[..., :3] - np.asarray(truth)[..., :3])[m]


def location_errors(pred, truth, weights, include_gap: bool = False) -> np.ndarray:
    """Euclidean centre errors in metres for entries of weight 1 (or > 0 with ``include_gap``)."""
    return np.linalg.norm(location_axis_errors(pred, truth, weights, include_gap), axis=-1)


def _nonempty(e) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if e.size == 0:
        raise ValueError("no errors to aggregate")
    return e


def ame(errors) -> float:
    """Absolute mean error: |mean of signed errors|."""
    return float(abs(np.mean(_nonempty(errors))))


def mae(errors) -> float:
    return float(np.mean(np.abs(_nonempty(errors))))


def rmse(errors) -> float:
    e = _nonempty(errors)
    return float(np.sqrt(np.mean(e * e)))


def location_ame(axis_errors, definition: str = "axis") -> float:
    """AME of 3D centres.

    ``"axis"``: mean over x/y/z of |mean signed error on that axis|.
    ``"vector"``: norm of the mean signed error vector.
    """
    e = _nonempty(axis_errors).reshape(-1, 3)
    mean = e.mean(axis=0)
    if definition == "axis":
        return float(np.mean(np.abs(mean)))
    if definition == "vector":
        return float(np.linalg.norm(mean))
    raise ValueError(f"unknown location AME definition {definition!r}")


@dataclass(frozen=True)
class EvalReport:
    scale: int
    method: str
    ame_power: float
    rmse_power: float
    ame_location: float
    rmse_location: float
    mae_power: float
    mae_location: float
    count: int
    scene: str = "ALL"

    def check(self, tol: float = 1e-12) -> None:
        for a, m, r in (
            (self.ame_power, self.mae_power, self.rmse_power),
            (self.ame_location, self.mae_location, self.rmse_location),
        ):
            if not (r + tol >= m and m + tol >= a):
                raise AssertionError(f"metric ordering violated in {self}")

    def row(self) -> dict:
        return {
            "scale": self.scale,
            "method": self.method,
            "ame_power": self.ame_power,
            "ame_loc": self.ame_location,
            "rmse_power": self.rmse_power,
            "rmse_loc": self.rmse_location,
            "scene": self.scene,
            "mae_power": self.mae_power,
            "mae_loc": self.mae_location,
            "count": self.count,
        }


Predictor = Callable[[PairBatch], np.ndarray]


def as_predictor(method) -> Predictor:
    if method is None or method == "baseline":
        return predict_batch
    if isinstance(method, SRModel):
        return lambda batch: predict(method, batch)
    if callable(method):
        return method
    raise TypeError(f"cannot evaluate {method!r}")


def score(pred, batch: PairBatch, scale: int, method: str, scene: str = "ALL", include_gap: bool = False, ame_definition: str = "axis") -> EvalReport:
    pi = batch.predicted_indices
    truth = batch.hr[:, pi]
    w = batch.weights[:, pi]
    pe = power_errors(pred, truth, w, include_gap)
    le_axis = location_axis_errors(pred, truth, w, include_gap)
    le = np.linalg.norm(le_axis, axis=-1)
    report = EvalReport(
        scale,
        method,
        ame(pe),
        rmse(pe),
        location_ame(le_axis, ame_definition),
        rmse(le),
        mae(pe),
        mae(le),
        int(pe.size),
        scene,
    )
    report.check()
    return report


def evaluate(method, batch: PairBatch, name: str | None = None, scene: str = "ALL", include_gap: bool = False, ame_definition: str = "axis") -> EvalReport:
    """Score the baseline (``None``/"baseline"), an :class:`SRModel` or a predictor callable."""
    if name is None:
        name = "mll" if isinstance(method, SRModel) else "baseline" if method in (None, "baseline") else "custom"
    pred = as_predictor(method)(batch)
    return score(pred, batch, batch.scale, name, scene, include_gap, ame_definition)


def _fmt(v, digits: int = 9) -> str:
    if isinstance(v, float):
        return f"{v:.{digits}g}"
    return str(v)


def write_eval_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in reports:
            row = r.row()
            w.writerow([_fmt(row[c]) for c in EVAL_COLUMNS])


def read_eval_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def relative_change(new: float, ref: float) -> float:
    """Percentage change of ``new`` w.r.t. ``ref`` (negative = error drop)."""
    return 100.0 * (new - ref) / ref


# ---------------------------------------------------------------- ablation


@dataclass(frozen=True)
class AblationConfig:
    group: str
    name: str
    max_dim: int = 512
    residual: bool = True


def default_ablation_grid(dims=(32, 64, 128, 256, 512, 1024)) -> list[AblationConfig]:
    """Width sweep (reference: first width) plus residual off/on at 512."""
    grid = [AblationConfig("ELB", f"max_dim={d}", d, True) for d in dims]
    grid += [AblationConfig("RES", "w/o residual", 512, False), AblationConfig("RES", "w residual", 512, True)]
    return grid


@dataclass
class AblationRow:
    group: str
    name: str
    max_dim: int
    residual: bool
    mae_power: float
    delta_pct: float = 0.0
    extra: dict = field(default_factory=dict)


ABLATION_COLUMNS = ("group", "name", "max_dim", "residual", "mae_power", "delta_pct")


def ablation(
    train_set: PairBatch,
    val_set: PairBatch,
    test_set: PairBatch,
    grid,
    config: TrainConfig,
    norm,
    seed: int = 0,
    use_best: bool = False,
) -> list[AblationRow]:
    """Train every grid entry with the same seed; deltas are relative to the first row of each group.

    Training is deterministic, so entries sharing (max_dim, residual) are
    trained once and reused.
    """
    rows = []
    refs: dict[str, float] = {}
    done: dict[tuple[int, bool], EvalReport] = {}
    for g in grid:
        key = (g.max_dim, g.residual)
        if key not in done:
            model = init_model(train_set.scale, train_set.hr.shape[2], seed=seed, max_dim=g.max_dim, residual=g.residual, norm=norm)
            res = train(model, train_set, val_set, config)
            done[key] = evaluate(res.best_model if use_best else res.model, test_set, g.name)
        rep = done[key]
        refs.setdefault(g.group, rep.mae_power)
        rows.append(
            AblationRow(
                g.group,
                g.name,
                g.max_dim,
                g.residual,
                rep.mae_power,
                relative_change(rep.mae_power, refs[g.group]),
                {"rmse_power": rep.rmse_power, "rmse_loc": rep.rmse_location},
            )
        )
    return rows


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            d = asdict(r)
            # raw MAEs at full precision so deltas can be recomputed exactly
            w.writerow([_fmt(d[c], 17) for c in ABLATION_COLUMNS])


def read_ablation_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def recompute_deltas(rows: list[dict]) -> list[float]:
    """Percent deltas from raw MAE strings, reference = first row of each group."""
    refs: dict[str, float] = {}
    out = []
    for r in rows:
        m = float(r["mae_power"])
        refs.setdefault(r["group"], m)
        out.append(relative_change(m, refs[r["group"]]))
    return out


def degradation(in_dist: EvalReport, shifted: EvalReport) -> dict:
    """Percent RMSE change from in-distribution to shifted test data."""
    return {
        "rmse_power_pct": relative_change(shifted.rmse_power, in_dist.rmse_power) if in_dist.rmse_power else math.inf,
        "rmse_loc_pct": relative_change(shifted.rmse_location, in_dist.rmse_location) if in_dist.rmse_location else math.inf,
    }
