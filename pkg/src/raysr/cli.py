"""Command line pipeline: scene-gen -> trace -> cluster -> dataset -> train -> eval -> report.

Every stage reads the previous stage's output directory and writes its own,
with a ``manifest.json`` recording the seed and settings.  Options can come
from an INI file (one section per subcommand, plus ``[global]``); flags on
the command line win.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .cir import DEFAULT_DELAY_TOL, DEFAULT_POWER_TOL, match_rate, reconstruct_slots, simulated_taps, write_cir_csv
from .clustering import DEFAULT_SLOTS, GAP_WEIGHT, PAD_OBJECT_ID, WINDOW, load_samples, samples_from_snapshots, save_samples
from .dataset import DatasetError, PairBatch, check_scale, fit_norm, load_dataset, save_dataset, split
from .interp import predict_batch
from .evalmetrics import (
    AblationConfig,
    EVAL_COLUMNS,
    ablation,
    evaluate,
    read_eval_csv,
    relative_change,
    write_ablation_csv,
    write_eval_csv,
)
from .mll import ModelError, TrainConfig, TrainingDiverged, init_model, load_model, predict, save_model, train
from .raytracer import TraceLimits, load_snapshots, save_snapshots, snapshot_path, trace_route
from .scene import Scene, SceneError, StreetConfig, UrbanConfig, load_routes, save_routes
from .pipeline import CampaignConfig, make_scenes

log = logging.getLogger("raysr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v) -> tuple[int, ...]:
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).replace(",", " ").split())


def _seed(v):
    return None if v == "inherit" else int(v)


def _inherit_seed(o: dict, upstream: dict) -> None:
    """Without an explicit --seed a stage keeps the seed of the artifact it reads."""
    if o["seed"] is None:
        o["seed"] = int(upstream.get("seed", 0))


def _scale(v) -> int:
    try:
        return check_scale(int(v))
    except DatasetError as exc:
        raise ConfigError(str(exc)) from exc


def _paths(v) -> list[str]:
    if isinstance(v, (list, tuple)):
        return [str(x) for x in v]
    return str(v).split()


# name, type, default, help; a default of None means required
GLOBAL_OPTIONS = [
    ("seed", _seed, "inherit", "seed for every stochastic stage; inherit takes the input artifact's seed, else 0"),
    ("threads", int, 1, "worker threads for ray tracing"),
]

OPTIONS = {
    "scene-gen": [
        ("out", str, None, "output directory"),
        ("kind", str, "urban", "urban or street"),
        ("n_scenes", int, 2, "number of scenes"),
        ("routes_per_scene", int, 6, "routes per scene"),
        ("route_points", int, 170, "receiver positions per route"),
        ("nlos_fraction", float, 0.5, "share of urban routes with the transmitter in a parallel street"),
        ("grid", _ints, (3, 3), "urban blocks along x and y"),
        ("buildings_per_block", int, 1, "urban buildings per block side"),
    ],
    "trace": [
        ("scenes", str, None, "scene-gen output directory"),
        ("out", str, None, "output directory"),
        ("max_order", int, 2, "maximum reflection order"),
        ("min_power", float, -150.0, "drop reflected/scattered rays below this power [dBm]"),
        ("frequency", float, 3.55e9, "carrier frequency [Hz]"),
        ("tx_power", float, 0.1, "transmit power [dBm]"),
    ],
    "cluster": [
        ("traces", str, None, "trace output directory"),
        ("out", str, None, "output directory"),
        ("slots", int, DEFAULT_SLOTS, "cluster slots per sample"),
        ("stride", int, WINDOW, "snapshots between window starts"),
        ("mode", str, "object", "object or facet"),
    ],
    "dataset": [
        ("samples", str, None, "cluster output directory"),
        ("out", str, None, "output directory"),
    ],
    "train": [
        ("dataset", str, None, "dataset directory"),
        ("out", str, None, "checkpoint file (.npz)"),
        ("scale", int, 4, "super-resolution factor"),
        ("epochs", int, 80, "training epochs"),
        ("lr", float, 1e-5, "learning rate"),
        ("batch", int, 32, "mini-batch size"),
        ("max_dim", int, 512, "widest hidden layer of each block"),
        ("residual", _bool, True, "sum the three block outputs"),
        ("normalize", _bool, True, "standardise features with the training-split statistics"),
    ],
    "eval": [
        ("dataset", str, None, "dataset directory"),
        ("out", str, None, "output CSV"),
        ("models", _paths, (), "checkpoints to score next to the baseline"),
        ("scales", _ints, (), "baseline-only scales when no model is given"),
        ("split", str, "test", "split to score"),
    ],
    "ablate": [
        ("dataset", str, None, "dataset directory"),
        ("out", str, None, "output CSV"),
        ("scale", int, 4, "super-resolution factor"),
        ("dims", _ints, (32, 64, 128, 256, 512, 1024), "max hidden widths to sweep"),
        ("epochs", int, 80, "training epochs"),
        ("lr", float, 1e-5, "learning rate"),
        ("batch", int, 32, "mini-batch size"),
    ],
    "cir": [
        ("traces", str, None, "trace output directory"),
        ("dataset", str, None, "dataset directory"),
        ("out", str, None, "output directory"),
        ("model", str, "", "checkpoint; the interpolation baseline when empty"),
        ("scale", int, 4, "scale factor for the baseline"),
        ("split", str, "test", "split to restore"),
        ("max_samples", int, 4, "samples to restore"),
        ("delay_tol", float, DEFAULT_DELAY_TOL, "delay tolerance [s]"),
        ("power_tol", float, DEFAULT_POWER_TOL, "power tolerance [dB]"),
    ],
    "report": [
        ("evals", _paths, None, "eval CSVs"),
        ("out", str, None, "summary CSV"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="raysr", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="INI file with [global] and per-subcommand sections")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        sp = sub.add_parser(cmd)
        for name, typ, default, help_ in GLOBAL_OPTIONS + opts:
            flag = "--" + name.replace("_", "-")
            if typ in (_paths, _ints) and name != "grid":
                sp.add_argument(flag, nargs="+", default=None, help=help_)
            elif typ is _ints:
                sp.add_argument(flag, nargs=2, type=int, default=None, help=help_)
            else:
                sp.add_argument(flag, default=None, help=f"{help_} (default: {default})" if default is not None else help_)
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Flags over config file over built-in defaults, converted to their types."""
    cfg = configparser.ConfigParser()
    if args.config:
        if not cfg.read(args.config):
            raise ConfigError(f"cannot read config file {args.config}")
    out = {}
    for name, typ, default, _ in GLOBAL_OPTIONS + OPTIONS[args.command]:
        value = getattr(args, name)
        if value is None:
            for section in (args.command, "global"):
                if cfg.has_option(section, name) or cfg.has_option(section, name.replace("_", "-")):
                    key = name if cfg.has_option(section, name) else name.replace("_", "-")
                    value = cfg.get(section, key)
                    break
        if value is None:
            if default is None:
                raise ConfigError(f"{args.command}: missing required option --{name.replace('_', '-')}")
            value = default
        try:
            out[name] = typ(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{args.command}: bad value for {name}: {exc}") from exc
    return out


def _read_manifest(directory, stage: str) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise DataError(f"{stage}: no manifest at {path}")
    return json.loads(path.read_text())


def _write_manifest(directory, doc: dict) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    (Path(directory) / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=1))


# ---------------------------------------------------------------- stages


def cmd_scene_gen(o: dict) -> None:
    _inherit_seed(o, {})
    if o["kind"] not in ("urban", "street"):
        raise ConfigError(f"scene-gen: unknown kind {o['kind']!r}")
    cfg = CampaignConfig(
        kind=o["kind"],
        n_scenes=o["n_scenes"],
        routes_per_scene=o["routes_per_scene"],
        route_points=o["route_points"],
        nlos_fraction=o["nlos_fraction"],
        urban=UrbanConfig(nx=o["grid"][0], ny=o["grid"][1], buildings_per_block=o["buildings_per_block"]),
        street=StreetConfig(),
    )
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for run in make_scenes(cfg, o["seed"]):
        sname, rname = f"scene_{run.scene_index:03d}.json", f"routes_{run.scene_index:03d}.json"
        run.scene.save(out / sname)
        save_routes(run.routes, out / rname)
        entries.append({"scene": sname, "routes": rname})
    doc = {k: o[k] for k in ("seed", "kind", "n_scenes", "routes_per_scene", "route_points", "nlos_fraction")}
    doc.update(stage="scene-gen", grid=list(o["grid"]), buildings_per_block=o["buildings_per_block"], scenes=entries)
    _write_manifest(out, doc)
    log.info("scene-gen: %d scenes -> %s", len(entries), out)


def cmd_trace(o: dict) -> None:
    src = Path(o["scenes"])
    man = _read_manifest(src, "trace")
    _inherit_seed(o, man)
    limits = TraceLimits(o["max_order"], o["min_power"], o["frequency"], o["tx_power"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    routes_doc = []
    for entry in man["scenes"]:
        scene = Scene.load(src / entry["scene"])
        for r in load_routes(src / entry["routes"]):
            snaps = trace_route(scene, r.tx, r.points(scene.ground_z), limits, threads=o["threads"])
            path = snapshot_path(out, r.route_id)
            save_snapshots(snaps, path)
            routes_doc.append({"route_id": r.route_id, "los": r.los, "tx": list(r.tx), "file": path.name, "scene": entry["scene"]})
    _write_manifest(
        out,
        {
            "stage": "trace",
            "seed": o["seed"],
            "scene_seed": man.get("seed"),
            "kind": man.get("kind"),
            "limits": {"max_order": o["max_order"], "min_power": o["min_power"], "frequency": o["frequency"], "tx_power": o["tx_power"]},
            "routes": routes_doc,
        },
    )
    log.info("trace: %d routes -> %s", len(routes_doc), out)


def cmd_cluster(o: dict) -> None:
    src = Path(o["traces"])
    man = _read_manifest(src, "cluster")
    _inherit_seed(o, man)
    if o["mode"] not in ("object", "facet"):
        raise ConfigError(f"cluster: unknown mode {o['mode']!r}")
    samples = []
    for r in man["routes"]:
        snaps = load_snapshots(src / r["file"])
        samples.extend(samples_from_snapshots(snaps, r["route_id"], o["slots"], WINDOW, o["stride"], o["mode"], tx=tuple(r["tx"])))
    if not samples:
        raise DataError("cluster: routes are too short to form a single window")
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_samples(samples, out / "samples.jsonl")
    _write_manifest(
        out,
        {
            "stage": "cluster",
            "seed": o["seed"],
            "slots": o["slots"],
            "stride": o["stride"],
            "mode": o["mode"],
            "kind": man.get("kind"),
            "route_los": {str(r["route_id"]): r["los"] for r in man["routes"]},
            "n_samples": len(samples),
        },
    )
    log.info("cluster: %d samples -> %s", len(samples), out)


def cmd_dataset(o: dict) -> None:
    src = Path(o["samples"])
    man = _read_manifest(src, "dataset")
    _inherit_seed(o, man)
    samples = load_samples(src / "samples.jsonl")
    parts = split(samples, o["seed"])
    stats = fit_norm(parts["train"])
    extra = {"stage": "dataset", "kind": man.get("kind"), "route_los": man.get("route_los", {}), "sizes": {k: len(v) for k, v in parts.items()}}
    save_dataset(o["out"], parts, None, stats, o["seed"], extra)
    log.info("dataset: %s -> %s", extra["sizes"], o["out"])


def _load_dataset(path, stage: str):
    if not (Path(path) / "manifest.json").is_file():
        raise DataError(f"{stage}: no dataset manifest in {path}")
    return load_dataset(path)


def cmd_train(o: dict) -> None:
    scale = _scale(o["scale"])
    man, parts, stats = _load_dataset(o["dataset"], "train")
    _inherit_seed(o, man)
    slots = parts["train"][0].features.shape[1]
    norm = stats if o["normalize"] else None
    model = init_model(scale, slots, seed=o["seed"], max_dim=o["max_dim"], residual=o["residual"], norm=norm)
    cfg = TrainConfig(epochs=o["epochs"], learning_rate=o["lr"], batch_size=o["batch"], seed=o["seed"])
    tr, va = (PairBatch.from_samples(parts[k], scale) for k in ("train", "val"))
    res = train(model, tr, va, cfg, log=lambda e, t, v: log.info("epoch %d train %.6g val %.6g", e, t, v))
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(res.model, out)
    with open(out.with_suffix(".history.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_loss"))
        w.writerow((0, f"{res.initial_train_loss:.17g}", f"{res.initial_val_loss:.17g}"))
        for e, (t, v) in enumerate(zip(res.train_loss, res.val_loss), 1):
            w.writerow((e, f"{t:.17g}", f"{v:.17g}"))
    doc = {k: o[k] for k in ("seed", "scale", "epochs", "lr", "batch", "max_dim", "residual", "normalize")}
    doc.update(stage="train", dataset=str(o["dataset"]), best_epoch=res.best_epoch, final_train_loss=res.train_loss[-1])
    out.with_suffix(".json").write_text(json.dumps(doc, sort_keys=True, indent=1))
    log.info("train: scale %d, final loss %.6g -> %s", scale, res.train_loss[-1], out)


def _scene_groups(samples, route_los: dict) -> list[tuple[str, list]]:
    groups = [("ALL", samples)]
    for tag, flag in (("LOS", True), ("NLOS", False)):
        part = [s for s in samples if route_los.get(str(s.route_id)) is flag]
        if part and len(part) < len(samples):
            groups.append((tag, part))
    return groups


def _scored(part, scale) -> bool:
    b = PairBatch.from_samples(part, scale)
    return bool(np.any(b.weights[:, b.predicted_indices] == 1.0))


def cmd_eval(o: dict) -> None:
    man, parts, _ = _load_dataset(o["dataset"], "eval")
    if o["split"] not in parts or not parts[o["split"]]:
        raise DataError(f"eval: split {o['split']!r} is empty or missing")
    samples = parts[o["split"]]
    models = [load_model(m) for m in o["models"]]
    scales = sorted({m.scale for m in models} | {_scale(s) for s in o["scales"]})
    if not scales:
        raise ConfigError("eval: give --models or --scales")
    reports = []
    for scale in scales:
        for tag, part in _scene_groups(samples, man.get("route_los", {})):
            if not _scored(part, scale):
                continue
            batch = PairBatch.from_samples(part, scale)
            reports.append(evaluate("baseline", batch, "baseline", tag))
            for path, m in zip(o["models"], models):
                if m.scale == scale:
                    name = "mll" if len(models) == 1 else f"mll:{Path(path).stem}"
                    reports.append(evaluate(m, batch, name, tag))
    Path(o["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_eval_csv(reports, o["out"])
    log.info("eval: %d rows -> %s", len(reports), o["out"])


def cmd_ablate(o: dict) -> None:
    scale = _scale(o["scale"])
    man, parts, stats = _load_dataset(o["dataset"], "ablate")
    _inherit_seed(o, man)
    for k in ("train", "val", "test"):
        if not parts.get(k) or not _scored(parts[k], scale):
            raise DataError(f"ablate: split {k!r} has no scored entries at scale {scale}")
    tr, va, te = (PairBatch.from_samples(parts[k], scale) for k in ("train", "val", "test"))
    grid = [AblationConfig("ELB", f"max_dim={d}", d, True) for d in o["dims"]]
    top = max(d for d in o["dims"] if d <= 512) if any(d <= 512 for d in o["dims"]) else o["dims"][0]
    grid += [AblationConfig("RES", "w/o residual", top, False), AblationConfig("RES", "w residual", top, True)]
    cfg = TrainConfig(epochs=o["epochs"], learning_rate=o["lr"], batch_size=o["batch"], seed=o["seed"])
    rows = ablation(tr, va, te, grid, cfg, stats, seed=o["seed"])
    Path(o["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(rows, o["out"])
    log.info("ablate: %d rows -> %s", len(rows), o["out"])


def cmd_cir(o: dict) -> None:
    tman = _read_manifest(o["traces"], "cir")
    _, parts, _ = _load_dataset(o["dataset"], "cir")
    files = {r["route_id"]: r["file"] for r in tman["routes"]}
    model = load_model(o["model"]) if o["model"] else None
    scale = model.scale if model else _scale(o["scale"])
    samples = parts[o["split"]][: o["max_samples"]]
    if not samples:
        raise DataError(f"cir: split {o['split']!r} is empty")
    batch = PairBatch.from_samples(samples, scale)
    pred = predict(model, batch) if model else predict_batch(batch)
    pi = list(batch.predicted_indices)
    taps, rates = [], []
    cache: dict[int, list] = {}
    for k, s in enumerate(samples):
        if s.route_id not in files:
            raise DataError(f"cir: route {s.route_id} has no trace")
        if s.route_id not in cache:
            cache[s.route_id] = load_snapshots(Path(o["traces"]) / files[s.route_id])
        snaps = cache[s.route_id]
        for n, i in enumerate(pi):
            snap = snaps[s.start_index + i]
            # restore only the clusters that exist at this snapshot
            keep = np.where((s.slot_object_ids != PAD_OBJECT_ID) & (s.weights[i] > GAP_WEIGHT), 1.0, 0.0)
            restored = reconstruct_slots(pred[k, n], s.slot_object_ids, keep, s.tx, snap.rx_position)
            simulated = simulated_taps(snap)
            taps += [(snap.index, t) for t in restored] + [(snap.index, t) for t in simulated]
            rates.append((s.route_id, snap.index, len(restored), len(simulated), match_rate(restored, simulated, o["delay_tol"], o["power_tol"])))
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_cir_csv(taps, out / "taps.csv")
    with open(out / "match.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("route_id", "snapshot_index", "restored", "simulated", "match_rate"))
        for r in rates:
            w.writerow((*r[:4], f"{r[4]:.9g}"))
    log.info("cir: mean match rate %.3f over %d snapshots -> %s", float(np.mean([r[4] for r in rates])), len(rates), out)


SUMMARY_COLUMNS = (
    "scale",
    "scene",
    "method",
    "ame_power",
    "rmse_power",
    "ame_loc",
    "rmse_loc",
    "rmse_power_change_pct",
    "rmse_loc_change_pct",
)


def cmd_report(o: dict) -> None:
    rows = []
    for path in o["evals"]:
        if not Path(path).is_file():
            raise DataError(f"report: no eval CSV at {path}")
        got = read_eval_csv(path)
        if got and set(EVAL_COLUMNS) - set(got[0]):
            raise DataError(f"report: {path} is not an eval CSV")
        rows += got
    base = {(r["scale"], r["scene"]): r for r in rows if r["method"] == "baseline"}
    out_rows = []
    order = sorted({(int(r["scale"]), r["scene"]) for r in rows}, key=lambda k: (k[0], ("ALL", "LOS", "NLOS").index(k[1]) if k[1] in ("ALL", "LOS", "NLOS") else 3, k[1]))
    seen = set()
    for scale, scene in order:
        for r in rows:
            key = (r["scale"], r["scene"], r["method"])
            if int(r["scale"]) != scale or r["scene"] != scene or key in seen:
                continue
            seen.add(key)
            b = base.get((r["scale"], r["scene"]))
            dp = dl = ""
            if b is not None and r["method"] != "baseline":
                if float(b["rmse_power"]) > 0:
                    dp = f"{relative_change(float(r['rmse_power']), float(b['rmse_power'])):.6g}"
                if float(b["rmse_loc"]) > 0:
                    dl = f"{relative_change(float(r['rmse_loc']), float(b['rmse_loc'])):.6g}"
            out_rows.append([r["scale"], r["scene"], r["method"], r["ame_power"], r["rmse_power"], r["ame_loc"], r["rmse_loc"], dp, dl])
    Path(o["out"]).parent.mkdir(parents=True, exist_ok=True)
    with open(o["out"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(out_rows)
    log.info("report: %d rows -> %s", len(out_rows), o["out"])


COMMANDS = {
    "scene-gen": cmd_scene_gen,
    "trace": cmd_trace,
    "cluster": cmd_cluster,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "cir": cmd_cir,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        opts = resolve(args)
        COMMANDS[args.command](opts)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DatasetError, SceneError, ModelError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
