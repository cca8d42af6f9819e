"""Command-line entry point: prep, train, eval, ablation, export.

Exit codes: 0 ok, 2 input error, 3 training divergence, 4 artifact mismatch,
5 empty selection.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import struct
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, flag_names, parse_value
from .dataset import CHANNEL_NAMES, N_FEATURES, make_windows, parse_cmapss, select_units
from .errors import ConfigError, DimensionError, FormatError, ParameterError, StagnnError, TrainingDiverged
from .evaluation import evaluate
from .graph import AdjacencyMatrix, build_adjacency
from .model import VARIANTS, Model, ModelState
from .normalization import NormStats, apply_norm_all, fit_norm
from .training import DatasetBundle, run_trials

logger = logging.getLogger("stagnn")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4
EXIT_EMPTY = 5

STATS_FILE = "norm_stats.json"
ADJACENCY_FILE = "adjacency.csv"
SUMMARY_FILE = "prep_summary.json"
REPORT_FILE = "report.csv"
ABLATION_FILE = "ablation.csv"
ABLATION_HEADER = ["variant", "heads_spatial", "heads_temporal", "trials", "rmse_mean", "rmse_std", "score_mean", "score_std"]


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


@contextlib.contextmanager
def _log_to(out_dir: Path):
    """Timestamps go to ``run.log`` only, keeping every other output reproducible."""
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    try:
        yield
    finally:
        logger.removeHandler(handler)
        handler.close()


def _compute_mode(cfg: RunConfig):
    return T.deterministic() if cfg.deterministic else contextlib.nullcontext()


def load_raw(cfg: RunConfig):
    for p in cfg.paths:
        if not p.is_file():
            raise CommandError(EXIT_INPUT, f"missing data file: {p}")
    try:
        train, test = parse_cmapss(*cfg.paths)
    except FormatError as exc:
        raise CommandError(EXIT_INPUT, f"bad data file: {exc}") from None
    return select_units(train, cfg.max_units), select_units(test, cfg.max_units)


def load_prep(cfg: RunConfig):
    stats_path, adj_path = cfg.out / STATS_FILE, cfg.out / ADJACENCY_FILE
    for p in (stats_path, adj_path):
        if not p.is_file():
            raise CommandError(EXIT_INPUT, f"missing prep artifact {p}; run 'prep' first")
    stats = NormStats.load(stats_path)
    if stats.mode != cfg.normalization or stats.k != cfg.k:
        raise CommandError(
            EXIT_MISMATCH,
            f"prep artifacts were built with {stats.mode}/K={stats.k}, config asks for {cfg.normalization}/K={cfg.k}",
        )
    adjacency = AdjacencyMatrix.load_csv(adj_path, lam=cfg.graph_threshold, measure=cfg.graph_measure)
    return stats, adjacency


def build_bundle(cfg: RunConfig, stats: NormStats, adjacency: AdjacencyMatrix) -> DatasetBundle:
    train, test = load_raw(cfg)
    train_n = apply_norm_all(train, stats)
    test_n = apply_norm_all(test, stats)
    return DatasetBundle(
        train=make_windows(train_n, cfg.window, cfg.stride, cfg.r_max, "train"),
        test=make_windows(test_n, cfg.window, cfg.stride, cfg.r_max, "test"),
        adjacency=adjacency,
        r_max=float(cfg.r_max),
    )


def _check_model_fits(cfg: RunConfig, adjacency: AdjacencyMatrix) -> None:
    if cfg.model.n_nodes != N_FEATURES:
        raise CommandError(EXIT_MISMATCH, f"model expects {cfg.model.n_nodes} nodes, data has {N_FEATURES} channels")
    if adjacency.n_nodes != cfg.model.n_nodes:
        raise CommandError(EXIT_MISMATCH, f"adjacency has {adjacency.n_nodes} nodes, model expects {cfg.model.n_nodes}")


# -- commands ------------------------------------------------------------------------


def cmd_prep(cfg: RunConfig) -> dict:
    """Fit normalization stats and the sensor graph; write them with a summary."""
    train, test = load_raw(cfg)
    if not train:
        raise CommandError(EXIT_INPUT, "no training units selected")
    try:
        stats = fit_norm(train, cfg.normalization, cfg.k, cfg.seed)
    except StagnnError as exc:
        raise CommandError(EXIT_INPUT, f"normalization failed: {exc}") from None
    train_n = apply_norm_all(train, stats)
    adjacency = build_adjacency(train_n, cfg.graph_threshold, cfg.graph_measure)
    train_w = make_windows(train_n, cfg.window, cfg.stride, cfg.r_max, "train")
    test_w = make_windows(apply_norm_all(test, stats), cfg.window, cfg.stride, cfg.r_max, "test")

    summary = {
        "subset": cfg.subset,
        "normalization": cfg.normalization,
        "n_clusters": stats.k,
        "train_units": len(train),
        "test_units": len(test),
        "train_cycles": int(sum(t.length for t in train)),
        "train_windows": len(train_w),
        "test_windows": len(test_w),
        "skipped_train_units": train_w.skipped_units,
        "window": cfg.window,
        "stride": cfg.stride,
        "r_max": cfg.r_max,
        "graph_threshold": cfg.graph_threshold,
        "graph_measure": cfg.graph_measure,
        "graph_edges": adjacency.n_edges,
        "channels": CHANNEL_NAMES,
    }
    cfg.out.mkdir(parents=True, exist_ok=True)
    stats.save(cfg.out / STATS_FILE)
    adjacency.save_csv(cfg.out / ADJACENCY_FILE)
    _write_json(cfg.out / SUMMARY_FILE, summary)
    print(f"{cfg.subset}: {len(train)} train units ({len(train_w)} windows), {len(test)} test units, "
          f"{stats.k} cluster(s), {adjacency.n_edges} graph edges")
    return summary


def _checkpoint_extras(cfg: RunConfig, stats: NormStats, adjacency: AdjacencyMatrix, trial: int) -> dict:
    return {
        "trial": trial,
        "seed": cfg.seed + trial,
        "run_config": cfg.to_dict(),
        "train_config": cfg.train.to_dict(),
        "norm_stats_file": str(cfg.out / STATS_FILE),
        "norm_stats": stats.to_dict(),
        "adjacency": adjacency.A.astype(int).tolist(),
        "graph_threshold": cfg.graph_threshold,
    }


def checkpoint_path(cfg: RunConfig, trial: int) -> Path:
    return cfg.out / "checkpoints" / f"trial_{trial:02d}.ckpt"


def cmd_train(cfg: RunConfig):
    """Train ``train.trials`` models; write the report and one checkpoint per trial."""
    stats, adjacency = load_prep(cfg)
    _check_model_fits(cfg, adjacency)
    bundle = build_bundle(cfg, stats, adjacency)
    try:
        report, states = run_trials(bundle, cfg.model, cfg.train, jobs=cfg.jobs, deterministic=cfg.deterministic)
    except TrainingDiverged as exc:
        raise CommandError(EXIT_DIVERGED, f"training diverged in trial {exc.trial}: {exc}") from None
    except ConfigError as exc:
        raise CommandError(EXIT_INPUT, str(exc)) from None

    (cfg.out / "checkpoints").mkdir(parents=True, exist_ok=True)
    for t, state in enumerate(states):
        state.extras = _checkpoint_extras(cfg, stats, adjacency, t)
        state.save(checkpoint_path(cfg, t))
    (cfg.out / REPORT_FILE).write_text(report.to_csv())
    for r in report.trials:
        logger.info("trial %d wall-clock %.2fs", r.trial, r.seconds)
    print(f"{cfg.model.variant} on {cfg.subset}: RMSE {report.rmse_mean:.4f} +- {report.rmse_std:.4f}, "
          f"Score {report.score_mean:.4f} +- {report.score_std:.4f} over {len(report.trials)} trial(s)")
    return report


def load_checkpoint(path, cfg: RunConfig):
    path = Path(path)
    if not path.is_file():
        raise CommandError(EXIT_INPUT, f"missing checkpoint {path}")
    try:
        state = ModelState.load(path)
    except (FormatError, ValueError, KeyError, struct.error) as exc:
        raise CommandError(EXIT_MISMATCH, f"unreadable checkpoint {path}: {exc}") from None
    want = cfg.model.to_dict()
    have = state.config.to_dict()
    for key in ("seed", "identity_attention"):
        want.pop(key)
        have.pop(key)
    if want != have:
        diff = sorted(k for k in want if want[k] != have.get(k))
        raise CommandError(EXIT_MISMATCH, f"checkpoint does not match config model settings: {diff}")
    extras = state.extras
    stats = NormStats.from_dict(extras["norm_stats"])
    adjacency = AdjacencyMatrix.from_binary(extras["adjacency"], lam=extras.get("graph_threshold", float("nan")))
    try:
        model = Model.from_state(state, adjacency)
    except (DimensionError, ConfigError) as exc:
        raise CommandError(EXIT_MISMATCH, f"checkpoint shapes are inconsistent: {exc}") from None
    return model, stats, adjacency


def cmd_eval(cfg: RunConfig, checkpoint) -> tuple:
    model, stats, adjacency = load_checkpoint(checkpoint, cfg)
    bundle = build_bundle(cfg, stats, adjacency)
    if len(bundle.test) == 0:
        raise CommandError(EXIT_INPUT, "no test units selected")
    preds, rmse_v, score_v = evaluate(model, bundle.test, bundle.r_max)
    out = cfg.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    preds.save_csv(out / "predictions.csv")
    (out / "metrics.csv").write_text(f"checkpoint,rmse,score\n{Path(checkpoint).name},{rmse_v!r},{score_v!r}\n")
    print(f"RMSE {rmse_v:.4f}  Score {score_v:.4f}  ({len(preds)} test units)")
    return preds, rmse_v, score_v


def ablation_rows(bundle: DatasetBundle, cfg: RunConfig, variants=VARIANTS) -> list[dict]:
    rows = []
    for variant in variants:
        mc = replace(cfg.model, variant=variant, identity_attention=False)
        report, _ = run_trials(bundle, mc, cfg.train, jobs=cfg.jobs, deterministic=cfg.deterministic)
        rows.append({
            "variant": variant,
            "heads_spatial": mc.heads_spatial,
            "heads_temporal": mc.heads_temporal,
            "trials": len(report.trials),
            "rmse_mean": report.rmse_mean,
            "rmse_std": report.rmse_std,
            "score_mean": report.score_mean,
            "score_std": report.score_std,
        })
        logger.info("ablation %s: rmse %.4f score %.4f", variant, report.rmse_mean, report.score_mean)
    return rows


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(ABLATION_HEADER)
    for r in rows:
        out.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in ABLATION_HEADER])
    return buf.getvalue()


def cmd_ablation(cfg: RunConfig) -> list[dict]:
    """Train all six variants with shared seeds; write one comparison table."""
    stats, adjacency = load_prep(cfg)
    _check_model_fits(cfg, adjacency)
    bundle = build_bundle(cfg, stats, adjacency)
    try:
        rows = ablation_rows(bundle, cfg)
    except TrainingDiverged as exc:
        raise CommandError(EXIT_DIVERGED, f"training diverged in trial {exc.trial}: {exc}") from None
    (cfg.out / ABLATION_FILE).write_text(ablation_csv(rows))
    for r in rows:
        print(f"{r['variant']:>7}  RMSE {r['rmse_mean']:9.4f}  Score {r['score_mean']:12.4f}")
    return rows


def _parse_ids(text):
    if text in (None, "", "all"):
        return None
    return {int(v) for v in str(text).split(",") if v.strip()}


def select_windows(windows, units=None, which="last") -> np.ndarray:
    """Indices of windows matching a unit list and ``last``/``all``/index list."""
    unit_ids = _parse_ids(units)
    chosen = np.ones(len(windows), dtype=bool)
    if unit_ids is not None:
        chosen &= np.isin(windows.unit_ids, sorted(unit_ids))
    if which == "last":
        last = np.zeros(len(windows), dtype=bool)
        for u in np.unique(windows.unit_ids):
            idx = np.flatnonzero(windows.unit_ids == u)
            last[idx[np.argmax(windows.window_index[idx])]] = True
        chosen &= last
    elif which != "all":
        chosen &= np.isin(windows.window_index, sorted(_parse_ids(which)))
    return np.flatnonzero(chosen)


def export_record(model: Model, windows, i: int, split: str) -> dict:
    sample = windows[i]
    result = model.forward(sample.features, training=False)
    record = {
        "split": split,
        "unit_id": sample.unit_id,
        "window_index": sample.window_index,
        "end_cycle": int(windows.end_cycles[i]),
        "label": sample.label,
        "prediction": float(result.prediction.data[0]),
        "features": result.features.data[0].tolist(),
        "spatial": {k: v[0].tolist() for k, v in result.spatial.items()},
        "temporal": {k: v[0].tolist() for k, v in result.temporal.items()},
    }
    if model.adjacency is not None:
        record["neighbourhood"] = model.adjacency.neighbourhood.astype(int).tolist()
    return record


def load_export(path) -> dict:
    """Read an exported window back, with arrays as numpy."""
    rec = json.loads(Path(path).read_text())
    rec["features"] = np.asarray(rec["features"])
    rec["spatial"] = {k: np.asarray(v) for k, v in rec["spatial"].items()}
    rec["temporal"] = {k: np.asarray(v) for k, v in rec["temporal"].items()}
    if "neighbourhood" in rec:
        rec["neighbourhood"] = np.asarray(rec["neighbourhood"], dtype=bool)
    return rec


def cmd_export(cfg: RunConfig, checkpoint, split: str = "test", units=None, windows: str = "last") -> list[Path]:
    """Write attention matrices and pre-head features for the selected windows."""
    model, stats, adjacency = load_checkpoint(checkpoint, cfg)
    bundle = build_bundle(cfg, stats, adjacency)
    pool = bundle.test if split == "test" else bundle.train
    try:
        picked = select_windows(pool, units, windows)
    except ValueError as exc:
        raise CommandError(EXIT_INPUT, f"bad selector: {exc}") from None
    if len(picked) == 0:
        raise CommandError(EXIT_EMPTY, "selector matched no windows")
    out = cfg.out / "export"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in picked:
        rec = export_record(model, pool, int(i), split)
        path = out / f"{split}_unit{rec['unit_id']:03d}_window{rec['window_index']:04d}.json"
        path.write_text(json.dumps(rec) + "\n")
        paths.append(path)
    print(f"exported {len(paths)} window(s) to {out}")
    return paths


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stagnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        group = p.add_argument_group("config overrides (JSON literals or plain strings)")
        for name in flag_names():
            group.add_argument(f"--{name}", dest=f"set:{name}", metavar="VALUE")
        return p

    common(sub.add_parser("prep", help="fit normalization stats and the sensor graph"))
    common(sub.add_parser("train", help="train and evaluate all trials"))
    p = common(sub.add_parser("eval", help="evaluate a checkpoint on the test split"))
    p.add_argument("--checkpoint", required=True)
    common(sub.add_parser("ablation", help="compare the six model variants"))
    p = common(sub.add_parser("export", help="dump attention and hidden features"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--units", default="all", help="comma-separated unit ids or 'all'")
    p.add_argument("--windows", default="last", help="'last', 'all' or comma-separated window indices")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {
        key[4:]: parse_value(value)
        for key, value in vars(args).items()
        if key.startswith("set:") and value is not None
    }
    if args.config and not Path(args.config).is_file():
        raise CommandError(EXIT_INPUT, f"missing config file {args.config}")
    try:
        return RunConfig.load(args.config, overrides)
    except (ConfigError, ParameterError, json.JSONDecodeError) as exc:
        raise CommandError(EXIT_INPUT, f"invalid configuration: {exc}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        with _log_to(cfg.out), _compute_mode(cfg):
            logger.info("command %s", args.command)
            if args.command == "prep":
                cmd_prep(cfg)
            elif args.command == "train":
                cmd_train(cfg)
            elif args.command == "eval":
                cmd_eval(cfg, args.checkpoint)
            elif args.command == "ablation":
                cmd_ablation(cfg)
            elif args.command == "export":
                cmd_export(cfg, args.checkpoint, args.split, args.units, args.windows)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
