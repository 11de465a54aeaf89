"""Command-line entry point. Exit codes: 0 success, 1 runtime failure, 2 invalid configuration."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import traceback
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .config import ConfigError, RunConfig, defaults_toml, load_config
from .curation import BinaryMixConfig
from .data import (
    CLOSE,
    CsvSchema,
    DataError,
    PanelSeries,
    SampleSet,
    SplitDataset,
    chronological_split,
    fit_rolling_stats,
    kline_violations,
    load_panel_csv,
    make_windows,
    write_panel_csv,
)
from .diffcore import load_checkpoint
from .manipulation import (
    ManipulationContext,
    ManipulationPolicy,
    ReplayError,
    manipulate,
    read_provenance,
    replay_record,
    write_provenance,
)
from .mixups import build_coint_matrix
from .models import InputEncoder, build_model, evaluate
from .planner import Planner, planner_input_widths
from .synthetic import PanelSpec, synthetic_panel
from .trading import EnvConfig, RandomPolicy, TradingEnv, buy_and_hold, forecast_policy, run_episode, write_trajectory
from .training import TrainerConfig, joint_train, write_history

log = logging.getLogger("driftforge")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
AUGMENTED_FILE = "augmented.csv"
PROVENANCE_FILE = "provenance.jsonl"


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for pkg in ("scipy", "statsmodels", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, outputs: list[Path]) -> Path:
    """No wall-clock fields, so identical runs produce identical manifests."""
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": _versions(),
        "config": cfg.to_dict() | {"out": None},
        "outputs": {p.name: file_sha256(p) for p in sorted(outputs)},
    }
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _schema(cfg: RunConfig) -> CsvSchema:
    d = cfg.data
    return CsvSchema(d.timestamp, d.open, d.high, d.low, d.close, d.volume, tuple(d.indicators), d.stock_column or None)


def load_panel(cfg: RunConfig) -> PanelSeries:
    if not cfg.data.paths:
        raise ConfigError("data.paths", "no input files configured")
    return load_panel_csv(cfg.data.paths, _schema(cfg), require_multi_stock=bool(cfg.operations.mixups))


@dataclass
class Prepared:
    panel: PanelSeries
    split: SplitDataset
    ctx: ManipulationContext
    train: SampleSet
    valid: SampleSet
    test: SampleSet
    encoder: InputEncoder


def prepare(cfg: RunConfig) -> Prepared:
    panel = load_panel(cfg)
    split = chronological_split(panel, cfg.split.ratios)
    L = cfg.split.lookback
    stats = fit_rolling_stats(split.train, window=min(cfg.split.stats_window, len(split.train)))
    coint = build_coint_matrix(split.train) if cfg.operations.mixups else None
    ctx = ManipulationContext(
        split.train,
        stats,
        coint,
        cfg.transform_kinds(),
        cfg.mix_kinds(),
        cfg.operations.k,
        BinaryMixConfig(cfg.operations.b_max, cfg.operations.mi_bins),
        cfg.hash(),
    )
    b1, b2 = split.bounds
    return Prepared(
        panel,
        split,
        ctx,
        make_windows(split.train, L, 0),
        make_windows(split.valid, L, b1),
        make_windows(split.test, L, b2),
        InputEncoder.fit(split.train),
    )


def write_augmented(path: Path, batches: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]], feature_ids) -> None:
    """Rows of (sample_id, stock, end, offset, features..., target); floats at full precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "stock", "end", "offset", *feature_ids, "target"])
        for ids, stock, end, (windows, targets) in ((b[0], b[1], b[2], b[3]) for b in batches):
            for k in range(len(ids)):
                for off, row in enumerate(windows[k]):
                    w.writerow([int(ids[k]), int(stock[k]), int(end[k]), off, *(repr(float(v)) for v in row), repr(float(targets[k]))])


def read_augmented_windows(path: Path, lookback: int) -> np.ndarray:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        n_feat = len(header) - 5
        rows = [[float(x) for x in row[4 : 4 + n_feat]] for row in r]
    a = np.array(rows, dtype=np.float64)
    if len(a) % lookback:
        raise DataError(f"{path}: row count {len(a)} is not a multiple of lookback {lookback}")
    return a.reshape(-1, lookback, n_feat)


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, out: Path, args) -> list[Path]:
    panel = load_panel(cfg)
    cache = out / "panel.npz"
    np.savez(
        cache,
        values=panel.values,
        timestamps=panel.timestamps.astype("int64"),
        stock_ids=np.array(panel.stock_ids),
        feature_ids=np.array(panel.feature_ids),
    )
    split = chronological_split(panel, cfg.split.ratios)
    report = {
        "stocks": list(panel.stock_ids),
        "features": list(panel.feature_ids),
        "n_timestamps": panel.n_timestamps,
        "first": str(panel.timestamps[0]),
        "last": str(panel.timestamps[-1]),
        "kline_violations": int(kline_violations(panel.values).sum()),
        "split_sizes": [len(split.train), len(split.valid), len(split.test)],
    }
    rpath = out / "schema_report.json"
    rpath.write_text(json.dumps(report, indent=2) + "\n")
    return [cache, rpath]


def drift_features(panel: PanelSeries) -> np.ndarray:
    """(T-1, S, F) stationary view: close log return, log open/high/low relative to close, log volume, indicators."""
    v = panel.values
    c = v[:, :, CLOSE]
    parts = [np.log(c[1:] / c[:-1])[:, :, None], np.log(v[1:, :, :3] / c[1:, :, None]), np.log1p(v[1:, :, 4:5])]
    if v.shape[2] > 5:
        parts.append(v[1:, :, 5:])
    return np.concatenate(parts, axis=2)


def cmd_drift_report(cfg: RunConfig, out: Path, args) -> list[Path]:
    panel = load_panel(cfg)
    d = cfg.diagnostics
    report = dg.proximity_report(
        drift_features(panel), d.folds, cfg.split.ratios, d.psi_bins, mmd_points=d.mmd_points, seed=cfg.seed
    )
    path = out / "drift_report.csv"
    report.to_csv(path)
    for (pair, metric), v in report.averages().items():
        print(f"{pair:>10} {metric:>5} {v:.6g}")
    return [path]


def cmd_augment(cfg: RunConfig, out: Path, args) -> list[Path]:
    prep = prepare(cfg)
    n, m = prep.ctx.policy_shape
    policy = ManipulationPolicy.uniform(n, m, cfg.policy.alpha, cfg.policy.lam)
    batches, records = [], []
    for step, idx in enumerate(_batches(len(prep.train), cfg.trainer.batch_size)):
        batch = prep.train.subset(idx)
        aug, rec = manipulate(batch, policy, prep.ctx, cfg.seed, 0, step)
        records.append(rec)
        batches.append((batch.ids, batch.stock, batch.end, (aug.windows, aug.targets)))
    apath, ppath = out / AUGMENTED_FILE, out / PROVENANCE_FILE
    write_augmented(apath, batches, prep.panel.feature_ids)
    write_provenance(records, ppath)
    print(f"augmented {sum(int(np.sum([c is not None for c in r.choices])) for r in records)} of {len(prep.train)} samples")
    return [apath, ppath]


def cmd_replay(cfg: RunConfig, out: Path, args) -> list[Path]:
    log_path = Path(args.log) if args.log else out / PROVENANCE_FILE
    if not log_path.is_file():
        raise DataError(f"provenance log not found: {log_path}")
    prep = prepare(cfg)
    records = read_provenance(log_path)
    batches = []
    for rec in records:
        aug = replay_record(rec, prep.train, prep.ctx)
        pos = {int(s): k for k, s in enumerate(prep.train.ids)}
        idx = np.array([pos[s] for s in rec.sample_ids])
        batches.append((prep.train.ids[idx], prep.train.stock[idx], prep.train.end[idx], (aug.windows, aug.targets)))
    path = out / ("replayed_" + AUGMENTED_FILE)
    write_augmented(path, batches, prep.panel.feature_ids)
    print(f"replayed {len(records)} batches; all checksums match")
    return [path]


def cmd_train(cfg: RunConfig, out: Path, args) -> list[Path]:
    prep = prepare(cfg)
    t = cfg.trainer
    model = build_model(cfg.model.kind, prep.panel.values.shape[2], cfg.split.lookback, prep.encoder, cfg.seed,
                        cfg.model.hidden, cfg.model.feature_width)
    planner = None
    if cfg.policy.mode == "planned":
        planner = Planner(*planner_input_widths(model), prep.ctx.policy_shape, t.planner_hidden, cfg.seed)
    tcfg = TrainerConfig(
        freq=t.freq, beta=t.beta, start_epoch=t.start_epoch, master_seed=cfg.seed, max_epochs=t.max_epochs,
        batch_size=t.batch_size, lr=t.lr, patience=t.patience, delta=cfg.scheduler.delta, tau=cfg.scheduler.tau,
        gamma_risk=t.gamma_risk, policy_mode=cfg.policy.mode, fixed_lambda=cfg.policy.lam,
        planner_batch=t.planner_batch, valid_batch=t.valid_batch,
    )
    result = joint_train(tcfg, prep.train, prep.valid, model, prep.ctx, planner)
    paths = [out / "history.csv", out / PROVENANCE_FILE, out / "model.npz", out / "metrics.json"]
    write_history(result.history, paths[0])
    write_provenance(result.records, paths[1])
    model.params.save(paths[2])
    if planner is not None:
        paths.append(out / "planner.npz")
        planner.params.save(paths[-1])
    va = evaluate(model, prep.valid.windows, prep.valid.targets)
    te = evaluate(model, prep.test.windows, prep.test.targets)
    metrics = {"best_epoch": result.best_epoch, "valid_mse": va.mean, "valid_std": va.std, "test_mse": te.mean, "test_std": te.std}
    paths[3].write_text(json.dumps(metrics, indent=2) + "\n")
    print(json.dumps(metrics))
    return paths


def cmd_stylized_facts(cfg: RunConfig, out: Path, args) -> list[Path]:
    panel = load_panel(cfg)
    d = cfg.diagnostics
    reference = load_panel_csv([args.reference], _schema(cfg)) if args.reference else None
    rows = []
    for s, sid in enumerate(panel.stock_ids):
        c = panel.values[:, s, CLOSE]
        ref = None
        if reference is not None:
            rc = reference.values[:, min(s, reference.n_stocks - 1), CLOSE]
            ref = np.diff(rc) / rc[:-1]
        rep = dg.stylized_facts(np.diff(c) / c[:-1], d.max_lag, d.vol_window, ref)
        rows.extend({"stock": sid, **r} for r in rep.rows())
    path = out / "stylized_facts.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return [path]


def cmd_discriminate(cfg: RunConfig, out: Path, args) -> list[Path]:
    prep = prepare(cfg)
    real = prep.train.windows
    synth_path = args.synthetic or cfg.diagnostics.synthetic_path
    if synth_path:
        synth = read_augmented_windows(Path(synth_path), cfg.split.lookback)
    else:
        n, m = prep.ctx.policy_shape
        policy = ManipulationPolicy.uniform(n, m, 1.0, cfg.policy.lam)
        synth = np.concatenate([
            manipulate(prep.train.subset(idx), policy, prep.ctx, cfg.seed, 0, k)[0].windows
            for k, idx in enumerate(_batches(len(prep.train), cfg.trainer.batch_size))
        ])
    res = dg.discriminative_score(prep.encoder(real).data, prep.encoder(synth).data, seed=cfg.seed)
    path = out / "discriminative_score.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["score", "accuracy", "epochs", "n_test"])
        w.writerow([repr(res.score), repr(res.accuracy), res.epochs, res.n_test])
    print(f"discriminative score {res.score:.4f} (accuracy {res.accuracy:.4f})")
    return [path]


def cmd_backtest(cfg: RunConfig, out: Path, args) -> list[Path]:
    panel = load_panel(cfg)
    split = chronological_split(panel, cfg.split.ratios)
    e = cfg.env
    model = None
    if e.policy == "model":
        if not e.checkpoint:
            raise ConfigError("env.checkpoint", "policy 'model' needs a checkpoint path")
        model = build_model(cfg.model.kind, panel.values.shape[2], e.lookback, InputEncoder.fit(split.train),
                            cfg.seed, cfg.model.hidden, cfg.model.feature_width)
        model.params.load_state_dict(load_checkpoint(e.checkpoint))
    env_cfg = EnvConfig(e.initial_cash, e.cost, e.discount, e.lookback)
    paths, rows = [], []
    for s, sid in enumerate(split.test.stock_ids):
        values = split.test.values[:, s]
        env = TradingEnv(values[:, CLOSE], env_cfg, values)
        if e.policy == "buy_and_hold":
            policy = buy_and_hold
        elif e.policy == "random":
            policy = RandomPolicy(cfg.seed + s)
        else:
            policy = forecast_policy(lambda w: float(model.predict(w[None])[0]))
        traj, m = run_episode(env, policy)
        tpath = out / f"trajectory_{sid}.csv"
        write_trajectory(traj, tpath)
        paths.append(tpath)
        rows.append([sid, e.policy, repr(m.total_return), repr(m.sharpe), m.n_trades, int(m.degenerate)])
    mpath = out / "backtest_metrics.csv"
    with open(mpath, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stock", "policy", "total_return", "sharpe", "trades", "degenerate"])
        w.writerows(rows)
    return [mpath, *paths]


def cmd_synth(cfg: RunConfig, out: Path, args) -> list[Path]:
    spec = PanelSpec(n_stocks=args.stocks, n_timestamps=args.timestamps, drift=args.drift)
    path = Path(args.path) if args.path else out / "synthetic_panel.csv"
    write_panel_csv(synthetic_panel(spec, cfg.seed), path)
    return [path]


COMMANDS = {
    "ingest": cmd_ingest,
    "drift-report": cmd_drift_report,
    "augment": cmd_augment,
    "train": cmd_train,
    "replay": cmd_replay,
    "stylized-facts": cmd_stylized_facts,
    "discriminate": cmd_discriminate,
    "backtest": cmd_backtest,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftforge", description="Drift-aware augmentation for OHLCV forecasting.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides the file)")
        p.add_argument("--out", help="output directory (overrides the file)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "replay":
            p.add_argument("--log", help="provenance log to replay (default: <out>/provenance.jsonl)")
        if name == "stylized-facts":
            p.add_argument("--reference", help="panel CSV to compare against")
        if name == "discriminate":
            p.add_argument("--synthetic", help="augmented CSV from the augment command")
        if name == "synth":
            p.add_argument("--stocks", type=int, default=4)
            p.add_argument("--timestamps", type=int, default=500)
            p.add_argument("--drift", type=float, default=0.0)
            p.add_argument("--path", help="output CSV path")
    cp = sub.add_parser("config")
    cp.add_argument("--defaults", action="store_true", help="print the built-in defaults as TOML")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "config":
        sys.stdout.write(defaults_toml())
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in (("seed", args.seed), ("out", args.out)) if v is not None}
    try:
        cfg = load_config(args.config, overrides, check_paths=args.command != "synth")
        if args.command != "synth" and not cfg.data.paths:
            raise ConfigError("data.paths", "no input files configured")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](cfg, out, args)
        write_manifest(out, args.command, cfg, outputs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ReplayError as exc:
        print(f"replay failed on field {exc.field!r}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
