"""Command-line entry point: ``dpcvqa {gen,inspect,train,eval,score,analyze,fdcheck}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import ExitStack
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import calibnet, datastore, evaluation, training
from .calibnet import VariantMode
from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .config import RunConfig, load_config_file, merge
from .errors import DPCError, InvalidInputError
from .perception import PerceptionRecord, judge

log = logging.getLogger("dpcvqa")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

_FLAGS = {
    "data": dict(help="input .dpcf container"),
    "out": dict(help="output path"),
    "checkpoint": dict(help="checkpoint path (written by train, read by eval/score/analyze)"),
    "fold": dict(type=int, help="fold index 0-4"),
    "seed": dict(type=int, help="master seed"),
    "mode": dict(help="base_only | direct | score_cond | residual"),
    "d": dict(type=int, help="shared latent width"),
    "queries": dict(type=int, help="number of calibration queries M"),
    "heads": dict(type=int, help="attention heads (must divide d)"),
    "alpha": dict(type=float, help="residual bound"),
    "lambda-res": dict(type=float, help="weight of the mean |Delta| penalty"),
    "smooth-l1-beta": dict(type=float, help="Smooth L1 transition point"),
    "epochs": dict(type=int),
    "batch": dict(type=int),
    "lr": dict(type=float),
    "weight-decay": dict(type=float),
    "anchors": dict(help="comma-separated verbalizer anchors"),
    "records": dict(type=int, help="number of synthetic records"),
    "noise": dict(type=float, help="synthetic label noise sigma"),
    "log-file": dict(help="also append the epoch log here"),
    "protocol": dict(action="store_true", help="run the full 5-fold protocol"),
    "corrupt": dict(action="store_true", help="debug: corrupt one analytic gradient coordinate"),
}

_COMMAND_FLAGS = {
    "gen": ["out", "records", "seed", "noise"],
    "inspect": ["data"],
    "train": ["data", "checkpoint", "out", "fold", "seed", "mode", "d", "queries", "heads", "alpha",
              "lambda-res", "smooth-l1-beta", "epochs", "batch", "lr", "weight-decay", "anchors", "log-file"],
    "eval": ["data", "checkpoint", "out", "fold", "seed", "mode", "protocol", "d", "queries", "heads",
             "alpha", "lambda-res", "smooth-l1-beta", "epochs", "batch", "lr", "weight-decay", "anchors"],
    "score": ["data", "checkpoint", "out", "mode", "anchors"],
    "analyze": ["data", "checkpoint", "out", "fold", "seed", "mode", "anchors"],
    "fdcheck": ["seed", "mode", "d", "queries", "heads", "alpha", "lambda-res", "smooth-l1-beta", "corrupt"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpcvqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in _COMMAND_FLAGS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value config file")
        for flag in flags:
            p.add_argument(f"--{flag}", default=argparse.SUPPRESS, **_FLAGS[flag])
    return parser


class UsageError(InvalidInputError):
    pass


def _resolve(ns: argparse.Namespace, base: Optional[RunConfig] = None) -> tuple[RunConfig, set]:
    values = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    try:
        file_values = load_config_file(ns.config) if getattr(ns, "config", None) else {}
        cfg = merge(file_values, values, base)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc
    return cfg, set(values) | set(file_values)


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if getattr(cfg, name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _write_or_print(text: str, path: Optional[str], out) -> None:
    if path:
        Path(path).write_text(text)
    else:
        out.write(text)


def _check_model_flags(cfg: RunConfig, explicit: set) -> None:
    if cfg.checkpoint is None and cfg.variant is not VariantMode.BASE_ONLY:
        hint = "" if "mode" in explicit else " (or pass --mode base_only)"
        raise UsageError(f"mode {cfg.variant.value} needs --checkpoint{hint}")


def _load_model(cfg: RunConfig, explicit: set, container) -> tuple[Optional[calibnet.CalibParams], VariantMode]:
    """Parameters and mode for scoring commands; dimension checks run before any compute."""
    ckpt = read_checkpoint(cfg.checkpoint) if cfg.checkpoint else None
    if ckpt is not None:
        ckpt.check_compatible(container.header)
    mode = cfg.variant if "mode" in explicit or ckpt is None else ckpt.mode
    return (ckpt.params if ckpt else None), mode


# -- commands -----------------------------------------------------------------


def cmd_gen(cfg: RunConfig, explicit: set, out) -> int:
    _require(cfg, "out")
    syn = datastore.SyntheticConfig(record_count=cfg.records, noise_sigma=cfg.noise, seed=cfg.seed)
    container = datastore.generate_synthetic(syn)
    datastore.write_container(cfg.out, container.header, container.records)
    h = container.header
    out.write("path,records,k,d_m,d_a,seed\n")
    out.write(f"{cfg.out},{len(container)},{h.k},{h.d_m},{h.d_a},{cfg.seed}\n")
    return EXIT_OK


def cmd_inspect(cfg: RunConfig, explicit: set, out) -> int:
    _require(cfg, "data")
    c = datastore.read_container(cfg.data)
    h = c.header
    labeled = len(c.labeled_ids)
    out.write("records,labeled,k,d_m,d_a,mos_lo,mos_hi,version\n")
    out.write(f"{len(c)},{labeled},{h.k},{h.d_m},{h.d_a},{h.mos_scale_lo},{h.mos_scale_hi},{h.version}\n")
    return EXIT_OK


def cmd_train(cfg: RunConfig, explicit: set, out) -> int:
    target = cfg.checkpoint or cfg.out
    if target is None:
        raise UsageError("--checkpoint (output path) is required")
    _require(cfg, "data")
    mode = cfg.variant
    if mode is VariantMode.BASE_ONLY:
        raise UsageError("mode base_only has no trainable parameters: nothing to train")
    container = datastore.read_container(cfg.data)
    h = container.header
    plan = evaluation.make_folds(container.labeled_ids, cfg.seed)
    fold = plan[cfg.fold]
    init = calibnet.init_params(
        cfg.d, h.d_m, h.d_a, cfg.queries, cfg.alpha, cfg.heads,
        rng=datastore.rng_for(cfg.seed, f"init/fold{cfg.fold}"),
    )
    with ExitStack() as stack:
        stream = out
        if cfg.log_file:
            logf = stack.enter_context(open(cfg.log_file, "a"))
            stream = _Tee(out, logf)
        result = training.train(
            container, fold.train_ids, fold.val_ids, init, cfg.train_config(), mode,
            cfg.verbalizers(h.k), log_stream=stream,
        )
    write_checkpoint(target, Checkpoint(result.params, mode, h.k, result.best_step, result.val_srcc))
    out.write(f"# best_epoch={result.best_epoch} step={result.best_step} "
              f"val_srcc={result.val_srcc:.6f} checkpoint={target}\n")
    return EXIT_OK


class _Tee:
    def __init__(self, *streams):
        self.streams = streams

    def write(self, text):
        for s in self.streams:
            s.write(text)

    def flush(self):
        for s in self.streams:
            s.flush()


def cmd_eval(cfg: RunConfig, explicit: set, out) -> int:
    _require(cfg, "data")
    if cfg.protocol and cfg.checkpoint:
        raise UsageError("--protocol trains a fresh model per fold; drop --checkpoint")
    if not cfg.protocol:
        _check_model_flags(cfg, explicit)
    container = datastore.read_container(cfg.data)
    vset = cfg.verbalizers(container.header.k)
    if cfg.protocol:
        result = evaluation.run_protocol(
            container, cfg.train_config(), cfg.variant, cfg.d, cfg.queries, cfg.alpha, cfg.heads, vset
        )
        out.write(result.to_tsv())
        return EXIT_OK
    params, mode = _load_model(cfg, explicit, container)
    fold = evaluation.make_folds(container.labeled_ids, cfg.seed)[cfg.fold]
    report = evaluation.evaluate(params, container, fold.test_ids, mode, vset)
    if cfg.out:
        Path(cfg.out).write_text(report.to_csv())
    out.write("mode,fold,n,srcc,plcc,mse\n")
    out.write(f"{mode.value},{cfg.fold},{report.n},{report.srcc:.6f},{report.plcc:.6f},{report.mse:.8f}\n")
    return EXIT_OK


def cmd_score(cfg: RunConfig, explicit: set, out) -> int:
    _require(cfg, "data")
    _check_model_flags(cfg, explicit)
    container = datastore.read_container(cfg.data)
    params, mode = _load_model(cfg, explicit, container)
    vset = cfg.verbalizers(container.header.k)
    lines = ["video_id,q_b,u_b,delta,y_hat,y"]
    for rec in container.records:
        pred = calibnet.predict(rec, judge(rec, vset), params, mode)
        y = repr(container.target(rec.video_id)) if rec.labeled else ""
        lines.append(f"{rec.video_id},{pred.q_b!r},{pred.u_b!r},{pred.delta!r},{pred.y_hat!r},{y}")
    _write_or_print("\n".join(lines) + "\n", cfg.out, out)
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, explicit: set, out) -> int:
    _require(cfg, "data")
    _check_model_flags(cfg, explicit)
    container = datastore.read_container(cfg.data)
    params, mode = _load_model(cfg, explicit, container)
    if "fold" in explicit:
        ids = evaluation.make_folds(container.labeled_ids, cfg.seed)[cfg.fold].test_ids
    else:
        ids = container.labeled_ids
    diag = evaluation.analyze(params, container, ids, mode, cfg.verbalizers(container.header.k))
    summary = (
        "n,residual_slope,central_mass\n"
        f"{len(diag.rows)},{diag.residual_slope:.6f},{diag.central_mass():.6f}\n"
    )
    if cfg.out:
        prefix = cfg.out
        Path(f"{prefix}_samples.csv").write_text(diag.samples_csv())
        Path(f"{prefix}_histogram.csv").write_text(diag.histogram_csv())
        Path(f"{prefix}_deciles.csv").write_text(diag.deciles_csv())
        out.write(summary)
    else:
        out.write("\n".join([summary, diag.samples_csv(), diag.histogram_csv(), diag.deciles_csv()]))
    return EXIT_OK


FD_TOLERANCE = 1e-4


def fd_problem(seed: int, d: int, m: int, heads: int = 1, alpha: float = 0.2,
               n: int = 3, n_a: int = 2, d_m: int = 3, d_a: int = 2, k: int = 5):
    """Random float64 parameters, record and label for a gradient check."""
    rng = datastore.rng_for(seed, f"fdcheck/{d}/{m}/{n}/{n_a}")
    params = calibnet.random_params(d, d_m, d_a, m, alpha, heads, rng=rng)
    record = PerceptionRecord(
        "fd", rng.normal(size=k), rng.normal(size=(n, d_m)), rng.normal(size=(n_a, d_a))
    )
    return params, record, float(rng.uniform())


def cmd_fdcheck(cfg: RunConfig, explicit: set, out) -> int:
    params, record, label = fd_problem(cfg.seed, cfg.d, cfg.queries, cfg.heads, cfg.alpha)
    modes = [cfg.variant] if "mode" in explicit else list(VariantMode)
    tcfg = cfg.train_config()
    out.write("mode\ttensor\tindex\tanalytic\tnumeric\trel_error\n")
    worst = 0.0
    for mode in modes:
        report = training.fd_check(params, record, label, tcfg, 1e-5, mode, corrupt=cfg.corrupt)
        for name, e in report.worst.items():
            idx = ",".join(str(i) for i in e.index)
            out.write(f"{mode.value}\t{name}\t{idx}\t{e.analytic:.6e}\t{e.numeric:.6e}\t{e.rel_error:.3e}\n")
        worst = max(worst, report.max_rel_error)
    status = "ok" if worst <= FD_TOLERANCE else "FAIL"
    out.write(f"# max_rel_error={worst:.3e} tolerance={FD_TOLERANCE:g} {status}\n")
    return EXIT_OK if worst <= FD_TOLERANCE else EXIT_FAIL


COMMANDS = {
    "gen": cmd_gen,
    "inspect": cmd_inspect,
    "train": cmd_train,
    "eval": cmd_eval,
    "score": cmd_score,
    "analyze": cmd_analyze,
    "fdcheck": cmd_fdcheck,
}

_COMMAND_BASE = {"fdcheck": RunConfig(d=8, queries=2)}


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = sys.stdout if out is None else out
    level = os.environ.get("DPC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg, explicit = _resolve(args, _COMMAND_BASE.get(args.command))
        return COMMANDS[args.command](cfg, explicit, out)
    except UsageError as exc:
        print(f"dpcvqa {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DPCError, OSError) as exc:
        print(f"dpcvqa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
