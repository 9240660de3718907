"""``mgdn`` command line: synth, train, fuse, eval, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path


from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError
from .data import (RasterFormatError, generate, load_dataset, read_manifest, read_raster,
                   write_manifest, write_raster, write_sample)
from .gradsuite import block_checks, format_table
from .metrics import MetricReport, evaluate_pair
from .model import mgdn_forward
from .runconfig import ABLATIONS, RunConfig, load_run_config
from .tensor import ShapeError, no_grad
from .train import NonFiniteLoss, TrainState, train_step
from .viz import kernel_grid, stage_masks

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def worker_count() -> int:
    raw = os.environ.get("MGDN_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MGDN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"MGDN_THREADS must be >= 1, got {n}")
    return n


def pmap(fn, items):
    """Ordered map over a thread pool capped by MGDN_THREADS."""
    n = worker_count()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _overrides(args) -> dict:
    out = {}
    for key in ("seed", "steps", "task", "out", "count"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    if getattr(args, "data", None) is not None:
        out["data"] = str(args.data)
    for name in getattr(args, "ablate", None) or []:
        out[ABLATIONS[name]] = True
    return out


def run_config(args) -> RunConfig:
    return load_run_config(args.config, _overrides(args))


def echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())


# ------------------------------------------------------------------ synth


def cmd_synth(args) -> int:
    cfg = run_config(args)
    out = Path(cfg.run.out)
    echo_config(cfg, out)
    task, seed, size, kw = cfg.model.task, cfg.run.seed, cfg.run.size, cfg.synth_kwargs()

    def make(i):
        return write_sample(generate(task, seed, i, size=size, **kw), out, f"{task}_{i:05d}")

    records = pmap(make, range(cfg.run.count))
    write_manifest(records, out / "manifest.jsonl")
    print(f"wrote {len(records)} {task} samples to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ train


LOG_NAME = "loss_log.tsv"


def log_columns(cfg: RunConfig) -> list[str]:
    cols = ["step", "total", "l1", "mi"]
    if cfg.model.arity == 3:
        cols += ["mi_under", "mi_over"]
    return cols


def _format_row(cols, report) -> str:
    return "\t".join(str(report["step"]) if c == "step" else repr(report[c]) for c in cols) + "\n"


def _trim_log(path: Path, step: int, header: str) -> None:
    """Drop log rows after ``step`` so a resumed run appends a clean continuation."""
    if not path.exists():
        path.write_text(header)
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = [header] + [ln for ln in lines[1:] if int(ln.split("\t", 1)[0]) <= step]
    path.write_text("".join(kept))


def run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.run.out) / f"{cfg.model.task}-{cfg.variant}-s{cfg.run.seed}"


def cmd_train(args) -> int:
    cfg = run_config(args)
    if not cfg.run.data:
        raise UsageError("train needs a dataset manifest (--data or data=)")
    manifest = Path(cfg.run.data)
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    rdir = run_dir(cfg)
    echo_config(cfg, rdir)
    samples = load_dataset(manifest)
    if cfg.run.steps > 0 and not samples:
        raise UsageError(f"manifest {manifest} has no samples")
    for s in samples:
        if len(s.inputs) != cfg.model.arity:
            raise UsageError(f"sample has {len(s.inputs)} inputs, model arity is {cfg.model.arity}")

    if args.resume:
        state = load_checkpoint(args.resume, expect_config=cfg.model)
    else:
        state = TrainState.fresh(cfg.model, cfg.optim, cfg.run.seed)

    cols = log_columns(cfg)
    log_path = rdir / LOG_NAME
    header = "\t".join(cols) + "\n"
    if args.resume:
        _trim_log(log_path, state.step, header)
    else:
        log_path.write_text(header)
        save_checkpoint(rdir / "init.ckpt", state)

    every = cfg.run.checkpoint_every
    try:
        with open(log_path, "a") as log:
            while state.step < cfg.run.steps:
                idx = int(state.rng.integers(len(samples)))
                try:
                    report = train_step(state, samples[idx])
                except NonFiniteLoss as exc:
                    save_checkpoint(rdir / "diagnostic.ckpt", state)
                    print(f"error: {exc}; diagnostic checkpoint written", file=sys.stderr)
                    return EXIT_RUNTIME
                log.write(_format_row(cols, report))
                log.flush()
                if state.step % every == 0:
                    save_checkpoint(rdir / f"step{state.step:07d}.ckpt", state)
    except KeyboardInterrupt:
        save_checkpoint(rdir / "final.ckpt", state)
        print(f"interrupted at step {state.step}; checkpoint written to {rdir}", file=sys.stderr)
        return EXIT_RUNTIME
    if cfg.run.steps > 0:
        save_checkpoint(rdir / "final.ckpt", state)
    print(f"trained to step {state.step}; run directory {rdir}")
    return EXIT_OK


# ------------------------------------------------------------------- fuse


def _raster_ext(task: str) -> str:
    return ".png" if task in ("mff", "mef") else ".mgdr"


def cmd_fuse(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    state = load_checkpoint(ckpt)
    cfg = state.config
    if len(args.inputs) != cfg.arity:
        raise UsageError(f"checkpoint expects {cfg.arity} inputs, got {len(args.inputs)}")
    for p in args.inputs:
        if not Path(p).exists():
            raise FileNotFoundError(f"input not found: {p}")
    inputs = [read_raster(p) for p in args.inputs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with no_grad():
        io, records = mgdn_forward(inputs, state.params, cfg)
    write_raster(out / f"fused{_raster_ext(cfg.task)}", io.data)
    if args.dump_kernels:
        for n, rec in enumerate(records):
            for i, kv in enumerate(rec.kv):
                write_raster(out / f"kernels_stage{n}_stream{i}.png", kernel_grid(kv))
                write_raster(out / f"kv_stage{n}_stream{i}.mgdr", kv.values.data)
    if args.dump_masks:
        for n, masks in enumerate(stage_masks(records, state.params)):
            names = [""] if len(masks) == 1 else ["_under", "_over"]
            for suffix, gm in zip(names, masks):
                write_raster(out / f"mask_stage{n}{suffix}.png", gm)
    print(f"fused output written to {out}")
    return EXIT_OK


# ------------------------------------------------------------------- eval


def evaluate_manifest(state: TrainState, manifest) -> MetricReport:
    records = read_manifest(manifest)
    root = Path(manifest).resolve().parent
    cfg = state.config

    def one(rec):
        inputs = [read_raster(root / p) for p in rec["inputs"]]
        gt = read_raster(root / rec["gt"])
        with no_grad():
            io, _ = mgdn_forward(inputs, state.params, cfg)
        return rec["id"], evaluate_pair(io.data, gt, cfg.task, cfg.mu)

    report = MetricReport()
    for sid, values in pmap(one, records):
        report.add(sid, values)
    return report


def cmd_eval(args) -> int:
    for p in (args.checkpoint, args.data):
        if not Path(p).exists():
            raise FileNotFoundError(f"not found: {p}")
    state = load_checkpoint(args.checkpoint)
    report = evaluate_manifest(state, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if report.samples:
        (out / "metrics.jsonl").write_text(report.to_jsonl())
        table = report.to_table()
    else:
        (out / "metrics.jsonl").write_text("")
        table = "no samples\n"
    (out / "metrics.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


# -------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    cfg = run_config(args)
    out = Path(cfg.run.out)
    echo_config(cfg, out)
    results = block_checks(seed=cfg.run.seed)
    table = format_table(results)
    (out / "gradcheck.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mgdn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, task=True):
        p.add_argument("--config", type=Path, help="key=value run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if task:
            p.add_argument("--task", choices=["mef", "mff", "hdr", "gdsr"])

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--count", type=int)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    common(p)
    p.add_argument("--data", type=Path, help="dataset manifest")
    p.add_argument("--steps", type=int)
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("fuse", help="fuse input rasters with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", default="fused")
    p.add_argument("--dump-kernels", action="store_true")
    p.add_argument("--dump-masks", action="store_true")
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", default="eval")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block")
    common(p, task=False)
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, RasterFormatError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
