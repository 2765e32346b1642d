"""Command-line pipeline: gen-model -> gen-calib -> init-mask -> barber -> eval.

Exit codes: 0 ok, 2 usage/input error, 3 data inconsistency, 4 numeric failure.
Every command that writes files also writes ``<primary output>.manifest``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import sys
import time
from pathlib import Path

from . import __version__
from .calib import gen_synthetic, dumps_tokens, load_tokens
from .checkpoint import load_checkpoint, load_masks, model_header, save_checkpoint, save_masks
from .engine import (COUNT_SCOPES, GRANULARITIES, METRICS, BarberConfig, barber_model,
                     model_block_errors)
from .errors import ConsistencyError, InputError, NumericError, ShapeError
from .export import pairs_csv, report_csv, report_table
from .masks import METHODS, NmPattern, init_model_masks, is_nm, mask_sparsity
from .model import perplexity, build_model


class UsageError(InputError):
    pass


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Run:
    """Collects inputs/outputs of one command and writes them plus the manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.start = time.perf_counter()
        self.inputs: dict[str, tuple[str, bytes]] = {}
        self.outputs: list[tuple[str, Path, bytes]] = []

    def read(self, name: str, path) -> bytes:
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise InputError(f"cannot read {name} file {path}: {exc.strerror}") from None
        self.inputs[name] = (str(path), data)
        return data

    def add_output(self, name: str, path, data: bytes | str):
        if isinstance(data, str):
            data = data.encode("utf-8")
        self.outputs.append((name, Path(path), data))

    def commit(self):
        if not self.outputs:
            return
        manifest_path = self.outputs[0][1].with_name(self.outputs[0][1].name + ".manifest")
        targets = [p for _, p, _ in self.outputs] + [manifest_path]
        if not getattr(self.args, "force", False):
            existing = [str(p) for p in targets if p.exists()]
            if existing:
                raise UsageError(f"refusing to overwrite {', '.join(existing)} (use --force)")
        for _, path, data in self.outputs:
            path.write_bytes(data)
        lines = [f"command={self.command}", f"tool_version={__version__}"]
        for key, value in sorted(vars(self.args).items()):
            if key not in ("func",):
                lines.append(f"param.{key}={value}")
        for name, (path, data) in self.inputs.items():
            lines += [f"input.{name}={path}", f"input.{name}.sha256={_sha256(data)}"]
        for name, path, data in self.outputs:
            lines += [f"output.{name}={path}", f"output.{name}.sha256={_sha256(data)}"]
        lines.append(f"wall_clock_seconds={time.perf_counter() - self.start:.6f}")
        manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_model(run: Run, path):
    return load_checkpoint(run.read("model", path))


def _load_calib(run: Run, path, model=None, name="calib"):
    run.read(name, path)
    calib = load_tokens(path)
    if model is not None and calib.vocab_size > model.vocab_size:
        raise InputError(f"calibration vocab {calib.vocab_size} exceeds model vocab {model.vocab_size}")
    return calib


def _load_mask(run: Run, path, model):
    header, masks = load_masks(run.read("mask", path))
    if header != model_header(model):
        raise ShapeError(f"mask header {header} does not match model header {model_header(model)}")
    return masks


def _parse_alpha(text: str):
    if text.lower() == "auto":
        return "auto"
    try:
        value = float(text)
    except ValueError:
        raise UsageError(f"--alpha must be AUTO or a number, got {text!r}") from None
    if not 0 <= value <= 1:
        raise UsageError("--alpha must lie in [0, 1]")
    return value


def _csv_list(text: str, allowed=None, conv=str):
    items = [conv(t) for t in text.split(",") if t]
    if allowed is not None:
        for t in items:
            if t not in allowed:
                raise UsageError(f"{t!r} not in {allowed}")
    return items


# ---------------------------------------------------------------- commands

def cmd_gen_model(args, run: Run):
    if args.heads < 1 or args.d_model % args.heads:
        raise UsageError(f"--heads {args.heads} must divide --d-model {args.d_model}")
    model = build_model(args.seed, args.vocab, args.d_model, args.d_ff, args.heads, args.blocks, args.activation)
    run.add_output("model", args.out, save_checkpoint(model))
    print(f"model: vocab={args.vocab} d_model={args.d_model} d_ff={args.d_ff} heads={args.heads} "
          f"block_pairs={args.blocks} -> {args.out}")


def cmd_gen_calib(args, run: Run):
    calib = gen_synthetic(args.seed, args.n, args.length, args.vocab, args.dist)
    run.add_output("calib", args.out, dumps_tokens(calib))
    print(f"calibration: {args.n} x {args.length} tokens ({args.dist}) -> {args.out}")


def cmd_init_mask(args, run: Run):
    model = _load_model(run, args.model)
    if args.method != "magnitude" and not args.calib:
        raise UsageError(f"--method {args.method} requires --calib")
    seqs = _load_calib(run, args.calib, model).sequences if args.calib else None
    nm = NmPattern.parse(args.nm) if args.nm else None
    masks = init_model_masks(model, args.method, args.sparsity, seqs, nm=nm, scope=args.scope,
                             damping=args.damping)
    for b, m in enumerate(masks):
        for name, arr in m.items():
            s = mask_sparsity({name: arr})
            print(f"block {b} {name:>4}: sparsity {float(s):.4f} ({s.numerator}/{s.denominator})")
    print(f"overall sparsity {float(mask_sparsity(masks)):.4f}")
    run.add_output("mask", args.out, save_masks(model, masks))


def cmd_barber(args, run: Run):
    model = _load_model(run, args.model)
    masks = _load_mask(run, args.mask, model)
    calib = _load_calib(run, args.calib, model)
    nm = NmPattern.parse(args.nm) if args.nm else None
    if nm is not None:
        for b, m in enumerate(masks):
            for name, arr in m.items():
                if not is_nm(arr, nm):
                    raise InputError(f"block {b} layer {name} is not {nm} structured")
    config = BarberConfig(alpha=_parse_alpha(args.alpha), granularity=args.granularity, nm=nm,
                          count_scope=args.count_scope, metric=args.metric)
    rebuilt, reports = barber_model(model, masks, calib.sequences, config)
    if config.auto:
        for r in reports:
            print(f"AUTO block {r.block_id} ({r.kind}): suggested alpha {r.alpha:.6f} "
                  f"({r.n_applied} outliers of {r.n_positive} positive pairs)")
    print(report_table(reports))
    run.add_output("mask", args.out, save_masks(model, rebuilt))
    if args.report_out:
        run.add_output("report", args.report_out, report_csv(reports))
    if args.dist_out:
        run.add_output("distribution", args.dist_out, pairs_csv(reports))


def cmd_eval(args, run: Run):
    model = _load_model(run, args.model)
    masks = _load_mask(run, args.mask, model) if args.mask else None
    calib = _load_calib(run, args.calib, model)
    lines = []
    if args.metric == "block-errors":
        for b, e in enumerate(model_block_errors(model, masks, calib.sequences)):
            lines.append(f"block {b} {model.blocks[b].kind}: {e!r}")
    else:
        lines.append(f"perplexity {perplexity(model, masks, calib.sequences)!r}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        run.add_output("result", args.out, text)


def cmd_sweep(args, run: Run):
    model = _load_model(run, args.model)
    calib = _load_calib(run, args.calib, model)
    held = _load_calib(run, args.eval_calib, model, "eval_calib") if args.eval_calib else calib
    sizes = _csv_list(args.calib_sizes, conv=int) if args.calib_sizes else [len(calib)]
    header = ("method", "granularity", "sparsity", "metric", "calib_size", "e_init", "e_rebuilt",
              "n_applied", "ppl_dense", "ppl_init", "ppl_rebuilt")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    ppl_dense = perplexity(model, None, held.sequences)
    alpha = _parse_alpha(args.alpha)
    for size in sizes:
        seqs = calib.head(size).sequences
        for method in _csv_list(args.methods, METHODS):
            for sparsity in _csv_list(args.sparsities, conv=float):
                init = init_model_masks(model, method, sparsity, seqs)
                ppl_init = perplexity(model, init, held.sequences)
                for gran in _csv_list(args.granularities, GRANULARITIES):
                    for metric in _csv_list(args.metrics, METRICS):
                        cfg = BarberConfig(alpha=alpha, granularity=gran, metric=metric)
                        rebuilt, reps = barber_model(model, init, seqs, cfg)
                        row = (method, gran, sparsity, metric, size,
                               repr(sum(r.e_init for r in reps)), repr(sum(r.e_rebuilt for r in reps)),
                               sum(r.n_applied for r in reps), repr(ppl_dense), repr(ppl_init),
                               repr(perplexity(model, rebuilt, held.sequences)))
                        w.writerow(row)
                        print(",".join(map(str, row)))
    run.add_output("sweep", args.out, buf.getvalue())


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="barber", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        return sp

    sp = command("gen-model", cmd_gen_model, "write a random TBKT1 checkpoint")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--d-model", type=int, default=16)
    sp.add_argument("--d-ff", type=int, default=32)
    sp.add_argument("--heads", type=int, default=2)
    sp.add_argument("--blocks", type=int, default=2, help="number of attention+MLP block pairs")
    sp.add_argument("--vocab", type=int, default=32)
    sp.add_argument("--activation", choices=("silu", "gelu"), default="silu")
    sp.add_argument("--out", required=True)

    sp = command("gen-calib", cmd_gen_calib, "write a synthetic token file")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=8, help="number of sequences")
    sp.add_argument("--length", type=int, default=128)
    sp.add_argument("--vocab", type=int, default=32)
    sp.add_argument("--dist", default="zipf:1.2", help="uniform | zipf[:s]")
    sp.add_argument("--out", required=True)

    sp = command("init-mask", cmd_init_mask, "initial TBMK1 mask from a baseline pruning score")
    sp.add_argument("--model", required=True)
    sp.add_argument("--calib")
    sp.add_argument("--method", choices=METHODS, default="magnitude")
    sp.add_argument("--sparsity", type=float, default=0.5)
    sp.add_argument("--nm", help="N:M pattern, e.g. 2:4")
    sp.add_argument("--scope", choices=("layer", "row"), default="layer", help="magnitude ranking group")
    sp.add_argument("--damping", type=float, default=0.01, help="relative damping for obs")
    sp.add_argument("--out", required=True)

    sp = command("barber", cmd_barber, "rebuild a mask")
    sp.add_argument("--model", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--calib", required=True)
    sp.add_argument("--granularity", choices=GRANULARITIES, default="block")
    sp.add_argument("--alpha", default="AUTO", help="AUTO or a rebuild ratio in [0, 1]")
    sp.add_argument("--nm", help="keep the N:M pattern of the input mask")
    sp.add_argument("--count-scope", choices=COUNT_SCOPES, default="block")
    sp.add_argument("--metric", choices=METRICS, default="weight*grad")
    sp.add_argument("--out", required=True)
    sp.add_argument("--report-out")
    sp.add_argument("--dist-out")

    sp = command("eval", cmd_eval, "per-block errors or perplexity")
    sp.add_argument("--model", required=True)
    sp.add_argument("--mask")
    sp.add_argument("--calib", required=True)
    sp.add_argument("--metric", choices=("block-errors", "perplexity"), default="block-errors")
    sp.add_argument("--out")

    sp = command("sweep", cmd_sweep, "ablation grid over init, granularity, metric, calibration size")
    sp.add_argument("--model", required=True)
    sp.add_argument("--calib", required=True)
    sp.add_argument("--eval-calib", help="held-out tokens for perplexity (default: --calib)")
    sp.add_argument("--methods", default=",".join(METHODS))
    sp.add_argument("--granularities", default=",".join(GRANULARITIES))
    sp.add_argument("--sparsities", default="0.5")
    sp.add_argument("--metrics", default="weight*grad")
    sp.add_argument("--calib-sizes", help="comma list of sequence counts taken from the head of --calib")
    sp.add_argument("--alpha", default="AUTO")
    sp.add_argument("--out", required=True)

    for sp in sub.choices.values():
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
    return p


def _check_outputs_free(args):
    if args.force:
        return
    paths = [getattr(args, k, None) for k in ("out", "report_out", "dist_out")]
    paths = [Path(p) for p in paths if p]
    if paths:
        paths.append(paths[0].with_name(paths[0].name + ".manifest"))
    existing = [str(p) for p in paths if p.exists()]
    if existing:
        raise UsageError(f"refusing to overwrite {', '.join(existing)} (use --force)")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    run = Run(args.command, args)
    try:
        _check_outputs_free(args)
        args.func(args, run)
        run.commit()
    except (ShapeError, ConsistencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
