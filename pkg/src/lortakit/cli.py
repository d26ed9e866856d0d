"""
Command line entry point: ``lortakit <command> [options]``.

Every command except ``count`` writes its outputs plus a flat ``key=value``
manifest (``<command>.manifest``) into ``--out``. The manifest records the
resolved configuration and the exact argument list; ``lortakit rerun
<manifest>`` replays it. Exit codes: 0 ok, 1 check failed, 2 usage or
invalid input.
"""
from __future__ import annotations

import argparse
import csv
import shlex
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adapters import (
    AdapterSpec,
    Method,
    ModelConfig,
    count_params,
    full_update,
    init_adapter,
    layer_update,
    materialize_all,
    materialize_update,
    matched_rank_savings,
    random_adapter,
    savings_breakdown,
)
from .errors import CheckpointError, ConfigError, NonFiniteError, ShapeError
from .io_bench import BENCH_CONFIG

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

DESK_DIMS = {"d": 64, "heads": 4, "layers": 2, "matrices": 2, "seq_len": 16}
BENCH_DIMS = dict(DESK_DIMS, d=BENCH_CONFIG.d, heads=BENCH_CONFIG.H, layers=BENCH_CONFIG.L, matrices=BENCH_CONFIG.M)
# small enough that central differences resolve every gradient entry to < 1e-5
GRADCHECK_DIMS = {"d": 8, "heads": 2, "layers": 2, "matrices": 2, "seq_len": 3}
PRESETS = {
    "desk": {"d": 64, "heads": 4, "layers": 2},
    "llama2-7b": {"d": 4096, "heads": 32, "layers": 32},
}


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class Run:
    """Collects outputs and manifest entries for one command."""

    def __init__(self, command: str, args: argparse.Namespace, argv: list[str]):
        self.command = command
        self.out = Path(args.out) if getattr(args, "out", None) else None
        self.entries: dict[str, str] = {"command": command, "version": __version__, "argv": shlex.join(argv)}
        self.record_args(args)
        self.outputs: list[str] = []

    def record_args(self, args: argparse.Namespace) -> None:
        """Store every argument, including defaults resolved while running."""
        for key, value in sorted(vars(args).items()):
            if key not in ("func", "corrupt_gradient"):
                self.entries[f"arg.{key}"] = _fmt(value)

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        self.outputs.append(str(p))
        return p

    def record(self, **entries) -> None:
        self.entries.update({k: _fmt(v) for k, v in entries.items()})

    def write_manifest(self, status: str, error: str | None = None) -> None:
        if self.out is None:
            return
        self.out.mkdir(parents=True, exist_ok=True)
        entries = dict(self.entries, status=status, outputs=",".join(self.outputs))
        if error:
            entries["error"] = error.replace("\n", " ")
        with open(self.out / f"{self.command}.manifest", "w") as fh:
            for k, v in entries.items():
                fh.write(f"{k}={v}\n")


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, Method):
        return value.value
    return str(value)


def read_manifest(path) -> dict[str, str]:
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                key, _, value = line.partition("=")
                entries[key] = value
    return entries


# ---------------------------------------------------------------------------
# argument helpers

def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.replace("x", ",").split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config(args, defaults=DESK_DIMS, allow_preset=False) -> ModelConfig:
    dims = dict(defaults)
    if args.preset:
        if not allow_preset and args.preset != "desk":
            raise UsageError(f"--preset {args.preset} is only available for counting")
        dims.update(PRESETS[args.preset])
    for key in ("d", "heads", "layers", "matrices", "seq_len"):
        value = getattr(args, key, None)
        if value is not None:
            dims[key] = value
    cfg = ModelConfig(d=dims["d"], H=dims["heads"], L=dims["layers"], M=dims["matrices"], N=dims["seq_len"])
    args.d, args.heads, args.layers, args.matrices, args.seq_len = cfg.d, cfg.H, cfg.L, cfg.M, cfg.N
    return cfg


def _spec(args, method=None, rank=None) -> AdapterSpec:
    return AdapterSpec(
        method=method or args.method,
        rank=args.rank if rank is None else rank,
        alpha=args.alpha,
        nola_k=args.nola_k,
        loretta_dims=args.loretta_dims,
        seed=args.seed,
    )


def _add_dims(p, defaults=DESK_DIMS):
    g = p.add_argument_group("model dimensions")
    g.add_argument("--preset", choices=sorted(PRESETS), help="named dimension set (llama2-7b: counting only)")
    g.add_argument("--d", type=int, help=f"model width (default {defaults['d']})")
    g.add_argument("--heads", type=int, help=f"attention heads H (default {defaults['heads']})")
    g.add_argument("--layers", type=int, help=f"layers L (default {defaults['layers']})")
    g.add_argument("--matrices", type=int, help="fine-tuned matrix types M: 1=Q 2=QV 3=QKV 4=QKVP (default 2)")
    g.add_argument("--seq-len", type=int, help=f"sequence length N (default {defaults['seq_len']})")


def _add_adapter(p, rank=4, method="lorta", multi=False):
    g = p.add_argument_group("adapter")
    if multi:
        g.add_argument("--method", action="append", type=Method.parse, help="adapter method (repeatable)")
    else:
        g.add_argument("--method", type=Method.parse, default=Method.parse(method), help="adapter method")
    g.add_argument("--rank", type=int, default=rank,
                   help="adapter rank r" + (f" (default {rank})" if rank else " (default 4; 1 for the savings table)"))
    g.add_argument("--alpha", type=float, default=1.0, help="update scale numerator (scale = alpha/r)")
    g.add_argument("--nola-k", type=int, default=4, help="NOLA coefficients per layer and side")
    g.add_argument("--loretta-dims", type=_int_list, help="LoReTTA tensor dims k_1,..,k_D with prod = d*r")
    g.add_argument("--seed", type=int, default=0, help="seed for all random draws")


def _add_out(p, default="lortakit-out"):
    p.add_argument("--out", default=default, help=f"output directory (default {default})")


def _write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def _print_table(rows) -> None:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip())


# ---------------------------------------------------------------------------
# commands

def cmd_count(args, run: Run) -> int:
    cfg = _config(args, allow_preset=True)
    methods = args.method or list(Method)
    rank = args.rank or 4
    rows = [["method", "r", "params", "formula", "savings_vs_lora"]]
    for method in methods:
        rep = count_params(_spec(args, method, rank), cfg)
        rows.append([rep.method.value, rep.r, rep.trainable_count, rep.formula_text, f"{100 * rep.savings_vs_lora:.1f}%"])
    _print_table(rows)
    if args.matched_tensor_rank:
        print()
        table = [["modes shared", "tensor", "tensors", "savings"]]
        for row in savings_breakdown(cfg, args.rank or 1):
            table.append([row.modes, row.tensor_dims, row.n_tensors, f"{100 * row.savings:.1f}%"])
        _print_table(table)
        matched = matched_rank_savings(cfg)
        print(f"\nmatched tensor rank (LoRA r=1 on QKVP vs LoRTA r={4 * cfg.L}): savings {100 * matched:.1f}%")
        run.record(matched_savings=f"{matched:.6f}")
    if run.out is not None:
        _write_rows(run.path("count.csv"), rows)
    return EXIT_OK


def cmd_gradcheck(args, run: Run) -> int:
    from .training import check_adapter_gradients

    cfg = _config(args, defaults=GRADCHECK_DIMS)
    report = check_adapter_gradients(_spec(args), cfg, seed=args.seed, batch_size=args.batch,
                                     h=args.step, corrupt=args.corrupt_gradient)
    rows = [["factor", "max_rel_error"]] + [[k, f"{v:.3e}"] for k, v in report.max_rel_error.items()]
    _print_table(rows)
    _write_rows(run.path("gradcheck.csv"), rows)
    ok = report.passed(args.tol)
    run.record(max_rel_error=f"{report.worst:.6e}", step=report.step, passed=ok)
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {report.worst:.3e} (tolerance {args.tol:g})")
    if not ok:
        raise CheckFailed(f"gradient check failed: max relative error {report.worst:.3e}")
    return EXIT_OK


def cmd_train(args, run: Run) -> int:
    from . import io_bench
    from .training import LossSpec, TrainingDiverged, make_batch, make_teacher, train, write_curve
    from .transformer import random_weights

    cfg = _config(args)
    spec = _spec(args)
    kind = args.task.replace("-", "_")
    loss_spec = LossSpec(kind, seed=args.seed, batch_size=args.batch, N=cfg.N, steps=args.steps)
    w = random_weights(cfg, args.seed)
    teacher = None
    if kind == "teacher_match":
        teacher, _ = make_teacher(w, spec, seed=args.seed + 1000, relative_norm=args.teacher_norm)
    batch = make_batch(w, loss_spec, teacher)
    st = init_adapter(spec, cfg)
    clip = args.clip_norm if args.clip_norm > 0 else None
    try:
        st, curve = train(w, st, loss_spec, batch, lr=args.lr, momentum=args.momentum, clip_norm=clip)
    except TrainingDiverged as exc:
        write_curve(run.path("loss.csv"), exc.curve)
        raise CheckFailed(f"training diverged after {len(exc.curve) - 1} steps: {exc}") from exc
    write_curve(run.path("loss.csv"), curve)
    io_bench.save(st, run.path("adapter.lrta"))
    ratio = curve[-1] / curve[0] if curve[0] > 0 else 0.0
    run.record(initial_loss=repr(curve[0]), final_loss=repr(curve[-1]), final_over_initial=repr(ratio))
    print(f"initial loss {curve[0]:.6e}  final loss {curve[-1]:.6e}  ratio {ratio:.3e}  ({args.steps} steps)")
    return EXIT_OK


def _load_matrices(directory: Path) -> list[np.ndarray]:
    files = sorted(directory.glob("*.npy"))
    if not files:
        raise UsageError(f"no .npy files in {directory}")
    mats = []
    for f in files:
        a = np.load(f)
        if a.ndim == 2:
            mats.append(a)
        elif a.ndim >= 3:
            mats.extend(a.reshape((-1,) + a.shape[-2:]))
        else:
            raise ShapeError(f"{f.name}: expected a matrix or a stack of matrices, got shape {a.shape}")
    return mats


def cmd_decompose(args, run: Run) -> int:
    from . import io_bench
    from .decompose import decompose_adapter

    if (args.input is None) == (args.checkpoint is None):
        raise UsageError("give exactly one of --input DIR or --checkpoint FILE")
    if args.input is not None:
        mats = _load_matrices(Path(args.input))
    else:
        st = io_bench.load(args.checkpoint)
        mats = list((st.spec.scale * full_update(st)).reshape(-1, st.config.d, st.config.d))
    stats = decompose_adapter(mats, args.heads, args.rank, restarts=args.restarts, seed=args.seed,
                              max_iters=args.max_iters, tol=args.tol)
    table = stats.table()
    _print_table(table)
    stats.write(run.path("decompose.csv"))
    run.record(matrices=len(mats), skipped=len(stats.skipped),
               mean_relative_error=repr(stats.relative_error["mean"]))
    return EXIT_OK


def cmd_bench(args, run: Run) -> int:
    from . import io_bench

    cfg = _config(args, defaults=BENCH_DIMS)
    methods = args.method or [Method.LORTA, Method.LOTR, Method.LORA]
    if args.reps < 20:
        raise UsageError("--reps must be at least 20")
    if min(args.n) < 1 or min(args.rank) < 1:
        raise UsageError("--n and --rank values must be >= 1")
    rows = []
    for r in args.rank:
        for n in args.n:
            rows.extend(io_bench.bench_methods(methods, r, n, args.reps, cfg, seed=args.seed))
    with open(run.path("bench.csv"), "w", newline="") as fh:
        io_bench.write_csv(rows, fh)
    io_bench.write_csv(rows, sys.stdout)
    return EXIT_OK


def cmd_materialize(args, run: Run) -> int:
    from . import io_bench

    cfg = _config(args)
    if args.checkpoint:
        st = io_bench.load(args.checkpoint)
    else:
        spec = _spec(args)
        st = init_adapter(spec, cfg) if args.init == "zero" else random_adapter(spec, cfg, seed=args.seed)
    cfg = st.config
    tensor = materialize_all(st)
    picks = (args.matrix_index, args.layer, args.head)
    if any(p is not None for p in picks):
        if any(p is None for p in picks):
            raise UsageError("--matrix-index, --layer and --head go together")
        m, l, h = picks
        block = materialize_update(st, m, l, h)
        np.savetxt(run.path("update.csv"), block, delimiter=",", fmt="%.17g")
        gap = float(np.abs(block - tensor[:, :, h, l, m]).max())
        print(f"update m={m} l={l} h={h}: {block.shape[0]}x{block.shape[1]}, Frobenius norm {np.linalg.norm(block):.6e}")
    else:
        np.save(run.path("update.npy"), tensor)
        gap = max(
            float(np.abs(layer_update(st, m, l) - st.spec.scale * full_update(st)[m, l]).max())
            for m in range(cfg.M) for l in range(cfg.L)
        )
        print(f"update tensor {tensor.shape} (d, d_H, H, L, M), Frobenius norm {np.linalg.norm(tensor):.6e}")
    scale = max(float(np.abs(tensor).max()), 1e-300)
    run.record(route_gap=repr(gap))
    print(f"per-matrix route vs full contraction: max abs difference {gap:.3e}")
    if gap > 1e-10 * scale:
        raise CheckFailed(f"materialization routes disagree by {gap:.3e}")
    return EXIT_OK


def cmd_rerun(args, run: Run) -> int:
    entries = read_manifest(args.manifest)
    if "argv" not in entries:
        raise UsageError(f"{args.manifest} has no argv entry")
    return main(shlex.split(entries["argv"]))


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lortakit", description="Tensor adapters for attention weights: counts, checks, training, decomposition, benchmarks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count", help="trainable parameter counts")
    _add_dims(p)
    _add_adapter(p, rank=None, multi=True)
    p.add_argument("--matched-tensor-rank", action="store_true",
                   help="also print savings against LoRA at equal total tensor rank")
    _add_out(p, default=None)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference adapter gradients")
    _add_dims(p, GRADCHECK_DIMS)
    _add_adapter(p, rank=2)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-5, help="max relative error to pass")
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    _add_out(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="SGD on adapter factors for a synthetic task")
    _add_dims(p)
    _add_adapter(p, rank=1)
    p.add_argument("--task", choices=["teacher-match", "mse-regression"], default="teacher-match")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--clip-norm", type=float, default=0.5, help="gradient norm cap (0 disables)")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--teacher-norm", type=float, default=0.15,
                   help="teacher update norm relative to the fine-tuned base matrices")
    _add_out(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decompose", help="CP-decompose d x d updates reshaped by heads")
    p.add_argument("--input", help="directory of .npy matrices (or stacks of matrices)")
    p.add_argument("--checkpoint", help="adapter checkpoint whose updates are decomposed")
    p.add_argument("--heads", type=int, default=DESK_DIMS["heads"])
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--tol", type=float, default=1e-14)
    _add_out(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("bench", help="adapter checkpoint load latency")
    _add_dims(p, BENCH_DIMS)
    p.add_argument("--method", action="append", type=Method.parse, help="method (repeatable; default lorta, lotr, lora)")
    p.add_argument("--rank", type=int, nargs="+", default=[4])
    p.add_argument("--n", type=int, nargs="+", default=[1, 10, 100], help="concurrent adapters")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("materialize", help="write adapter weight updates")
    _add_dims(p)
    _add_adapter(p)
    p.add_argument("--checkpoint", help="load the adapter from a checkpoint instead of seeding one")
    p.add_argument("--init", choices=["random", "zero"], default="random")
    p.add_argument("--matrix-index", type=int, help="matrix type index m")
    p.add_argument("--layer", type=int)
    p.add_argument("--head", type=int)
    _add_out(p)
    p.set_defaults(func=cmd_materialize)

    p = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "rerun":
        return cmd_rerun(args, None)
    run = Run(args.command, args, argv)
    try:
        code = args.func(args, run)
    except (UsageError, ConfigError, ShapeError, CheckpointError, OSError) as exc:
        return _fail(run, args, exc, EXIT_USAGE)
    except (CheckFailed, NonFiniteError) as exc:
        return _fail(run, args, exc, EXIT_FAILED)
    run.record_args(args)
    run.write_manifest("ok")
    return code


def _fail(run: Run, args, exc: Exception, code: int) -> int:
    print(f"error: {exc}", file=sys.stderr)
    run.record_args(args)
    try:
        run.write_manifest("failed", str(exc))
    except OSError:
        pass
    return code


if __name__ == "__main__":
    sys.exit(main())
