"""
Low-rank adapter parameterizations for attention-weight updates.

Every method maps its trainable factors (plus, for VeRA and NOLA, frozen
seed-generated factors) to the full set of attention-weight updates

    dW[:, :, h, l, m]  in  R^{d x d_H}

for head ``h``, layer ``l`` and fine-tuned matrix type ``m``. The stacked
5th-order update has shape ``(d, d_H, H, L, M)``; :func:`materialize_all`
returns it scaled by ``alpha / r``.

Two layouts are used internally:

* *head* layout ``(d, d_H, H, L, M)`` -- the LoRTA tensor.
* *full* layout ``(M, L, d, d)`` -- one ``d x d`` matrix per (type, layer)
  whose column block ``[h*d_H, (h+1)*d_H)`` is the update of head ``h``.

Factor shapes per method (``r`` = rank):

=============  ===========================================================
lora           A, B: (M, L, d, r);             dW_ml = A_ml B_ml^T
lorta          A: (d, r), B: (d_H, r), C_H: (H, r), C_L: (L, r), C_M: (M, r)
lotr           A, B: (M, d, r), G: (M, L, r, r); dW_ml = A_m G_ml B_m^T
vera           C_D: (L, r), C_B: (L, d); frozen A, B: (d, r)
nola           coef_A, coef_B: (k, L); frozen basis_A, basis_B: (d, r, k)
fact-tt        U, V: (d, r), S: (M, L, r, r);  dW_ml = U S_ml V^T
fact-tk        U, V: (d, r), P: (M*L, r), G: (r, r, r)
loretta-rep    A_core{i}, B_core{i}: (M, L, r, k_i, r), i < D
=============  ===========================================================

VeRA and NOLA updates carry no matrix-type index, so the same layer update is
applied to every fine-tuned matrix type. FacT-TK row ``m*L + l`` of ``P``
weights the core slices ``G[k]`` (layout ``[k, i, j]``) for type ``m``,
layer ``l``: ``dW_ml = U (sum_k P[mL+l, k] G[k]) V^T``. LoReTTA-rep cores
close into a ring (the trace of the core product), so every core is
``r x k_i x r``; the resulting ``k_1 x ... x k_D`` tensor is reshaped
row-major into the ``d x r`` LoRA factor.
"""
from __future__ import annotations

import dataclasses
import functools
import string
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError

MATRIX_TYPES = ("Q", "K", "V", "P")
#: matrix types that are fine-tuned for each value of M
TARGETS = {1: ("Q",), 2: ("Q", "V"), 3: ("Q", "K", "V"), 4: ("Q", "K", "V", "P")}


class Method(str, Enum):
    LORA = "lora"
    LORTA = "lorta"
    LOTR = "lotr"
    VERA = "vera"
    NOLA = "nola"
    LORETTA = "loretta-rep"
    FACT_TT = "fact-tt"
    FACT_TK = "fact-tk"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"loretta": "loretta-rep", "facttt": "fact-tt", "facttk": "fact-tk"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown method {value!r} (choose from {choices})") from None


@dataclass(frozen=True)
class ModelConfig:
    """Transformer dimensions relevant to adapters and the mini transformer."""

    d: int
    H: int
    L: int
    M: int = 2
    N: int = 16
    mlp_width: int | None = None

    def __post_init__(self):
        for name in ("d", "H", "L", "M", "N"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.H:
            raise ConfigError(f"d={self.d} is not divisible by H={self.H}")
        if self.M > 4:
            raise ConfigError(f"M must be between 1 and 4, got {self.M}")
        if self.mlp_width is None:
            object.__setattr__(self, "mlp_width", 4 * self.d)
        elif self.mlp_width < 1:
            raise ConfigError(f"mlp_width must be >= 1, got {self.mlp_width}")

    @property
    def d_head(self) -> int:
        return self.d // self.H

    @property
    def targets(self) -> tuple[str, ...]:
        return TARGETS[self.M]

    def adapter_dims(self) -> tuple[int, int, int, int]:
        return (self.d, self.H, self.L, self.M)


@dataclass(frozen=True)
class AdapterSpec:
    method: Method
    rank: int
    alpha: float = 1.0
    nola_k: int = 4
    loretta_dims: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        if int(self.rank) != self.rank or self.rank < 1:
            raise ConfigError(f"rank must be an integer >= 1, got {self.rank}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.nola_k < 1:
            raise ConfigError(f"nola_k must be >= 1, got {self.nola_k}")
        if self.loretta_dims is not None:
            object.__setattr__(self, "loretta_dims", tuple(int(k) for k in self.loretta_dims))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def default_loretta_dims(d: int, r: int) -> tuple[int, ...]:
    """Split ``d*r`` into as many factors ``>= max(r, 2)`` as possible."""
    n, dims = d * r, []
    lo = max(r, 2)
    while n > 1:
        k = next((k for k in range(lo, n + 1) if n % k == 0 and (n == k or n // k >= lo)), None)
        if k is None:
            dims[-1:] = [dims[-1] * n] if dims else [n]
            break
        dims.append(k)
        n //= k
    if len(dims) < 2:
        raise ConfigError(f"d*r={d * r} cannot be split into two or more factors >= {r}")
    return tuple(dims)


def resolve_spec(spec: AdapterSpec, cfg: ModelConfig) -> AdapterSpec:
    """Fill in configuration-dependent defaults and validate ``spec`` against ``cfg``."""
    if spec.method is not Method.LORETTA:
        return spec
    dims = spec.loretta_dims or default_loretta_dims(cfg.d, spec.rank)
    if len(dims) < 2:
        raise ConfigError("LoReTTA needs at least two tensor dimensions")
    if int(np.prod(dims)) != cfg.d * spec.rank:
        raise ConfigError(f"LoReTTA dims {dims} must multiply to d*r = {cfg.d * spec.rank}")
    if min(dims) < spec.rank:
        raise ConfigError(f"LoReTTA dims {dims} must all be >= r = {spec.rank}")
    return dataclasses.replace(spec, loretta_dims=tuple(dims))


# ---------------------------------------------------------------------------
# parameter counting (closed forms)

_FORMULAS: dict[Method, str] = {
    Method.LORA: "2*M*L*d*r",
    Method.LORTA: "(d + d/H + H + L + M)*r",
    Method.LOTR: "M*(L*r^2 + 2*d*r)",
    Method.FACT_TT: "M*L*r^2 + 2*d*r",
    Method.FACT_TK: "(2*d + M*L)*r + r^3",
    Method.LORETTA: "2*M*L*r^2*sum(k_i)",
    Method.VERA: "L*(r + d)",
    Method.NOLA: "2*k*L",
}


def _closed_form(spec: AdapterSpec, cfg: ModelConfig) -> int:
    d, H, L, M, r = cfg.d, cfg.H, cfg.L, cfg.M, spec.rank
    method = spec.method
    if method is Method.LORA:
        return 2 * M * L * d * r
    if method is Method.LORTA:
        return (d + d // H + H + L + M) * r
    if method is Method.LOTR:
        return M * (L * r * r + 2 * d * r)
    if method is Method.FACT_TT:
        return M * L * r * r + 2 * d * r
    if method is Method.FACT_TK:
        return (2 * d + M * L) * r + r ** 3
    if method is Method.LORETTA:
        return 2 * M * L * r * r * sum(spec.loretta_dims)
    if method is Method.VERA:
        return L * (r + d)
    if method is Method.NOLA:
        return 2 * spec.nola_k * L
    raise ConfigError(f"no parameter count for {method}")


@dataclass(frozen=True)
class ParamCountReport:
    method: Method
    r: int
    trainable_count: int
    formula_text: str
    savings_vs_lora: float


def count_params(spec: AdapterSpec, cfg: ModelConfig) -> ParamCountReport:
    """Number of trainable parameters of ``spec`` on ``cfg``.

    ``savings_vs_lora`` is ``1 - count / count(LoRA, same rank)``; it goes
    negative when a configuration makes the method larger than LoRA.
    """
    spec = resolve_spec(spec, cfg)
    n = _closed_form(spec, cfg)
    lora = 2 * cfg.M * cfg.L * cfg.d * spec.rank
    return ParamCountReport(spec.method, spec.rank, n, _FORMULAS[spec.method], 1.0 - n / lora)


@dataclass(frozen=True)
class SavingsRow:
    modes: str
    tensor_dims: str
    n_tensors: str
    savings: float


def savings_breakdown(cfg: ModelConfig, r: int) -> list[SavingsRow]:
    """Savings against LoRA rank ``r`` as modes are shared, one row per granularity.

    Every row spends a total CP rank of ``4L`` spread over its update tensors
    (rank 1 per tensor for the heads-only row, rank ``4L`` for the single
    5th-order tensor), against LoRA rank ``r`` on all ``4L`` matrices. At
    ``r = 1`` the tensor ranks match.
    """
    d, H, L = cfg.d, cfg.H, cfg.L
    per_head = d * (1 + 1 / H) + H
    denom = 2 * d * r
    return [
        SavingsRow("none (LoRA)", "d x d", "4L", 0.0),
        SavingsRow("heads", "d x d/H x H", "4L", 1 - per_head / denom),
        SavingsRow("heads, QKVP", "d x d/H x H x 4", "L", 1 - (per_head + 4) / denom),
        SavingsRow("heads, QKVP, layers", "d x d/H x H x 4 x L", "1", 1 - (per_head + 4 + L) / denom),
    ]


def matched_rank_savings(cfg: ModelConfig, r: int = 1) -> float:
    """Savings of LoRTA over LoRA at equal total tensor rank.

    LoRA rank ``r`` on all four attention matrices of every layer has total
    tensor rank ``r' = 4 L r``; LoRTA is counted at rank ``r'`` with M = 4.
    """
    full = dataclasses.replace(cfg, M=4)
    lora = count_params(AdapterSpec(Method.LORA, r), full).trainable_count
    lorta = count_params(AdapterSpec(Method.LORTA, 4 * cfg.L * r), full).trainable_count
    return 1.0 - lorta / lora


# ---------------------------------------------------------------------------
# layouts

def heads_to_full(t: np.ndarray) -> np.ndarray:
    """``(d, d_H, H, L, M)`` -> ``(M, L, d, d)`` with heads as column blocks."""
    d, dh, H, L, M = t.shape
    return t.transpose(4, 3, 0, 2, 1).reshape(M, L, d, H * dh)


def full_to_heads(f: np.ndarray, H: int) -> np.ndarray:
    """Inverse of :func:`heads_to_full`."""
    M, L, d, d2 = f.shape
    return f.reshape(M, L, d, H, d2 // H).transpose(2, 4, 3, 1, 0)


def matrix_to_head_tensor(w: np.ndarray, H: int) -> np.ndarray:
    """Reshape a ``d x d`` update into ``d x d/H x H`` (column block h -> slice h)."""
    d, d2 = w.shape
    if d2 % H:
        raise ShapeError(f"{d2} columns are not divisible into {H} heads")
    return w.reshape(d, H, d2 // H).transpose(0, 2, 1)


def head_tensor_to_matrix(t: np.ndarray) -> np.ndarray:
    d, dh, H = t.shape
    return t.transpose(0, 2, 1).reshape(d, H * dh)


# ---------------------------------------------------------------------------
# parameterizations

@functools.lru_cache(maxsize=256)
def _path(expr: str, shapes: tuple) -> list:
    dummies = [np.empty(shape) for shape in shapes]
    return np.einsum_path(expr, *dummies, optimize="greedy")[0]


def _contract(expr: str, *operands: np.ndarray) -> np.ndarray:
    """``np.einsum`` with the contraction order cached per expression and shapes."""
    return np.einsum(expr, *operands, optimize=_path(expr, tuple(o.shape for o in operands)))


def _einsum_vjp(expr: str, operands: Sequence[np.ndarray], grad: np.ndarray, k: int) -> np.ndarray:
    """Gradient of ``sum(grad * einsum(expr, *operands))`` w.r.t. ``operands[k]``."""
    inputs, out = expr.split("->")
    subs = inputs.split(",")
    others = [s for j, s in enumerate(subs) if j != k]
    ops = [o for j, o in enumerate(operands) if j != k]
    return _contract(",".join([out] + others) + "->" + subs[k], grad, *ops)


@dataclass
class _Param:
    """One adapter family: factor shapes, the contraction, and per-matrix slices."""

    trainable: Callable[[AdapterSpec, ModelConfig], dict[str, tuple[int, ...]]]
    zero_init: str
    frozen: Callable[[AdapterSpec, ModelConfig], dict[str, tuple[int, ...]]] = lambda s, c: {}
    # (expr, operand names, output layout) for the vectorized route
    expr: str = ""
    operands: tuple[str, ...] = ()
    layout: str = "mlab"
    # per-(m, l) d x d matrix, written with plain matrix products
    matrix: Callable | None = None
    reshape: dict[str, Callable] = field(default_factory=dict)


def _lora_matrix(f, fr, spec, cfg, m, l):
    return f["A"][m, l] @ f["B"][m, l].T


def _lorta_matrix(f, fr, spec, cfg, m, l):
    blocks = [_lorta_head(f, m, l, h) for h in range(cfg.H)]
    return np.concatenate(blocks, axis=1)


def _lorta_head(f, m, l, h):
    diag = f["C_H"][h] * f["C_L"][l] * f["C_M"][m]
    return f["A"] @ np.diag(diag) @ f["B"].T


def _lotr_matrix(f, fr, spec, cfg, m, l):
    return f["A"][m] @ f["G"][m, l] @ f["B"][m].T


def _vera_matrix(f, fr, spec, cfg, m, l):
    return fr["A"] @ np.diag(f["C_D"][l]) @ fr["B"].T @ np.diag(f["C_B"][l])


def _nola_matrix(f, fr, spec, cfg, m, l):
    d = cfg.d
    out = np.zeros((d, d))
    k = spec.nola_k
    for i in range(k):
        for j in range(k):
            out += f["coef_A"][i, l] * f["coef_B"][j, l] * (fr["basis_A"][:, :, i] @ fr["basis_B"][:, :, j].T)
    return out


def _fact_tt_matrix(f, fr, spec, cfg, m, l):
    return f["U"] @ f["S"][m, l] @ f["V"].T


def _fact_tk_matrix(f, fr, spec, cfg, m, l):
    p = f["P"][m * cfg.L + l]
    core = sum(p[k] * f["G"][k] for k in range(spec.rank))
    return f["U"] @ core @ f["V"].T


def _ring_tensor(cores: Sequence[np.ndarray]) -> np.ndarray:
    """Trace-closed tensor-ring contraction; leading (M, L) axes are batch axes."""
    expr = _ring_expr(len(cores))
    return _contract(expr, *cores)


def _ring_expr(D: int) -> str:
    letters = string.ascii_letters.replace("m", "").replace("l", "")
    bonds, idx = letters[:D], letters[D:2 * D]
    subs = ["ml" + bonds[i] + idx[i] + bonds[(i + 1) % D] for i in range(D)]
    return ",".join(subs) + "->ml" + idx


def _loretta_factor(f, name, spec, cfg) -> np.ndarray:
    D = len(spec.loretta_dims)
    t = _ring_tensor([f[f"{name}_core{i}"] for i in range(D)])
    return t.reshape(cfg.M, cfg.L, cfg.d, spec.rank)


def _loretta_matrix(f, fr, spec, cfg, m, l):
    D = len(spec.loretta_dims)
    a = _ring_tensor([f[f"A_core{i}"][m:m + 1, l:l + 1] for i in range(D)]).reshape(cfg.d, spec.rank)
    b = _ring_tensor([f[f"B_core{i}"][m:m + 1, l:l + 1] for i in range(D)]).reshape(cfg.d, spec.rank)
    return a @ b.T


def _loretta_shapes(spec, cfg):
    r = spec.rank
    shapes = {}
    for name in ("A", "B"):
        for i, k in enumerate(spec.loretta_dims):
            shapes[f"{name}_core{i}"] = (cfg.M, cfg.L, r, k, r)
    return shapes


_PARAMS: dict[Method, _Param] = {
    Method.LORA: _Param(
        trainable=lambda s, c: {"A": (c.M, c.L, c.d, s.rank), "B": (c.M, c.L, c.d, s.rank)},
        zero_init="A",
        expr="mlaf,mlbf->mlab",
        operands=("A", "B"),
        matrix=_lora_matrix,
    ),
    Method.LORTA: _Param(
        trainable=lambda s, c: {
            "A": (c.d, s.rank),
            "B": (c.d_head, s.rank),
            "C_H": (c.H, s.rank),
            "C_L": (c.L, s.rank),
            "C_M": (c.M, s.rank),
        },
        zero_init="A",
        expr="af,bf,hf,lf,mf->abhlm",
        operands=("A", "B", "C_H", "C_L", "C_M"),
        layout="heads",
        matrix=_lorta_matrix,
    ),
    Method.LOTR: _Param(
        trainable=lambda s, c: {
            "A": (c.M, c.d, s.rank),
            "B": (c.M, c.d, s.rank),
            "G": (c.M, c.L, s.rank, s.rank),
        },
        zero_init="G",
        expr="mai,mlij,mbj->mlab",
        operands=("A", "G", "B"),
        matrix=_lotr_matrix,
    ),
    Method.VERA: _Param(
        trainable=lambda s, c: {"C_D": (c.L, s.rank), "C_B": (c.L, c.d)},
        frozen=lambda s, c: {"A": (c.d, s.rank), "B": (c.d, s.rank)},
        zero_init="C_B",
        expr="af,lf,bf,lb->lab",
        operands=("A", "C_D", "B", "C_B"),
        layout="lab",
        matrix=_vera_matrix,
    ),
    Method.NOLA: _Param(
        trainable=lambda s, c: {"coef_A": (s.nola_k, c.L), "coef_B": (s.nola_k, c.L)},
        frozen=lambda s, c: {"basis_A": (c.d, s.rank, s.nola_k), "basis_B": (c.d, s.rank, s.nola_k)},
        zero_init="coef_A",
        expr="il,jl,afi,bfj->lab",
        operands=("coef_A", "coef_B", "basis_A", "basis_B"),
        layout="lab",
        matrix=_nola_matrix,
    ),
    Method.FACT_TT: _Param(
        trainable=lambda s, c: {"U": (c.d, s.rank), "S": (c.M, c.L, s.rank, s.rank), "V": (c.d, s.rank)},
        zero_init="S",
        expr="ai,mlij,bj->mlab",
        operands=("U", "S", "V"),
        matrix=_fact_tt_matrix,
    ),
    Method.FACT_TK: _Param(
        trainable=lambda s, c: {
            "U": (c.d, s.rank),
            "V": (c.d, s.rank),
            "P": (c.M * c.L, s.rank),
            "G": (s.rank, s.rank, s.rank),
        },
        zero_init="G",
        expr="ai,kij,mlk,bj->mlab",
        operands=("U", "G", "P", "V"),
        matrix=_fact_tk_matrix,
        reshape={"P": lambda a, c: a.reshape(c.M, c.L, -1)},
    ),
    Method.LORETTA: _Param(
        trainable=_loretta_shapes,
        zero_init="B_core0",
        matrix=_loretta_matrix,
    ),
}


# ---------------------------------------------------------------------------
# adapter state

def _readonly(a) -> np.ndarray:
    # views into a frozen float64 buffer are already immutable and need no copy
    if (isinstance(a, np.ndarray) and a.dtype == np.float64 and not a.flags.writeable
            and isinstance(a.base, np.ndarray) and not a.base.flags.writeable and a.base.base is None):
        return a
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AdapterState:
    """Trainable and frozen factors of one adapter.

    Arrays are copied and marked read-only on construction; build a new state
    (e.g. with :meth:`with_trainable`) to change factors.
    """

    spec: AdapterSpec
    config: ModelConfig
    trainable: Mapping[str, np.ndarray]
    frozen: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        spec = resolve_spec(self.spec, self.config)
        object.__setattr__(self, "spec", spec)
        want = trainable_shapes(spec, self.config)
        if list(self.trainable) != list(want):
            raise ShapeError(f"{spec.method.value} expects factors {list(want)}, got {list(self.trainable)}")
        for name, shape in want.items():
            if tuple(np.shape(self.trainable[name])) != shape:
                raise ShapeError(f"factor {name} must have shape {shape}, got {np.shape(self.trainable[name])}")
        want_frozen = _PARAMS[spec.method].frozen(spec, self.config)
        if set(self.frozen) != set(want_frozen):
            raise ShapeError(f"{spec.method.value} expects frozen factors {sorted(want_frozen)}")
        for name, shape in want_frozen.items():
            if tuple(np.shape(self.frozen[name])) != shape:
                raise ShapeError(f"frozen factor {name} must have shape {shape}")
        object.__setattr__(self, "trainable", {k: _readonly(self.trainable[k]) for k in want})
        object.__setattr__(self, "frozen", {k: _readonly(self.frozen[k]) for k in want_frozen})

    def with_trainable(self, trainable: Mapping[str, np.ndarray]) -> "AdapterState":
        return AdapterState(self.spec, self.config, dict(trainable), self.frozen)

    def n_trainable(self) -> int:
        return sum(a.size for a in self.trainable.values())


def trainable_shapes(spec: AdapterSpec, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered names and shapes of the trainable factors."""
    spec = resolve_spec(spec, cfg)
    return _PARAMS[spec.method].trainable(spec, cfg)


def frozen_factors(spec: AdapterSpec, cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Seed-generated frozen projections (empty for fully trainable methods).

    Entries are i.i.d. normal with variance ``1/d``, drawn from a generator
    seeded only by ``spec.seed`` so they can be regenerated instead of stored.
    """
    spec = resolve_spec(spec, cfg)
    shapes = _PARAMS[spec.method].frozen(spec, cfg)
    if not shapes:
        return {}
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    return {name: rng.standard_normal(shape) / np.sqrt(cfg.d) for name, shape in shapes.items()}


def init_adapter(spec: AdapterSpec, cfg: ModelConfig, seed: int | None = None) -> AdapterState:
    """Fresh adapter whose initial update is exactly zero.

    All trainable factors are drawn uniform on ``[-1/sqrt(r), 1/sqrt(r)]``
    except one factor per method (``A`` for LoRA/LoRTA, the cores for
    LoTR/FacT, ``C_B`` for VeRA, ``coef_A`` for NOLA, the first B core for
    LoReTTA) which starts at zero.
    """
    spec = resolve_spec(spec, cfg)
    param = _PARAMS[spec.method]
    factors = random_factors(spec, cfg, spec.seed if seed is None else seed)
    factors[param.zero_init] = np.zeros_like(factors[param.zero_init])
    return AdapterState(spec, cfg, factors, frozen_factors(spec, cfg))


def random_factors(spec: AdapterSpec, cfg: ModelConfig, seed: int, bound: float | None = None) -> dict:
    """Trainable factors drawn uniform on ``[-bound, bound]`` (default ``1/sqrt(r)``)."""
    spec = resolve_spec(spec, cfg)
    bound = 1 / np.sqrt(spec.rank) if bound is None else bound
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return {name: rng.uniform(-bound, bound, size=shape) for name, shape in trainable_shapes(spec, cfg).items()}


def random_adapter(spec: AdapterSpec, cfg: ModelConfig, seed: int, bound: float | None = None) -> AdapterState:
    """Adapter with every trainable factor random (generically nonzero update)."""
    spec = resolve_spec(spec, cfg)
    return AdapterState(spec, cfg, random_factors(spec, cfg, seed, bound), frozen_factors(spec, cfg))


def trainable_factors(st: AdapterState) -> dict[str, np.ndarray]:
    return dict(st.trainable)


# ---------------------------------------------------------------------------
# materialization

def _check_finite(st: AdapterState) -> None:
    for group in (st.trainable, st.frozen):
        for name, a in group.items():
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"adapter factor {name} contains non-finite values")


def _operands(st: AdapterState) -> list[np.ndarray]:
    param = _PARAMS[st.spec.method]
    values = {**st.frozen, **st.trainable}
    ops = []
    for name in param.operands:
        a = values[name]
        if name in param.reshape:
            a = param.reshape[name](a, st.config)
        ops.append(a)
    return ops


def full_update(st: AdapterState) -> np.ndarray:
    """Unscaled updates in full layout ``(M, L, d, d)``."""
    _check_finite(st)
    cfg, spec = st.config, st.spec
    param = _PARAMS[spec.method]
    if spec.method is Method.LORETTA:
        a = _loretta_factor(st.trainable, "A", spec, cfg)
        b = _loretta_factor(st.trainable, "B", spec, cfg)
        return np.einsum("mlaf,mlbf->mlab", a, b)
    out = _contract(param.expr, *_operands(st))
    if param.layout == "heads":
        return heads_to_full(out)
    if param.layout == "lab":
        return np.broadcast_to(out, (cfg.M,) + out.shape).copy()
    return out


def full_update_vjp(st: AdapterState, grad: np.ndarray) -> dict[str, np.ndarray]:
    """Pull a gradient on the unscaled full-layout update back to the trainable factors."""
    cfg, spec = st.config, st.spec
    param = _PARAMS[spec.method]
    if spec.method is Method.LORETTA:
        return _loretta_vjp(st, grad)
    if param.layout == "heads":
        grad = full_to_heads(grad, cfg.H)
    elif param.layout == "lab":
        grad = grad.sum(axis=0)
    ops = _operands(st)
    grads = {}
    for k, name in enumerate(param.operands):
        if name not in st.trainable:
            continue
        g = _einsum_vjp(param.expr, ops, grad, k)
        grads[name] = g.reshape(st.trainable[name].shape)
    return {name: grads[name] for name in st.trainable}


def _loretta_vjp(st: AdapterState, grad: np.ndarray) -> dict[str, np.ndarray]:
    spec, cfg = st.spec, st.config
    dims = spec.loretta_dims
    D = len(dims)
    a = _loretta_factor(st.trainable, "A", spec, cfg)
    b = _loretta_factor(st.trainable, "B", spec, cfg)
    grad_factor = {
        "A": np.einsum("mlab,mlbf->mlaf", grad, b),
        "B": np.einsum("mlab,mlaf->mlbf", grad, a),
    }
    expr = _ring_expr(D)
    out = {}
    for name in ("A", "B"):
        g = grad_factor[name].reshape((cfg.M, cfg.L) + tuple(dims))
        cores = [st.trainable[f"{name}_core{i}"] for i in range(D)]
        for i in range(D):
            out[f"{name}_core{i}"] = _einsum_vjp(expr, cores, g, i)
    return {name: out[name] for name in st.trainable}


def _check_index(value: int, extent: int, what: str) -> None:
    if not 0 <= value < extent:
        raise ShapeError(f"{what} index {value} out of range [0, {extent})")


def materialize_update(st: AdapterState, m: int, l: int, h: int) -> np.ndarray:
    """Scaled ``d x d_H`` update of head ``h`` in layer ``l`` for matrix type ``m``."""
    cfg = st.config
    _check_index(m, cfg.M, "matrix-type")
    _check_index(l, cfg.L, "layer")
    _check_index(h, cfg.H, "head")
    _check_finite(st)
    if st.spec.method is Method.LORTA:
        block = _lorta_head(st.trainable, m, l, h)
    else:
        w = _PARAMS[st.spec.method].matrix(st.trainable, st.frozen, st.spec, cfg, m, l)
        block = w[:, h * cfg.d_head:(h + 1) * cfg.d_head]
    return st.spec.scale * block


def materialize_all(st: AdapterState) -> np.ndarray:
    """Scaled 5th-order update tensor of shape ``(d, d_H, H, L, M)``."""
    return st.spec.scale * full_to_heads(full_update(st), st.config.H)


def layer_update(st: AdapterState, m: int, l: int) -> np.ndarray:
    """Scaled ``d x d`` update (heads concatenated) for matrix type ``m``, layer ``l``."""
    _check_index(m, st.config.M, "matrix-type")
    _check_index(l, st.config.L, "layer")
    _check_finite(st)
    w = _PARAMS[st.spec.method].matrix(st.trainable, st.frozen, st.spec, st.config, m, l)
    return st.spec.scale * w


def nola_tensor_form(st: AdapterState) -> np.ndarray:
    """NOLA layer updates via ``sum_f P_A^(f) (alpha_l beta_l^T) P_B^(f)^T``.

    ``P_A^(f) = basis_A[:, f, :]`` is ``d x k``. Returns scaled ``(L, d, d)``.
    """
    if st.spec.method is not Method.NOLA:
        raise ConfigError("nola_tensor_form needs a NOLA adapter")
    _check_finite(st)
    basis_a, basis_b = st.frozen["basis_A"], st.frozen["basis_B"]
    coef_a, coef_b = st.trainable["coef_A"], st.trainable["coef_B"]
    out = np.zeros((st.config.L, st.config.d, st.config.d))
    for l in range(st.config.L):
        core = np.outer(coef_a[:, l], coef_b[:, l])
        for f in range(st.spec.rank):
            out[l] += basis_a[:, f, :] @ core @ basis_b[:, f, :].T
    return st.spec.scale * out
