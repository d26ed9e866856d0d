"""Adapter-only gradients, finite-difference checks, SGD and synthetic tasks."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .adapters import (
    MATRIX_TYPES,
    AdapterSpec,
    AdapterState,
    ModelConfig,
    full_update,
    full_update_vjp,
    random_adapter,
)
from .errors import ConfigError, NonFiniteError
from .transformer import TransformerWeights, backward_attention, check_compatible, forward, merge, random_weights

LOSS_KINDS = ("mse_regression", "teacher_match")
DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class LossSpec:
    kind: str = "teacher_match"
    seed: int = 0
    batch_size: int = 4
    N: int = 16
    steps: int = 100

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r} (choose from {LOSS_KINDS})")
        if self.batch_size < 1 or self.N < 1:
            raise ConfigError("batch_size and N must be >= 1")


@dataclass
class Batch:
    x: np.ndarray  # (B, N, d)
    y: np.ndarray  # (B, N, d)


@dataclass
class GradReport:
    max_rel_error: dict[str, float]
    step: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float = 1e-5) -> bool:
        return self.worst < tol


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, curve: list[float]):
        super().__init__(message)
        self.curve = curve


def make_batch(
    w: TransformerWeights,
    spec: LossSpec,
    teacher: TransformerWeights | None = None,
) -> Batch:
    """Seeded inputs and targets for ``spec``.

    ``teacher_match`` targets are the teacher model's outputs on the inputs;
    ``mse_regression`` targets are ``tanh`` of a fixed random linear map of
    the inputs.
    """
    d = w.config.d
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7]))
    x = rng.standard_normal((spec.batch_size, spec.N, d))
    if spec.kind == "teacher_match":
        if teacher is None:
            raise ConfigError("teacher_match needs teacher weights")
        y, _ = forward(teacher, None, x)
    else:
        proj = rng.standard_normal((d, d)) / np.sqrt(d)
        y = np.tanh(x @ proj)
    return Batch(x, y)


def make_teacher(
    w: TransformerWeights,
    spec: AdapterSpec,
    seed: int,
    relative_norm: float | None = 0.05,
):
    """Teacher = base + a random adapter of ``spec``; returns ``(teacher, adapter)``.

    With ``relative_norm`` the first trainable factor is rescaled so the update
    has Frobenius norm ``relative_norm`` times that of the fine-tuned base
    matrices. Every parameterization is linear in each single factor, so this
    changes only the size of the update, not its structure.
    """
    delta = random_adapter(spec, w.config, seed)
    if relative_norm is not None:
        target = relative_norm * np.linalg.norm(w.attn[[MATRIX_TYPES.index(k) for k in w.config.targets]])
        current = np.linalg.norm(full_update(delta)) * spec.scale
        if current > 0:
            factors = dict(delta.trainable)
            first = next(iter(factors))
            factors[first] = factors[first] * (target / current)
            delta = delta.with_trainable(factors)
    return merge(w, delta), delta


def _per_item_losses(out: np.ndarray, y: np.ndarray) -> np.ndarray:
    return ((out - y) ** 2).sum(axis=-1).mean(axis=-1)


def loss_value(w: TransformerWeights, st: AdapterState | None, batch: Batch) -> float:
    """Mean over batch items and positions of the squared error summed over features."""
    try:
        out, _ = forward(w, st, batch.x)
    except NonFiniteError as exc:
        raise NonFiniteError(f"{exc} (batch item {_find_bad_item(w, st, batch)})") from exc
    per_item = _per_item_losses(out, batch.y)
    bad = np.flatnonzero(~np.isfinite(per_item))
    if bad.size:
        raise NonFiniteError(f"non-finite loss at batch item {bad[0]}")
    return float(per_item.mean())


def _find_bad_item(w, st, batch) -> int | None:
    for i in range(batch.x.shape[0]):
        try:
            forward(w, st, batch.x[i])
        except NonFiniteError:
            return i
    return None


def loss_and_grads(
    w: TransformerWeights,
    st: AdapterState,
    spec: LossSpec | None,
    batch: Batch,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and its gradient w.r.t. the adapter's trainable factors only."""
    cfg = w.config
    check_compatible(cfg, st)
    try:
        out, trace = forward(w, st, batch.x)
    except NonFiniteError as exc:
        raise NonFiniteError(f"{exc} (batch item {_find_bad_item(w, st, batch)})") from exc
    per_item = _per_item_losses(out, batch.y)
    bad = np.flatnonzero(~np.isfinite(per_item))
    if bad.size:
        raise NonFiniteError(f"non-finite loss at batch item {bad[0]}")
    loss = float(per_item.mean())

    B, N = batch.x.shape[:2]
    dout = 2.0 * (out - batch.y) / (B * N)
    g_attn = backward_attention(w, trace, dout)
    g_full = np.empty((cfg.M, cfg.L, cfg.d, cfg.d))
    for m, kind in enumerate(cfg.targets):
        g = g_attn[MATRIX_TYPES.index(kind)]  # (L, H, d, d_H)
        g_full[m] = g.transpose(0, 2, 1, 3).reshape(cfg.L, cfg.d, cfg.d)
    grads = full_update_vjp(st, st.spec.scale * g_full)
    return loss, grads


def finite_difference_grads(
    loss_fn: Callable[[AdapterState], float],
    st: AdapterState,
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` for every trainable scalar."""
    out = {}
    for name, base in st.trainable.items():
        g = np.empty_like(base)
        for idx in np.ndindex(base.shape):
            values = dict(st.trainable)
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            values[name] = plus
            f_plus = loss_fn(st.with_trainable(values))
            values[name] = minus
            f_minus = loss_fn(st.with_trainable(values))
            g[idx] = (f_plus - f_minus) / (2 * h)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def gradient_check(
    w: TransformerWeights,
    st: AdapterState,
    batch: Batch,
    h: float = 1e-5,
    corrupt: bool = False,
) -> GradReport:
    """Compare :func:`loss_and_grads` with central differences, factor by factor.

    ``corrupt`` perturbs the analytic gradient on purpose (negative control).
    """
    _, analytic = loss_and_grads(w, st, None, batch)
    if corrupt:
        first = next(iter(analytic))
        analytic[first] = analytic[first] * 1.01 + 1e-3
    numeric = finite_difference_grads(lambda s: loss_value(w, s, batch), st, h)
    errors = {name: float(relative_error(analytic[name], numeric[name]).max()) for name in analytic}
    return GradReport(errors, h)


def check_adapter_gradients(
    spec: AdapterSpec,
    cfg: ModelConfig,
    seed: int = 0,
    batch_size: int = 2,
    h: float = 1e-5,
    corrupt: bool = False,
) -> GradReport:
    """Gradient check on a seeded teacher-match problem.

    The student adapter is random (every factor nonzero, so no gradient is
    trivially zero) and the teacher is base + another random adapter of the
    same kind, which keeps the loss, and with it finite-difference round-off,
    small.
    """
    w = random_weights(cfg, seed)
    st = random_adapter(spec, cfg, seed=seed + 1)
    teacher, _ = make_teacher(w, spec, seed=seed + 2)
    batch = make_batch(w, LossSpec("teacher_match", seed=seed, batch_size=batch_size, N=cfg.N), teacher)
    return gradient_check(w, st, batch, h, corrupt)


@dataclass
class SGD:
    lr: float = 0.1
    momentum: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        new = {}
        for name, p in params.items():
            v = grads[name]
            if self.momentum:
                v = self.momentum * self.velocity.get(name, 0.0) + v
                self.velocity[name] = v
            new[name] = p - self.lr * v
        return new


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    if norm <= max_norm:
        return dict(grads)
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def train(
    w: TransformerWeights,
    st: AdapterState,
    spec: LossSpec,
    batch: Batch,
    lr: float = 0.1,
    momentum: float = 0.9,
    clip_norm: float | None = None,
) -> tuple[AdapterState, list[float]]:
    """Full-batch SGD on the adapter factors for ``spec.steps`` steps.

    ``clip_norm`` rescales the joint gradient of all factors to at most that
    Frobenius norm before the update.

    Returns the trained state and ``steps + 1`` losses (before each step and
    after the last one). Raises :class:`TrainingDiverged` once the loss
    exceeds ``1e6``.
    """
    if spec.steps < 1:
        raise ConfigError("steps must be >= 1")
    opt = SGD(lr, momentum)
    curve: list[float] = []
    for _ in range(spec.steps):
        loss, grads = loss_and_grads(w, st, spec, batch)
        curve.append(loss)
        if loss > DIVERGENCE_LIMIT:
            raise TrainingDiverged(f"loss {loss:.3g} exceeded {DIVERGENCE_LIMIT:g}", curve)
        if clip_norm is not None:
            grads = clip_gradients(grads, clip_norm)
        st = st.with_trainable(opt.step(st.trainable, grads))
    loss = loss_value(w, st, batch)
    curve.append(loss)
    if loss > DIVERGENCE_LIMIT:
        raise TrainingDiverged(f"loss {loss:.3g} exceeded {DIVERGENCE_LIMIT:g}", curve)
    return st, curve


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(curve):
            writer.writerow([i, repr(float(v))])
