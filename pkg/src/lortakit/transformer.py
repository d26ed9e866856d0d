"""
A small multi-head transformer written directly from the layer equations

    Attn(X) = X + sum_h softmax(X Q_h K_h^T X^T / sqrt(d)) X V_h P_h^T
    Y       = LayerNorm(X + Attn(X))
    X_next  = LayerNorm(Y + MLP(Y))
    MLP(X)  = ReLU(X G1^T + 1 b1^T) G2^T + 1 b2^T

Note the residual inside ``Attn`` on top of the one in ``Y`` and the
``sqrt(d)`` (not ``sqrt(d_H)``) temperature; both are kept as written.
There is no positional encoding, no mask and no embedding layer: inputs are
real ``N x d`` matrices (or ``B x N x d`` batches).

Attention weights of all layers live in one array of shape
``(4, L, H, d, d_H)`` indexed by matrix type (Q, K, V, P), layer and head.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .adapters import MATRIX_TYPES, AdapterState, ModelConfig, full_update
from .errors import ConfigError, NonFiniteError, ShapeError

LN_EPS = 1e-5


@dataclass(frozen=True)
class TransformerWeights:
    config: ModelConfig
    attn: np.ndarray  # (4, L, H, d, d_H): Q, K, V, P
    G1: np.ndarray  # (L, mlp_width, d)
    b1: np.ndarray  # (L, mlp_width)
    G2: np.ndarray  # (L, d, mlp_width)
    b2: np.ndarray  # (L, d)
    ln1_gain: np.ndarray  # (L, d)
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray

    def __post_init__(self):
        c = self.config
        want = {
            "attn": (4, c.L, c.H, c.d, c.d_head),
            "G1": (c.L, c.mlp_width, c.d),
            "b1": (c.L, c.mlp_width),
            "G2": (c.L, c.d, c.mlp_width),
            "b2": (c.L, c.d),
            "ln1_gain": (c.L, c.d),
            "ln1_bias": (c.L, c.d),
            "ln2_gain": (c.L, c.d),
            "ln2_bias": (c.L, c.d),
        }
        for name, shape in want.items():
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != shape:
                raise ShapeError(f"{name} must have shape {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"{name} contains non-finite values")
            object.__setattr__(self, name, a)

    def matrix(self, kind: str, l: int, h: int) -> np.ndarray:
        return self.attn[MATRIX_TYPES.index(kind), l, h]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "config"}

    def replace(self, **changes) -> "TransformerWeights":
        return dataclasses.replace(self, **changes)


def random_weights(cfg: ModelConfig, seed: int = 0) -> TransformerWeights:
    """Seeded base model: N(0, 1/fan_in) matrices, small biases, unit LayerNorm gains."""
    rng = np.random.default_rng(seed)
    L, d, H, dh, w = cfg.L, cfg.d, cfg.H, cfg.d_head, cfg.mlp_width
    return TransformerWeights(
        config=cfg,
        attn=rng.standard_normal((4, L, H, d, dh)) / np.sqrt(d),
        G1=rng.standard_normal((L, w, d)) / np.sqrt(d),
        b1=0.1 * rng.standard_normal((L, w)),
        G2=rng.standard_normal((L, d, w)) / np.sqrt(w),
        b2=0.1 * rng.standard_normal((L, d)),
        ln1_gain=np.ones((L, d)),
        ln1_bias=np.zeros((L, d)),
        ln2_gain=np.ones((L, d)),
        ln2_bias=np.zeros((L, d)),
    )


def check_compatible(cfg: ModelConfig, st: AdapterState) -> None:
    if st.config.adapter_dims() != cfg.adapter_dims():
        raise ConfigError(
            f"adapter built for (d, H, L, M)={st.config.adapter_dims()}, "
            f"model has {cfg.adapter_dims()}"
        )


def attention_update(cfg: ModelConfig, st: AdapterState) -> np.ndarray:
    """Scaled adapter update laid out like ``TransformerWeights.attn``."""
    check_compatible(cfg, st)
    full = st.spec.scale * full_update(st)  # (M, L, d, d)
    out = np.zeros((4, cfg.L, cfg.H, cfg.d, cfg.d_head))
    for m, kind in enumerate(cfg.targets):
        out[MATRIX_TYPES.index(kind)] = full[m].reshape(cfg.L, cfg.d, cfg.H, cfg.d_head).transpose(0, 2, 1, 3)
    return out


def merge(w: TransformerWeights, st: AdapterState) -> TransformerWeights:
    """Fold the adapter update into the base attention weights."""
    return w.replace(attn=w.attn + attention_update(w.config, st))


def unmerge(w: TransformerWeights, st: AdapterState) -> TransformerWeights:
    return w.replace(attn=w.attn - attention_update(w.config, st))


def softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(z: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    """Row-wise LayerNorm over the feature axis; returns (output, normalized, inv_std)."""
    mu = z.mean(axis=-1, keepdims=True)
    var = z.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (z - mu) * inv
    return gain * xhat + bias, xhat, inv


def _layer_norm_backward(dy, xhat, inv, gain):
    dxhat = dy * gain
    return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


@dataclass
class LayerCache:
    x: np.ndarray  # layer input X^(l)
    probs: np.ndarray  # (B, H, N, N) attention probabilities
    qx: np.ndarray  # (B, H, N, d_H)
    kx: np.ndarray
    vx: np.ndarray
    attn_out: np.ndarray  # Attn(X^(l))
    xhat1: np.ndarray
    inv1: np.ndarray
    y: np.ndarray  # Y^(l)
    mlp_pre: np.ndarray  # X G1^T + b1
    xhat2: np.ndarray
    inv2: np.ndarray


@dataclass
class ForwardTrace:
    attn: np.ndarray  # effective attention weights used
    layers: list[LayerCache] = field(default_factory=list)


def _check(a: np.ndarray, what: str, l: int) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite {what} in layer {l}")


def forward(w: TransformerWeights, adapters: AdapterState | None, x: np.ndarray):
    """Run all layers; returns ``(output, trace)`` with the output shaped like ``x``.

    With ``adapters`` the effective attention weights are base + scaled update
    for the fine-tuned matrix types; the base weights are left untouched.
    """
    cfg = w.config
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != cfg.d:
        raise ShapeError(f"input must be N x {cfg.d} (or B x N x {cfg.d}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("input contains non-finite values")

    attn = w.attn if adapters is None else w.attn + attention_update(cfg, adapters)
    trace = ForwardTrace(attn=attn)
    root_d = np.sqrt(cfg.d)
    for l in range(cfg.L):
        Q, K, V, P = attn[0, l], attn[1, l], attn[2, l], attn[3, l]  # (H, d, d_H)
        xb = x[:, None]
        qx, kx, vx = xb @ Q, xb @ K, xb @ V  # (B, H, N, d_H)
        probs = softmax(qx @ kx.transpose(0, 1, 3, 2) / root_d)
        heads = probs @ vx
        attn_out = x + (heads @ P.transpose(0, 2, 1)).sum(axis=1)
        _check(attn_out, "attention output", l)
        y, xhat1, inv1 = layer_norm(x + attn_out, w.ln1_gain[l], w.ln1_bias[l])
        mlp_pre = y @ w.G1[l].T + w.b1[l]
        mlp = np.maximum(mlp_pre, 0.0) @ w.G2[l].T + w.b2[l]
        _check(mlp, "MLP output", l)
        x_next, xhat2, inv2 = layer_norm(y + mlp, w.ln2_gain[l], w.ln2_bias[l])
        _check(x_next, "layer output", l)
        trace.layers.append(LayerCache(x, probs, qx, kx, vx, attn_out, xhat1, inv1, y, mlp_pre, xhat2, inv2))
        x = x_next
    return (x[0] if single else x), trace


def backward_attention(w: TransformerWeights, trace: ForwardTrace, dout: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the effective attention weights.

    ``dout`` is the loss gradient w.r.t. the forward output. Returns an array
    shaped like ``TransformerWeights.attn``.
    """
    cfg = w.config
    dx = np.asarray(dout, dtype=np.float64)
    if dx.ndim == 2:
        dx = dx[None]
    grad = np.zeros_like(trace.attn)
    root_d = np.sqrt(cfg.d)
    for l in reversed(range(cfg.L)):
        c = trace.layers[l]
        Q, K, V, P = (trace.attn[i, l] for i in range(4))
        dz2 = _layer_norm_backward(dx, c.xhat2, c.inv2, w.ln2_gain[l])
        dhid = (dz2 @ w.G2[l]) * (c.mlp_pre > 0)
        dy = dz2 + dhid @ w.G1[l]
        dz1 = _layer_norm_backward(dy, c.xhat1, c.inv1, w.ln1_gain[l])
        # z1 = x + attn_out = 2x + sum_h heads_h P_h^T
        dx_new = 2.0 * dz1
        heads = c.probs @ c.vx
        dzt = dz1.transpose(0, 2, 1)[:, None]  # (B, 1, d, N)
        grad[3, l] = (dzt @ heads).sum(axis=0)
        dheads = dz1[:, None] @ P
        dprobs = dheads @ c.vx.transpose(0, 1, 3, 2)
        dvx = c.probs.transpose(0, 1, 3, 2) @ dheads
        ds = c.probs * (dprobs - (dprobs * c.probs).sum(axis=-1, keepdims=True)) / root_d
        dqx = ds @ c.kx
        dkx = ds.transpose(0, 1, 3, 2) @ c.qx
        xt = c.x.transpose(0, 2, 1)[:, None]  # (B, 1, d, N)
        grad[0, l] = (xt @ dqx).sum(axis=0)
        grad[1, l] = (xt @ dkx).sum(axis=0)
        grad[2, l] = (xt @ dvx).sum(axis=0)
        dx_new += (dqx @ Q.transpose(0, 2, 1) + dkx @ K.transpose(0, 2, 1)
                   + dvx @ V.transpose(0, 2, 1)).sum(axis=1)
        dx = dx_new
    return grad
