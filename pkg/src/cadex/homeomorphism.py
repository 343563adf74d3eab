"""Conditional coupling-flow homeomorphism of R^3.

Each block transforms one coordinate (the *active* one) by an affine map whose
scale and shift are predicted from the two passive coordinates and a
deformation code. Blocks are inverted in closed form, so the whole stack is a
bijection with an exact inverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, NumericError

MODES = ("nvp", "nice")


@dataclass(frozen=True)
class CouplingBlock:
    mode: str
    active: int
    prefix: str

    @property
    def passive(self):
        return tuple(i for i in range(3) if i != self.active)


@dataclass
class Homeomorphism:
    blocks: list
    condition_dim: int
    params: dict
    s_clamp: float = 5.0
    width: int = 128
    hidden_layers: int = 2
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def patterns(self):
        return [b.active for b in self.blocks]

    def to_meta(self):
        return {
            "blocks": [{"mode": b.mode, "active": b.active} for b in self.blocks],
            "condition_dim": self.condition_dim,
            "s_clamp": self.s_clamp,
            "width": self.width,
            "hidden_layers": self.hidden_layers,
            "seed": self.seed,
        }

    @classmethod
    def from_meta(cls, meta, params):
        blocks = [CouplingBlock(b["mode"], int(b["active"]), f"H.b{k}")
                  for k, b in enumerate(meta["blocks"])]
        return cls(blocks, int(meta["condition_dim"]), params, float(meta["s_clamp"]),
                   int(meta["width"]), int(meta["hidden_layers"]), meta.get("seed"))


def split_patterns(B, seed):
    """Seeded shuffle of the repeated cycle 0,1,2,...; every axis is covered when B >= 3."""
    if B < 3:
        raise ConfigError(f"need at least 3 coupling blocks to cover all coordinates, got B={B}")
    cycle = [k % 3 for k in range(B)]
    rng = np.random.default_rng(seed)
    return [int(a) for a in rng.permutation(cycle)]


def init_homeomorphism(B=6, condition_dim=64, mode="nvp", seed=0, width=128,
                       hidden_layers=2, s_clamp=5.0, dtype=np.float64, patterns=None):
    """Fresh stack whose conditioner output layers are zero, i.e. the identity map.

    ``mode`` is "nvp", "nice", or a per-block list of those. Explicit
    ``patterns`` (active axis per block) skip the coverage construction and
    are taken as given.
    """
    modes = [mode] * B if isinstance(mode, str) else list(mode)
    if len(modes) != B:
        raise ConfigError(f"got {len(modes)} block modes for B={B}")
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown coupling mode {m!r}")
    if s_clamp <= 0:
        raise ConfigError("s_clamp must be positive")
    if patterns is None:
        patterns = split_patterns(B, seed)
    elif len(patterns) != B or any(a not in (0, 1, 2) for a in patterns):
        raise ConfigError(f"need {B} split patterns with values in 0..2, got {patterns}")
    rng = np.random.default_rng([seed, 1])
    sizes = [2 + condition_dim] + [width] * hidden_layers + [1]
    params = {}
    blocks = []
    for k, (m, a) in enumerate(zip(modes, patterns)):
        prefix = f"H.b{k}"
        blocks.append(CouplingBlock(m, a, prefix))
        params.update(nx.init_mlp(rng, prefix + ".t", sizes, zero_last=True, dtype=dtype))
        if m == "nvp":
            params.update(nx.init_mlp(rng, prefix + ".s", sizes, zero_last=True, dtype=dtype))
    return Homeomorphism(blocks, condition_dim, params, s_clamp, width, hidden_layers, seed)


# --- graph-level building blocks (operate on Tensors) -------------------------

def _code_term(P, prefix, codes):
    """Per-code contribution to a conditioner's first layer: codes @ W[2:] + b."""
    W0 = P[f"{prefix}.l0.W"]
    return nx.add(nx.matmul(codes, nx.getitem(W0, slice(2, None))), P[f"{prefix}.l0.b"])


def _conditioner(P, prefix, passive_xy, code_term):
    W0 = P[f"{prefix}.l0.W"]
    h = nx.softplus(nx.add(nx.matmul(passive_xy, nx.getitem(W0, slice(0, 2))), code_term))
    return nx.reshape(nx.apply_mlp(P, prefix, h, start=1), (-1,))


class _Conditioning:
    """Code-dependent first-layer terms, computed once per map evaluation."""

    def __init__(self, H, P, codes, frame_index):
        codes = nx.as_tensor(codes)
        if codes.ndim == 1:
            codes = nx.reshape(codes, (1, -1))
        if codes.shape[-1] != H.condition_dim:
            raise DimensionError(
                f"deformation code length {codes.shape[-1]} != condition_dim {H.condition_dim}")
        self.P = P
        self.codes = codes
        self.frame_index = None if frame_index is None else np.asarray(frame_index)
        self._cache = {}

    def term(self, prefix):
        t = self._cache.get(prefix)
        if t is None:
            t = _code_term(self.P, prefix, self.codes)
            if self.frame_index is not None:
                t = nx.take_rows(t, self.frame_index)
            self._cache[prefix] = t
        return t


def _scale_shift(H, block, cond, passive_xy):
    t = _conditioner(cond.P, block.prefix + ".t", passive_xy, cond.term(block.prefix + ".t"))
    if block.mode == "nice":
        return None, t
    raw = _conditioner(cond.P, block.prefix + ".s", passive_xy, cond.term(block.prefix + ".s"))
    s = nx.mul(nx.tanh(nx.mul(raw, 1.0 / H.s_clamp)), H.s_clamp)
    return s, t


def _columns(x):
    return [nx.getitem(x, (slice(None), i)) for i in range(3)]


def _block_apply(H, block, cond, x, inverse):
    cols = _columns(x)
    passive_xy = nx.stack([cols[i] for i in block.passive], axis=1)
    s, t = _scale_shift(H, block, cond, passive_xy)
    z = cols[block.active]
    if inverse:
        z = nx.sub(z, t)
        if s is not None:
            z = nx.mul(z, nx.exp(nx.neg(s)))
    else:
        if s is not None:
            z = nx.mul(z, nx.exp(s))
        z = nx.add(z, t)
    cols[block.active] = z
    return nx.stack(cols, axis=1), s


def forward_graph(H, P, points, codes, frame_index=None, with_logdet=False):
    """H(points; c) as a Tensor. ``codes`` is (d_c,) or (T, d_c) with ``frame_index``."""
    cond = _Conditioning(H, P, codes, frame_index)
    x = nx.as_tensor(points)
    logdet = None
    for block in H.blocks:
        x, s = _block_apply(H, block, cond, x, inverse=False)
        if with_logdet and s is not None:
            logdet = s if logdet is None else nx.add(logdet, s)
    if with_logdet:
        if logdet is None:
            logdet = nx.as_tensor(np.zeros(x.shape[0], x.dtype))
        return x, logdet
    return x


def inverse_graph(H, P, points, codes, frame_index=None):
    cond = _Conditioning(H, P, codes, frame_index)
    x = nx.as_tensor(points)
    for block in reversed(H.blocks):
        x, _ = _block_apply(H, block, cond, x, inverse=True)
    return x


# --- array-level API ---------------------------------------------------------

def _points(p):
    p = np.asarray(p, dtype=np.float64)
    return p.reshape(1, 3) if p.ndim == 1 else p


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def _params(H, dtype):
    return {k: v.astype(dtype, copy=False) for k, v in H.params.items()}


def block_forward(H, k, p, c):
    """Apply block ``k`` of ``H`` alone to points ``p``."""
    x = _points(p)
    P = _params(H, x.dtype)
    cond = _Conditioning(H, P, np.asarray(c, x.dtype), None)
    y, _ = _block_apply(H, H.blocks[k], cond, x, inverse=False)
    return _check_finite(y.value, f"block {k} output").reshape(np.shape(p))


def block_inverse(H, k, p, c):
    x = _points(p)
    P = _params(H, x.dtype)
    cond = _Conditioning(H, P, np.asarray(c, x.dtype), None)
    y, _ = _block_apply(H, H.blocks[k], cond, x, inverse=True)
    return _check_finite(y.value, f"block {k} inverse").reshape(np.shape(p))


def map_forward(H, points, c, frame_index=None):
    x = _points(points)
    out = forward_graph(H, _params(H, x.dtype), x, np.asarray(c, x.dtype), frame_index).value
    return _check_finite(out, "canonical map output").reshape(np.shape(points))


def map_inverse(H, points, c, frame_index=None):
    x = _points(points)
    out = inverse_graph(H, _params(H, x.dtype), x, np.asarray(c, x.dtype), frame_index).value
    return _check_finite(out, "inverse canonical map output").reshape(np.shape(points))


def correspondence(H, points, c_i, c_j):
    """Map points observed at frame i to frame j through the canonical space."""
    return map_inverse(H, map_forward(H, points, c_i), c_j)


def log_det_jacobian(H, points, c):
    """log|det dH/dp| per point: the sum of the NVP log-scales along the path."""
    x = _points(points)
    _, ld = forward_graph(H, _params(H, x.dtype), x, np.asarray(c, x.dtype), with_logdet=True)
    ld = np.asarray(ld.value)
    return ld[0] if np.ndim(points) == 1 else ld


def block_log_dets(H, points, c):
    """Per-block log-dets, shape (B, n); NICE rows are exactly zero."""
    x = _points(points)
    P = _params(H, x.dtype)
    cond = _Conditioning(H, P, np.asarray(c, x.dtype), None)
    rows = []
    y = nx.as_tensor(x)
    for block in H.blocks:
        y, s = _block_apply(H, block, cond, y, inverse=False)
        rows.append(np.zeros(x.shape[0]) if s is None else s.value)
    return np.stack(rows)


def numerical_jacobian(f, p, h=1e-5):
    """3x3 central-difference Jacobian of a map R^3 -> R^3 at p."""
    p = np.asarray(p, dtype=np.float64)
    J = np.zeros((3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        J[:, k] = (f(p + e) - f(p - e)) / (2 * h)
    return J
