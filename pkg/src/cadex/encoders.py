"""Deformation encoders producing one code per frame from point clouds.

pf   per-frame PointNet
st   spatio-temporal PointNet over (x, y, z, t), pooled over space then time
set  two-phase PointNet over an unordered set of frames, queried by angle

The st and set variants are compact PointNet compositions rather than the
exact published architectures.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, InputError

KINDS = ("pf", "st", "set")


def pointnet_features(P, prefix, x):
    """Per-point softplus MLP; every layer activated so features feed a max-pool."""
    h = x
    for k in range(nx.mlp_depth(P, prefix)):
        h = nx.softplus(nx.add(nx.matmul(h, P[f"{prefix}.l{k}.W"]), P[f"{prefix}.l{k}.b"]))
    return h


def init_pointnet(rng, prefix, in_dim, out_dim, width=128, dtype=np.float64):
    params = nx.init_mlp(rng, prefix + ".point", [in_dim, width, width], dtype=dtype)
    params.update(nx.init_mlp(rng, prefix + ".head", [width, width, out_dim], dtype=dtype))
    return params


def pointnet(P, prefix, clouds):
    """Max-pooled PointNet over a (F, N, d) batch of equal-size clouds -> (F, out)."""
    clouds = nx.as_tensor(clouds)
    F, N, d = clouds.shape
    feats = pointnet_features(P, prefix + ".point", nx.reshape(clouds, (F * N, d)))
    pooled = nx.tmax(nx.reshape(feats, (F, N, -1)), axis=1)
    return nx.apply_mlp(P, prefix + ".head", pooled)


@dataclass
class Encoder:
    kind: str
    params: dict
    code_dim: int = 64
    width: int = 128

    def to_meta(self):
        return {"kind": self.kind, "code_dim": self.code_dim, "width": self.width}


def init_encoder(kind="st", code_dim=64, width=128, seed=0, dtype=np.float64):
    if kind not in KINDS:
        raise ConfigError(f"unknown encoder {kind!r}; expected one of {KINDS}")
    rng = np.random.default_rng([seed, 2])
    if kind == "pf":
        params = init_pointnet(rng, "E", 3, code_dim, width, dtype)
    elif kind == "st":
        params = nx.init_mlp(rng, "E.point", [4, width, width], dtype=dtype)
        params.update(nx.init_mlp(rng, "E.head", [2 * width, width, code_dim], dtype=dtype))
    else:
        params = init_pointnet(rng, "E", 3, code_dim, width, dtype)
        params.update(nx.init_mlp(rng, "E.query", [1 + code_dim, width, code_dim], dtype=dtype))
    return Encoder(kind, params, code_dim, width)


def normalized_timestamps(timestamps):
    t = np.asarray(timestamps, dtype=np.float64)
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise InputError("timestamps must be strictly increasing")
    span = t[-1] - t[0] if t.size > 1 else 0.0
    return (t - t[0]) / span if span > 0 else np.zeros_like(t)


def _frames(frames):
    out = [np.asarray(f) for f in frames]
    for i, f in enumerate(out):
        if f.ndim != 2 or f.shape[1] != 3 or f.shape[0] < 1:
            raise InputError(f"frame {i} must be a non-empty N x 3 array, got shape {f.shape}")
    return out


# --- graph-level encoders ----------------------------------------------------

def pf_graph(P, frames):
    frames = _frames(frames)
    if len({f.shape[0] for f in frames}) == 1:
        return pointnet(P, "E", np.stack(frames))
    return nx.concat([pointnet(P, "E", f[None]) for f in frames], axis=0)


def st_graph(P, frames, timestamps):
    frames = _frames(frames)
    if len({f.shape[0] for f in frames}) != 1:
        raise InputError("the st encoder needs the same number of points in every frame")
    T, N = len(frames), frames[0].shape[0]
    dtype = frames[0].dtype
    t = normalized_timestamps(timestamps).astype(dtype)
    x4 = np.concatenate([np.stack(frames), np.broadcast_to(t[:, None, None], (T, N, 1))], axis=2)
    feats = pointnet_features(P, "E.point", x4.reshape(T * N, 4))
    per_frame = nx.tmax(nx.reshape(feats, (T, N, -1)), axis=1)
    context = nx.tmax(per_frame, axis=0)
    context = nx.take_rows(nx.reshape(context, (1, -1)), np.zeros(T, dtype=int))
    return nx.apply_mlp(P, "E.head", nx.concat([per_frame, context], axis=1))


def set_global_graph(P, frames):
    return nx.tmax(pf_graph(P, frames), axis=0)


def angle_query_graph(P, angles, global_code):
    angles = np.asarray(angles, dtype=global_code.dtype).reshape(-1, 1)
    g = nx.take_rows(nx.reshape(global_code, (1, -1)), np.zeros(len(angles), dtype=int))
    return nx.apply_mlp(P, "E.query", nx.concat([nx.as_tensor(angles), g], axis=1))


def encode_graph(enc, P, frames, timestamps=None, angles=None):
    """(T, code_dim) Tensor of deformation codes for one sequence."""
    if enc.kind == "pf":
        return pf_graph(P, frames)
    if enc.kind == "st":
        if timestamps is None:
            timestamps = np.arange(len(frames), dtype=np.float64)
        return st_graph(P, frames, timestamps)
    if angles is None or len(angles) != len(frames) or np.any(~np.isfinite(np.asarray(angles, float))):
        raise InputError("the set encoder needs one finite articulation angle per frame")
    return angle_query_graph(P, angles, set_global_graph(P, frames))


# --- array-level API ---------------------------------------------------------

def _P(enc, dtype):
    return {k: v.astype(dtype, copy=False) for k, v in enc.params.items()}


def pf_encode(enc, frame):
    frame = np.asarray(frame)
    if frame.ndim != 2 or frame.shape[0] < 1:
        raise InputError("pf_encode needs a non-empty N x 3 frame")
    return pf_graph(_P(enc, frame.dtype), [frame]).value[0]


def st_encode(enc, frames, timestamps):
    frames = _frames(frames)
    return list(st_graph(_P(enc, frames[0].dtype), frames, timestamps).value)


def set_encode(enc, frames, angles):
    """Returns (global set code, angle -> code function)."""
    frames = _frames(frames)
    if angles is None or len(angles) != len(frames) or any(a is None for a in angles):
        raise InputError("set_encode needs one articulation angle per frame")
    P = _P(enc, frames[0].dtype)
    global_code = set_global_graph(P, frames).value

    def angle_query(angle):
        return angle_query_graph(P, [angle], nx.as_tensor(global_code)).value[0]

    return global_code, angle_query


def encode(enc, frames, timestamps=None, angles=None):
    frames = _frames(frames)
    return encode_graph(enc, _P(enc, frames[0].dtype), frames, timestamps, angles).value
