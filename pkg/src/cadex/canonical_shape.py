"""Canonical observation aggregation, geometry encoder and occupancy decoder."""
from __future__ import annotations

import numpy as np

from . import homeomorphism as hm
from . import numerics as nx
from .encoders import init_pointnet, pointnet
from .errors import InputError

M_MAX = 1024


# multiplier on the decoder weights that see canonical coordinates
COORD_SCALE = 20.0


def init_geometry_encoder(geometry_dim=128, width=128, seed=0, dtype=np.float64):
    return init_pointnet(np.random.default_rng([seed, 3]), "G", 3, geometry_dim, width, dtype)


def init_decoder(geometry_dim=128, width=256, hidden_layers=4, seed=0, dtype=np.float64):
    sizes = [3 + geometry_dim] + [width] * hidden_layers + [1]
    return nx.init_mlp(np.random.default_rng([seed, 4]), "D", sizes, dtype=dtype)


def subsample_indices(total, m_max, rng):
    """Sorted uniform subsample of range(total) without replacement; identity if it fits."""
    if total <= m_max:
        return np.arange(total)
    return np.sort(rng.choice(total, size=m_max, replace=False))


def aggregate_graph(H, P, frames, codes, m_max=M_MAX, rng=None):
    """Union of all frames mapped to canonical space, as a Tensor.

    The subsample is drawn before mapping, which gives the same points as
    mapping everything and subsampling afterwards.
    """
    frames = [np.asarray(f) for f in frames]
    n_codes = codes.shape[0] if codes.ndim == 2 else 1
    if len(frames) != n_codes:
        raise InputError(f"{len(frames)} frames but {n_codes} deformation codes")
    pts = np.concatenate(frames, axis=0)
    frame_of = np.concatenate([np.full(len(f), i) for i, f in enumerate(frames)])
    if rng is None:
        rng = np.random.default_rng(0)
    keep = subsample_indices(len(pts), m_max, rng)
    return hm.forward_graph(H, P, pts[keep], codes, frame_of[keep])


def aggregate_canonical_observation(H, frames, codes, m_max=M_MAX, seed=0):
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim == 1:
        codes = codes[None]
    P = hm._params(H, np.float64)
    return aggregate_graph(H, P, frames, codes, m_max, np.random.default_rng(seed)).value


def geometry_graph(P, obs):
    obs = nx.as_tensor(obs)
    if obs.shape[0] < 1:
        raise InputError("cannot encode an empty canonical observation")
    return nx.reshape(pointnet(P, "G", nx.reshape(obs, (1, obs.shape[0], 3))), (-1,))


def geometry_encode(params, obs):
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] < 1:
        raise InputError("cannot encode an empty canonical observation")
    return geometry_graph(params, obs).value


def logits_graph(P, uvw, g):
    """Decoder logits for (n, 3) canonical points under one geometry code.

    The coordinate rows of the first layer are used multiplied by
    ``COORD_SCALE``. With the default fan-in init they would otherwise be
    ~0.1, and the field starts out (and long stays) nearly constant over a
    unit-sized shape.
    """
    W0 = P["D.l0.W"]
    g_term = nx.add(nx.matmul(nx.reshape(g, (1, -1)), nx.getitem(W0, slice(3, None))), P["D.l0.b"])
    W_xyz = nx.mul(nx.getitem(W0, slice(0, 3)), COORD_SCALE)
    h = nx.softplus(nx.add(nx.matmul(nx.as_tensor(uvw), W_xyz), g_term))
    return nx.reshape(nx.apply_mlp(P, "D", h, start=1), (-1,))


def occupancy_query(decoder, uvw, g):
    uvw = np.asarray(uvw, dtype=np.float64)
    single = uvw.ndim == 1
    out = nx.sigmoid(logits_graph(decoder, uvw.reshape(-1, 3), np.asarray(g, np.float64))).value
    return out[0] if single else out


def deformed_occupancy(H, decoder, p, c, g):
    """psi(H(p; c); g): occupancy of a deformed-frame point."""
    return occupancy_query(decoder, hm.map_forward(H, p, c), g)
