"""Procedural deformable sequences with analytic occupancy and correspondences.

Every shape is described by a rest configuration and a pose map
``rest point -> point at time t``. Occupancy at time t is rest occupancy of the
un-posed point, and ground-truth correspondences are rest surface samples
posed at every frame, so both are exact by construction.

On disk a dataset is a directory holding ``meta.json`` and one
``seq_%03d.json`` per sequence with base64 little-endian arrays.
"""
from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ParseError

FORMAT_VERSION = 1
BOUNDS = (-0.6, 0.6)
KINDS = ("translating_sphere", "scaling_sphere", "bending_bar", "hinge_pair")


# --- primitive geometry -------------------------------------------------------

def sample_sphere_surface(rng, n, radius):
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_box_surface(rng, n, lo, hi):
    """Area-uniform samples on the surface of an axis-aligned box."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = lo + rng.uniform(size=(n, 3)) * ext
    side = rng.integers(0, 2, size=n)
    pts[np.arange(n), axis] = np.where(side == 1, hi[axis], lo[axis])
    return pts


def in_box(p, lo, hi):
    return np.all((p >= np.asarray(lo)) & (p <= np.asarray(hi)), axis=-1)


def _rot_z(p, angle, pivot):
    c, s = np.cos(angle), np.sin(angle)
    q = p - pivot
    out = q.copy()
    out[..., 0] = c * q[..., 0] - s * q[..., 1]
    out[..., 1] = s * q[..., 0] + c * q[..., 1]
    return out + pivot


# --- analytic shapes ------------------------------------------------------------

@dataclass
class AnalyticShape:
    kind: str
    params: dict

    # parts: rest-surface samples carry a part id so piecewise-rigid poses are exact
    def sample_rest_surface(self, rng, n):
        k, q = self.kind, self.params
        if k in ("translating_sphere", "scaling_sphere"):
            return sample_sphere_surface(rng, n, q["radius"]), np.zeros(n, dtype=int)
        if k == "bending_bar":
            h = np.array(q["half_extents"])
            return sample_box_surface(rng, n, -h, h), np.zeros(n, dtype=int)
        # hinge: split samples between the two equal boxes by area (equal)
        part = rng.integers(0, 2, size=n)
        pts = np.where(part[:, None] == 0,
                       sample_box_surface(rng, n, q["box_a_lo"], q["box_a_hi"]),
                       sample_box_surface(rng, n, q["box_b_lo"], q["box_b_hi"]))
        return pts, part

    def rest_occupancy(self, p):
        k, q = self.kind, self.params
        if k in ("translating_sphere", "scaling_sphere"):
            return np.sum(p * p, axis=-1) <= q["radius"] ** 2
        if k == "bending_bar":
            h = np.array(q["half_extents"])
            return in_box(p, -h, h)
        return in_box(p, q["box_a_lo"], q["box_a_hi"]) | in_box(p, q["box_b_lo"], q["box_b_hi"])

    def articulation(self, t):
        q = self.params
        if self.kind == "translating_sphere":
            return float(t)
        if self.kind == "scaling_sphere":
            return 1.0 + (q["final_scale"] - 1.0) * t
        return q["max_angle"] * t

    def center(self, t):
        q = self.params
        return _snap(np.asarray(q["start"]) + (np.asarray(q["end"]) - np.asarray(q["start"])) * t)

    def pose(self, rest, part, t):
        """Rest points -> points at time t."""
        k = self.kind
        rest = np.asarray(rest, float)
        if k == "translating_sphere":
            return rest + self.center(t)
        if k == "scaling_sphere":
            return rest * self.articulation(t)
        if k == "bending_bar":
            return self._bend(rest, self.articulation(t) / self.params["half_extents"][0])
        pivot = np.asarray(self.params["pivot"])
        rotated = _rot_z(rest, self.articulation(t), pivot)
        return np.where(np.asarray(part)[:, None] == 1, rotated, rest)

    def occupancy(self, p, t):
        p = np.asarray(p, float)
        k = self.kind
        if k == "translating_sphere":
            return self.rest_occupancy(p - self.center(t))
        if k == "scaling_sphere":
            return self.rest_occupancy(p / self.articulation(t))
        if k == "bending_bar":
            return self.rest_occupancy(self._unbend(p, self.articulation(t) / self.params["half_extents"][0]))
        q = self.params
        back = _rot_z(p, -self.articulation(t), np.asarray(q["pivot"]))
        return in_box(p, q["box_a_lo"], q["box_a_hi"]) | in_box(back, q["box_b_lo"], q["box_b_hi"])

    @staticmethod
    def _bend(p, kappa):
        # bend the x axis onto a circle of radius 1/kappa centred at (0, 1/kappa, 0)
        if abs(kappa) < 1e-12:
            return p.copy()
        R = 1.0 / kappa
        th = kappa * p[..., 0]
        r = R - p[..., 1]
        out = p.copy()
        out[..., 0] = r * np.sin(th)
        out[..., 1] = R - r * np.cos(th)
        return out

    @staticmethod
    def _unbend(p, kappa):
        if abs(kappa) < 1e-12:
            return p.copy()
        R = 1.0 / kappa
        dx, dy = p[..., 0], R - p[..., 1]
        out = p.copy()
        out[..., 0] = np.arctan2(dx, dy) / kappa
        out[..., 1] = R - np.hypot(dx, dy)
        return out


def make_shape(kind, rng):
    if kind == "translating_sphere":
        r = float(rng.uniform(0.15, 0.2))
        lim = 0.5 - r - 0.02
        start, end = rng.uniform(-lim, lim, size=3), rng.uniform(-lim, lim, size=3)
        return AnalyticShape(kind, {"radius": r, "start": start.tolist(), "end": end.tolist()})
    if kind == "scaling_sphere":
        r = float(rng.uniform(0.15, 0.2))
        return AnalyticShape(kind, {"radius": r, "final_scale": float(rng.uniform(1.3, 0.45 / r))})
    if kind == "bending_bar":
        return AnalyticShape(kind, {"half_extents": [0.35, 0.06, 0.06],
                                    "max_angle": float(rng.uniform(np.pi / 3, np.pi / 2))})
    if kind == "hinge_pair":
        # B pivots about the z-parallel axis through the top-inner edge; every B point
        # keeps x > -0.02 for angles below pi/2, so the boxes never touch.
        return AnalyticShape(kind, {
            "box_a_lo": [-0.4, -0.1, -0.1], "box_a_hi": [-0.02, 0.1, 0.1],
            "box_b_lo": [0.02, -0.1, -0.1], "box_b_hi": [0.4, 0.1, 0.1],
            "pivot": [0.0, 0.1, 0.0],
            "max_angle": float(rng.uniform(np.pi / 4, np.pi / 2 - 0.1)),
        })
    raise ConfigError(f"unknown shape kind {kind!r}; expected one of {KINDS}")


# --- sequences ------------------------------------------------------------------

@dataclass
class SyntheticSequence:
    kind: str
    seed: int
    shape: AnalyticShape
    timestamps: np.ndarray          # (T,)
    angles: np.ndarray              # (T,) articulation parameter per frame
    clouds: np.ndarray              # (T, N, 3) noisy observed surface points
    queries: np.ndarray             # (T, M, 3)
    labels: np.ndarray              # (T, M) uint8
    correspondences: np.ndarray     # (T, K, 3): frame-0 surface points posed at each frame
    noise: float = 0.005
    # stored = (analytic - offset) * scale; identity unless the sequence was rescaled
    offset: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0

    @property
    def T(self):
        return len(self.timestamps)

    def occupancy(self, points, frame):
        raw = np.asarray(points, float) / self.scale + np.asarray(self.offset)
        return self.shape.occupancy(raw, float(self.timestamps[frame]))

    def surface_samples(self, frame, n, seed=0):
        rest, part = self.shape.sample_rest_surface(np.random.default_rng(seed), n)
        raw = self.shape.pose(rest, part, float(self.timestamps[frame]))
        return (raw - np.asarray(self.offset)) * self.scale


def unit_cube_transform(clouds, half=0.5):
    """(offset, scale) that fits every cloud of a sequence into [-half, half]^3.

    Sequences already inside the cube get the identity.
    """
    pts = np.concatenate([np.asarray(c).reshape(-1, 3) for c in clouds])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if np.all(lo >= -half) and np.all(hi <= half):
        return (0.0, 0.0, 0.0), 1.0
    center = (lo + hi) / 2
    return tuple(float(v) for v in center), float(min(1.0, 2 * half / np.max(hi - lo)))


def normalize_sequence(seq):
    offset, scale = unit_cube_transform(seq.clouds)
    if scale == 1.0 and offset == (0.0, 0.0, 0.0):
        return seq
    o = np.asarray(offset)
    f = lambda a: (a / seq.scale + np.asarray(seq.offset) - o) * scale  # noqa: E731
    return replace(seq, clouds=f(seq.clouds), queries=f(seq.queries),
                   correspondences=f(seq.correspondences), offset=offset, scale=scale)


GRID = 2.0 ** -20


def _snap(a):
    """Round to multiples of 2^-20: sums of such values below 1 in magnitude stay
    exact in float32, so translated correspondences survive 32-bit storage bit-exactly."""
    return np.round(np.asarray(a, float) / GRID) * GRID


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def generate(kind, seed=0, T=17, N=300, M=2048, noise=0.005, near_sigma=0.05, bounds=BOUNDS):
    if kind not in KINDS:
        raise ConfigError(f"unknown shape kind {kind!r}; expected one of {KINDS}")
    if T < 2 or N < 10 or M < 100:
        raise ConfigError(f"need T >= 2, N >= 10, M >= 100 (got T={T}, N={N}, M={M})")
    rng = np.random.default_rng(seed)
    shape = make_shape(kind, rng)
    ts = _f32(np.linspace(0.0, 1.0, T))
    clouds, queries, labels, corr = [], [], [], []
    rest_k, part_k = shape.sample_rest_surface(rng, N)
    rest_k = _snap(rest_k)
    for t in ts:
        rest, part = shape.sample_rest_surface(rng, N)
        clouds.append(shape.pose(rest, part, t) + noise * rng.normal(size=(N, 3)))
        n_uni = M // 2
        uni = rng.uniform(bounds[0], bounds[1], size=(n_uni, 3))
        rest, part = shape.sample_rest_surface(rng, M - n_uni)
        near = shape.pose(rest, part, t) + near_sigma * rng.normal(size=(M - n_uni, 3))
        q = _f32(np.concatenate([uni, near]))
        queries.append(q)
        labels.append(shape.occupancy(q, t).astype(np.uint8))
        corr.append(shape.pose(rest_k, part_k, t))
    return SyntheticSequence(
        kind=kind, seed=seed if np.isscalar(seed) else [int(v) for v in seed], shape=shape,
        timestamps=_f32(ts),
        angles=_f32([shape.articulation(t) for t in ts]),
        clouds=_f32(clouds), queries=np.stack(queries), labels=np.stack(labels),
        correspondences=_f32(corr), noise=noise,
    )


def generate_dataset(kind, seed=0, num_sequences=1, T=17, N=300, M=2048, noise=0.005):
    return [generate(kind, [seed, k], T, N, M, noise) if num_sequences > 1 else
            generate(kind, seed, T, N, M, noise)
            for k in range(num_sequences)]


# --- persistence -------------------------------------------------------------------

ARRAYS = {
    "timestamps": "<f4", "angles": "<f4", "clouds": "<f4", "queries": "<f4",
    "labels": "u1", "correspondences": "<f4",
}


def encode_array(a, dtype):
    a = np.ascontiguousarray(np.asarray(a).astype(dtype))
    return {"dtype": dtype, "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(rec, path, name):
    try:
        raw = base64.b64decode(rec["data"], validate=True)
        a = np.frombuffer(raw, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(path, name, str(e)) from None
    return a


def _write_atomic(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def save_dataset(seqs, directory):
    if not seqs:
        raise InputError("refusing to save an empty dataset")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = seqs[0]
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": first.kind,
        "seed": first.seed,
        "T": int(first.T),
        "N": int(first.clouds.shape[1]),
        "M": int(first.queries.shape[1]),
        "bounds": list(BOUNDS),
        "num_sequences": len(seqs),
    }
    for i, s in enumerate(seqs):
        rec = {
            "kind": s.kind, "seed": s.seed, "noise": s.noise, "shape": s.shape.params,
            "offset": list(s.offset), "scale": s.scale,
            "arrays": {name: encode_array(getattr(s, name), dt) for name, dt in ARRAYS.items()},
        }
        _write_atomic(directory / f"seq_{i:03d}.json", json.dumps(rec, sort_keys=True))
    _write_atomic(directory / "meta.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _read_json(path):
    if not path.exists():
        raise ParseError(path, path.name, "file not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(path, path.name, str(e)) from None


def load_dataset(directory):
    directory = Path(directory)
    meta = _read_json(directory / "meta.json")
    for key in ("format_version", "kind", "T", "N", "M", "num_sequences"):
        if key not in meta:
            raise ParseError(directory / "meta.json", key)
    if meta["format_version"] != FORMAT_VERSION:
        raise ParseError(directory / "meta.json", "format_version", f"unsupported {meta['format_version']}")
    seqs = []
    for i in range(int(meta["num_sequences"])):
        path = directory / f"seq_{i:03d}.json"
        rec = _read_json(path)
        for key in ("kind", "shape", "arrays"):
            if key not in rec:
                raise ParseError(path, key)
        arrays = {}
        for name in ARRAYS:
            if name not in rec["arrays"]:
                raise ParseError(path, f"arrays.{name}")
            a = decode_array(rec["arrays"][name], path, f"arrays.{name}")
            arrays[name] = a if name == "labels" else a.astype(np.float64)
        T = len(arrays["timestamps"])
        for name in ("clouds", "queries", "correspondences"):
            if arrays[name].ndim != 3 or arrays[name].shape[0] != T or arrays[name].shape[2] != 3:
                raise ParseError(path, f"arrays.{name}", f"shape {arrays[name].shape}")
        if arrays["labels"].shape != arrays["queries"].shape[:2]:
            raise ParseError(path, "arrays.labels", "does not match queries")
        seqs.append(SyntheticSequence(
            kind=rec["kind"], seed=rec.get("seed"), shape=AnalyticShape(rec["kind"], rec["shape"]),
            noise=rec.get("noise", 0.0), offset=tuple(rec.get("offset", (0.0, 0.0, 0.0))),
            scale=rec.get("scale", 1.0), **arrays))
    return seqs
