"""Marching cubes, sequence extraction with shared connectivity, and OBJ I/O.

A sequence is meshed once: the frame-0 occupancy field is polygonized, its
vertices are pushed into canonical space, and every other frame is that
canonical mesh pulled back through its own inverse map. All frames therefore
share one face array.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _mc_tables as tables
from . import homeomorphism as hm
from .errors import ConfigError, NoSurfaceError, ParseError

_CORNERS = np.array(tables.CORNERS)
_EDGE_TABLE = np.array(tables.EDGE_TABLE)
_TRI_TABLE = np.full((256, 16), -1, dtype=np.int64)
for _i, _row in enumerate(tables.TRI_TABLE):
    _TRI_TABLE[_i, :len(_row)] = _row
_EDGE_BASE = np.array([np.minimum(_CORNERS[a], _CORNERS[b]) for a, b in tables.EDGES])
_EDGE_AXIS = np.array([int(np.argmax(np.abs(_CORNERS[a] - _CORNERS[b]))) for a, b in tables.EDGES])

# incremented on every marching_cubes call; extract_sequence reports the delta
MC_CALLS = 0


@dataclass
class MeshingConfig:
    resolution: int = 64
    level: float = 0.5
    bounds: tuple = (-0.6, 0.6)

    def validate(self):
        if self.resolution < 8:
            raise ConfigError(f"resolution must be >= 8, got {self.resolution}")
        if not 0.0 < self.level < 1.0:
            raise ConfigError(f"surface level must lie in (0, 1), got {self.level}")
        if not self.bounds[0] < self.bounds[1]:
            raise ConfigError("bounds must satisfy min < max")
        return self


@dataclass
class OccupancyGrid:
    values: np.ndarray          # (R, R, R), indexed [x, y, z]
    bounds: tuple = (-0.6, 0.6)

    @property
    def resolution(self):
        return self.values.shape[0]

    @property
    def spacing(self):
        return (self.bounds[1] - self.bounds[0]) / (self.resolution - 1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray        # (V, 3)
    faces: np.ndarray           # (F, 3) int

    @property
    def n_edges(self):
        if len(self.faces) == 0:
            return 0
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return len(np.unique(e, axis=0))

    def euler_characteristic(self):
        return len(self.vertices) - self.n_edges + len(self.faces)


def grid_points(resolution, bounds):
    ax = np.linspace(bounds[0], bounds[1], resolution)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([X, Y, Z], axis=-1).reshape(-1, 3)


def marching_cubes(grid, level=0.5):
    """Polygonize {value = level} with the 256-case tables.

    Vertices on a shared grid edge are welded; with the corner numbering in
    ``_mc_tables`` the table winding gives normals pointing from the
    inside (value > level) outwards.
    """
    global MC_CALLS
    MC_CALLS += 1
    v = np.asarray(grid.values, dtype=np.float64)
    R = v.shape[0]
    below = v < level
    n = R - 1
    idx = np.zeros((n, n, n), dtype=np.int64)
    for k, (dx, dy, dz) in enumerate(_CORNERS):
        idx |= below[dx:dx + n, dy:dy + n, dz:dz + n].astype(np.int64) << k
    cells = np.nonzero(_EDGE_TABLE[idx])
    if len(cells[0]) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cell_xyz = np.stack(cells, axis=1)
    rows = _TRI_TABLE[idx[cells], :15].reshape(-1, 5, 3)
    valid = rows[:, :, 0] >= 0
    tri_cell = np.nonzero(valid)[0]
    tri_edges = rows[valid]                                      # (F, 3) local edge ids
    base = cell_xyz[tri_cell][:, None, :] + _EDGE_BASE[tri_edges]   # (F, 3, 3)
    axis = _EDGE_AXIS[tri_edges]
    gid = ((base[..., 0] * R + base[..., 1]) * R + base[..., 2]) * 3 + axis
    uniq, inv = np.unique(gid.reshape(-1), return_inverse=True)
    faces = inv.reshape(-1, 3)
    lin, ax = np.divmod(uniq, 3)
    i0 = np.stack(np.unravel_index(lin, v.shape), axis=1)
    i1 = i0 + np.eye(3, dtype=np.int64)[ax]
    v0 = v[tuple(i0.T)]
    v1 = v[tuple(i1.T)]
    t = (level - v0) / (v1 - v0)
    verts = grid.bounds[0] + (i0 + t[:, None] * (i1 - i0)) * grid.spacing
    return TriangleMesh(verts, faces)


@dataclass
class MeshSequence:
    frames: list                # TriangleMesh per frame, all sharing one faces array
    canonical: TriangleMesh
    mc_calls: int


def _batched_pullback(model, canon_verts, codes):
    T = len(codes)
    V = len(canon_verts)
    pts = np.tile(canon_verts, (T, 1))
    out = hm.map_inverse(model.H, pts.astype(model.dtype), np.asarray(codes, model.dtype),
                         frame_index=np.repeat(np.arange(T), V))
    return out.reshape(T, V, 3)


def extract_sequence(model, seq, cfg=None, codes=None, g=None):
    """One marching-cubes pass on frame 0, then H and H^-1 to every frame."""
    cfg = (cfg or MeshingConfig()).validate()
    if codes is None:
        codes, g = model.encode_sequence(seq)
    start = MC_CALLS
    pts = grid_points(cfg.resolution, cfg.bounds)
    occ = model.occupancy(pts, codes[0], g).reshape((cfg.resolution,) * 3)
    mesh0 = marching_cubes(OccupancyGrid(occ, tuple(cfg.bounds)), cfg.level)
    if len(mesh0.faces) == 0:
        raise NoSurfaceError("no surface extracted: the frame-0 field never crosses the level")
    faces = mesh0.faces
    canon = model.canonical(mesh0.vertices, codes[0])
    verts = _batched_pullback(model, canon, codes) if len(canon) else np.zeros((len(codes), 0, 3))
    frames = [TriangleMesh(verts[i], faces) for i in range(len(codes))]
    return MeshSequence(frames, TriangleMesh(canon, faces), MC_CALLS - start)


# --- OBJ ---------------------------------------------------------------------

HEADER = "# cadex mesh\n"


def format_obj(mesh):
    lines = [HEADER]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in np.asarray(mesh.vertices, dtype=np.float64)]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in np.asarray(mesh.faces)]
    return "".join(lines)


def export_obj(mesh, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w") as f:
            f.write(format_obj(mesh))
        os.replace(tmp, path)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e
    return path


def export_obj_sequence(meshes, directory):
    directory = Path(directory)
    return [export_obj(m, directory / f"frame_{i:04d}.obj") for i, m in enumerate(meshes)]


def read_obj(path):
    verts, faces = [], []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
            except ValueError:
                raise ParseError(path, f"line {n}", line.strip()) from None
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def face_section(path):
    with open(path) as f:
        return "".join(line for line in f if line.startswith("f "))
