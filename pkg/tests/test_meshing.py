import numpy as np
import pytest

from cadex import meshing as mc
from cadex import model as M
from cadex import checks
from cadex import data
from cadex.errors import ConfigError, NoSurfaceError, ParseError


def sphere_grid(R=64, r=0.4, bounds=(-0.6, 0.6)):
    pts = mc.grid_points(R, bounds)
    occ = (np.linalg.norm(pts, axis=1) <= r).astype(float).reshape(R, R, R)
    return mc.OccupancyGrid(occ, bounds)


@pytest.fixture(scope="module")
def sphere():
    return mc.marching_cubes(sphere_grid(), 0.5)


@pytest.mark.parametrize("fill", [0.0, 1.0])
def test_constant_grid_is_empty(fill):
    m = mc.marching_cubes(mc.OccupancyGrid(np.full((8, 8, 8), fill)), 0.5)
    assert len(m.vertices) == 0 and len(m.faces) == 0


def test_sphere_geometry_and_topology(sphere):
    cell = 1.2 / 63
    rad = np.linalg.norm(sphere.vertices, axis=1)
    assert np.all(np.abs(rad - 0.4) <= 2 * cell)
    assert sphere.euler_characteristic() == 2


def test_sphere_is_closed_manifold(sphere):
    e = np.sort(sphere.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_sphere_normals_point_outwards(sphere):
    v = sphere.vertices[sphere.faces]
    signed = np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6
    assert signed == pytest.approx(4 / 3 * np.pi * 0.4 ** 3, rel=0.03)


def test_smooth_field_vertices_on_level(rng):
    pts = mc.grid_points(32, (-1, 1))
    field = np.linalg.norm(pts - [0.1, 0, 0], axis=1).reshape(32, 32, 32)
    m = mc.marching_cubes(mc.OccupancyGrid(1.0 - field, (-1, 1)), 0.5)
    assert np.max(np.abs(np.linalg.norm(m.vertices - [0.1, 0, 0], axis=1) - 0.5)) < 0.01


def test_counter_increments():
    before = mc.MC_CALLS
    mc.marching_cubes(mc.OccupancyGrid(np.zeros((8, 8, 8))))
    assert mc.MC_CALLS == before + 1


def test_meshing_config_validation():
    for bad in (dict(resolution=4), dict(level=1.5), dict(bounds=(1, 0))):
        with pytest.raises(ConfigError):
            mc.MeshingConfig(**bad).validate()


class _SphereField(M.CadexModel):
    """Identity-map model whose occupancy is an analytic sphere."""

    def occupancy(self, points, code, g, chunk=65536):
        return (np.linalg.norm(points, axis=1) <= 0.3).astype(float)


@pytest.fixture(scope="module")
def identity_model():
    base = M.init_model(M.ModelConfig(**checks.TINY))
    return _SphereField(base.config, base.params, base.H, base.encoder)


def test_extract_sequence_shares_faces(identity_model):
    seq = data.generate("translating_sphere", 0, T=17, N=20, M=100)
    ms = mc.extract_sequence(identity_model, seq, mc.MeshingConfig(resolution=24))
    assert ms.mc_calls == 1 and len(ms.frames) == 17
    assert all(f.faces is ms.frames[0].faces for f in ms.frames)
    assert all(np.array_equal(f.vertices, ms.canonical.vertices) for f in ms.frames)


def test_extract_sequence_trivial_field_raises():
    m = M.init_model(M.ModelConfig(**checks.TINY))
    for k in m.params:
        if k.startswith("D."):
            m.params[k][...] = 0.0
    seq = data.generate("translating_sphere", 0, T=3, N=20, M=100)
    with pytest.raises(NoSurfaceError):
        mc.extract_sequence(m, seq, mc.MeshingConfig(resolution=12))


def test_unit_triangle_obj(tmp_path):
    tri = mc.TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
    p = mc.export_obj(tri, tmp_path / "t.obj")
    lines = p.read_text().splitlines()
    assert sum(l.startswith("v ") for l in lines) == 3
    assert [l for l in lines if l.startswith("f")] == ["f 1 2 3"]


def test_empty_mesh_obj(tmp_path):
    p = mc.export_obj(mc.TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), tmp_path / "e.obj")
    assert p.read_text() == mc.HEADER


def test_obj_round_trip(tmp_path, sphere):
    back = mc.read_obj(mc.export_obj(sphere, tmp_path / "s.obj"))
    assert np.max(np.abs(back.vertices - sphere.vertices)) < 1e-8
    assert np.array_equal(back.faces, sphere.faces)


def test_obj_sequence_names(tmp_path, sphere):
    paths = mc.export_obj_sequence([sphere, sphere], tmp_path / "seq")
    assert [p.name for p in paths] == ["frame_0000.obj", "frame_0001.obj"]
    assert mc.face_section(paths[0]) == mc.face_section(paths[1])


def test_obj_parse_error(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 zero\n")
    with pytest.raises(ParseError):
        mc.read_obj(p)


def test_obj_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="cannot write"):
        mc.export_obj(mc.TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), blocker / "x.obj")


def test_trained_mesh_tracks_sphere_centre(trained_with_corr, sphere_sequences):
    seq = sphere_sequences[0]
    ms = mc.extract_sequence(trained_with_corr["model"], seq, mc.MeshingConfig())
    for i, frame in enumerate(ms.frames):
        centre = seq.shape.center(float(seq.timestamps[i]))
        assert np.linalg.norm(frame.vertices.mean(0) - centre) < 0.05, i
