import json
import os

import numpy as np
import pytest

from cadex import cli, data
from cadex import meshing as mc
from cadex import model as M

SMALL = ["--T", "4", "--N", "40", "--M", "200"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen", "--kind", "translating_sphere", "--seed", 7, "--out", d / "d", *SMALL) == 0
    assert run("train", "--data", d / "d", "--iters", 3, "--seed", 1, "--out", d / "r",
               "--blocks", 3, "--code-dim", 8) == 0
    # shift the decoder bias so the frame-0 field crosses the surface level
    m = M.load_model(d / "r" / "model.json")
    seq = data.load_dataset(d / "d")[0]
    c, g = m.encode_sequence(seq)
    occ = m.occupancy(mc.grid_points(16, (-0.6, 0.6)), c[0], g)
    last = max(int(k.split(".l")[1].split(".")[0]) for k in m.params if k.startswith("D.l"))
    m.params[f"D.l{last}.b"] -= np.log(np.median(occ) / (1 - np.median(occ)))
    M.save_model(m, d / "r" / "surfaced.json")
    return d


def test_gen_layout(workdir):
    assert sorted(os.listdir(workdir / "d")) == ["meta.json", "seq_000.json"]


def test_gen_bad_kind(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        run("gen", "--kind", "nosuch", "--out", tmp_path / "x")
    assert e.value.code == 2
    assert "--kind" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_bad_config_value_exits_2_without_output(tmp_path, capsys):
    assert run("gen", "--out", tmp_path / "x", "--T", 1) == 2
    assert "--T" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_gen_is_byte_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("gen", "--kind", "bending_bar", "--seed", 3, "--out", tmp_path / name, *SMALL) == 0
    for f in ("meta.json", "seq_000.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_deterministic(workdir, tmp_path):
    assert run("train", "--data", workdir / "d", "--iters", 3, "--seed", 1, "--out", tmp_path / "r",
               "--blocks", 3, "--code-dim", 8) == 0
    assert (tmp_path / "r" / "model.json").read_bytes() == (workdir / "r" / "model.json").read_bytes()


def test_no_corr_log(workdir, tmp_path):
    assert run("train", "--data", workdir / "d", "--iters", 3, "--out", tmp_path / "r", "--no-corr",
               "--blocks", 3, "--code-dim", 8) == 0
    rows = [l.split() for l in (tmp_path / "r" / "train.log").read_text().splitlines() if not l.startswith("#")]
    assert len(rows) == 3 and all(float(r[2]) == 0.0 for r in rows)


def test_config_file_and_flag_precedence(workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"blocks": 4, "code_dim": 8}, "training": {"iterations": 2}}))
    assert run("train", "--data", workdir / "d", "--config", cfg, "--iters", 1, "--out", tmp_path / "r") == 0
    rec = json.loads((tmp_path / "r" / "model.json").read_text())
    assert rec["iterations"] == 1 and len(rec["architecture"]["homeomorphism"]["blocks"]) == 4
    assert rec["run_config"]["training"]["iterations"] == 1


def test_unknown_config_key(workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"depth": 3}}))
    assert run("train", "--data", workdir / "d", "--config", cfg, "--out", tmp_path / "r") == 2
    assert not (tmp_path / "r").exists()


def test_missing_data_is_io_error(tmp_path):
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "r") == 1


def test_divergence_exit_code(workdir, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"training": {"divergence_threshold": 0.65}, "model": {"blocks": 3, "code_dim": 8}}))
    code = run("train", "--data", workdir / "d", "--config", cfg, "--iters", 200, "--out", tmp_path / "r")
    err = capsys.readouterr().err
    assert code == 3 and "diverged" in err
    assert not (tmp_path / "r").exists()


def test_reconstruct_outputs(workdir, tmp_path):
    out = tmp_path / "m"
    assert run("reconstruct", "--model", workdir / "r" / "surfaced.json", "--data", workdir / "d",
               "--out", out, "--resolution", 16) == 0
    frames = sorted(p for p in os.listdir(out) if p.startswith("frame_"))
    assert frames == [f"frame_{i:04d}.obj" for i in range(4)]
    sections = {mc.face_section(out / f) for f in frames + ["canonical.obj"]}
    assert len(sections) == 1
    counts = {len(mc.read_obj(out / f).vertices) for f in frames + ["canonical.obj"]}
    assert len(counts) == 1
    assert json.loads((out / "summary.json").read_text())["mc_calls"] == 1


def test_reconstruct_empty_surface(workdir, tmp_path):
    # level 0.999 is never reached by a barely trained model
    assert run("reconstruct", "--model", workdir / "r" / "model.json", "--data", workdir / "d",
               "--out", tmp_path / "m", "--resolution", 8, "--level", 0.999) == 4


def test_eval_oracle(workdir, tmp_path):
    assert run("eval", "--oracle", "--data", workdir / "d", "--out", tmp_path / "e.json",
               "--iou-samples", 2000) == 0
    rep = json.loads((tmp_path / "e.json").read_text())
    for f in range(4):
        assert rep[f"frame_{f:03d}.iou"] == 1.0
        assert rep[f"frame_{f:03d}.chamfer"] == 0.0
        assert rep[f"frame_{f:03d}.corr"] == 0.0


def test_eval_model_means(workdir, tmp_path):
    assert run("eval", "--model", workdir / "r" / "model.json", "--data", workdir / "d",
               "--out", tmp_path / "e.json", "--iou-samples", 2000, "--no-mesh") == 0
    rep = json.loads((tmp_path / "e.json").read_text())
    vals = [rep[f"frame_{f:03d}.iou"] for f in range(4)]
    assert abs(rep["mean.iou"] - sum(vals) / 4) < 1e-12
    assert rep["mean.chamfer"] is None


def test_eval_unreadable_model(workdir, tmp_path):
    assert run("eval", "--model", tmp_path / "none.json", "--data", workdir / "d", "--out", tmp_path / "e.json") == 1


def test_check_fresh_model_passes(capsys):
    assert run("check", "--grad-draws", 1, "--volume-samples", 200_000) == 0
    out = capsys.readouterr().out
    assert "PASS NICE log-det: error 0.000e+00" in out


def test_check_fault_injection(workdir, capsys):
    code = run("check", "--model", workdir / "r" / "model.json", "--grad-draws", 1,
               "--volume-samples", 100_000, "--inject-fault", 0)
    assert code == 5
    assert "invertibility" in capsys.readouterr().err
