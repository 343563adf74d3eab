import json

import numpy as np
import pytest

from cadex import checks
from cadex import model as M
from cadex.errors import ConfigError, ParseError


@pytest.fixture(scope="module")
def trained_like():
    return checks.tiny_model(8), checks.tiny_sequence(8)


def test_save_load_bit_identical(tmp_path, trained_like):
    m, seq = trained_like
    M.save_model(m, tmp_path / "m.json", {"note": "x"})
    back = M.load_model(tmp_path / "m.json")
    assert back.H.patterns == m.H.patterns
    c1, g1 = m.encode_sequence(seq)
    c2, g2 = back.encode_sequence(seq)
    assert np.array_equal(c1, c2) and np.array_equal(g1, g2)
    q = seq.queries[1][:200]
    assert np.array_equal(m.occupancy(q, c1[1], g1), back.occupancy(q, c2[1], g2))
    assert back.extra["run_config"] == {"note": "x"}


def test_save_is_deterministic(tmp_path, trained_like):
    m, _ = trained_like
    M.save_model(m, tmp_path / "a.json")
    M.save_model(m, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_load_errors(tmp_path, trained_like):
    with pytest.raises(ParseError):
        M.load_model(tmp_path / "missing.json")
    p = tmp_path / "m.json"
    M.save_model(trained_like[0], p)
    rec = json.loads(p.read_text())
    del rec["params"]
    p.write_text(json.dumps(rec))
    with pytest.raises(ParseError, match="params"):
        M.load_model(p)


def test_fresh_model_canonical_map_is_identity(rng):
    m = M.init_model(M.ModelConfig(**checks.TINY))
    p = rng.normal(size=(50, 3))
    assert np.array_equal(m.canonical(p, rng.normal(size=8)), p)


def test_config_validation():
    with pytest.raises(ConfigError):
        M.ModelConfig(encoder="rnn").validate()
    with pytest.raises(ConfigError):
        M.ModelConfig(blocks=2).validate()
    with pytest.raises(ConfigError):
        M.ModelConfig(precision="f16").validate()


def test_f32_model_runs(rng):
    m = M.init_model(M.ModelConfig(precision="f32", **checks.TINY))
    seq = checks.tiny_sequence(0)
    c, g = m.encode_sequence(seq)
    assert c.dtype == np.float32
    assert m.occupancy(seq.queries[0][:10], c[0], g).shape == (10,)
