"""The full representation: deformation encoder, canonical map, geometry encoder, decoder.

All parameters live in one flat ``name -> array`` dict shared by the parts;
name prefixes (E., H., G., D.) say which part owns a tensor.
"""
from __future__ import annotations

import base64
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import canonical_shape as cs
from . import encoders as enc
from . import homeomorphism as hm
from . import numerics as nx
from .errors import ConfigError, ParseError

MODEL_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    encoder: str = "st"
    flow_mode: str = "nvp"
    blocks: int = 6
    code_dim: int = 64
    geometry_dim: int = 128
    conditioner_width: int = 128
    conditioner_layers: int = 2
    encoder_width: int = 128
    decoder_width: int = 256
    decoder_layers: int = 4
    s_clamp: float = 5.0
    m_max: int = cs.M_MAX
    seed: int = 0
    precision: str = "f64"
    patterns: list | None = None

    def validate(self):
        if self.encoder not in enc.KINDS:
            raise ConfigError(f"encoder must be one of {enc.KINDS}, got {self.encoder!r}")
        if self.flow_mode not in hm.MODES:
            raise ConfigError(f"flow mode must be one of {hm.MODES}, got {self.flow_mode!r}")
        if self.patterns is not None:
            if len(self.patterns) != self.blocks:
                raise ConfigError("patterns must list one active axis per block")
        elif self.blocks < 3:
            raise ConfigError(f"need at least 3 coupling blocks, got {self.blocks}")
        for name in ("code_dim", "geometry_dim", "conditioner_width", "encoder_width",
                     "decoder_width", "m_max"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.s_clamp <= 0:
            raise ConfigError("s_clamp must be positive")
        nx.resolve_dtype(self.precision)
        return self


@dataclass
class CadexModel:
    config: ModelConfig
    params: dict
    H: hm.Homeomorphism
    encoder: enc.Encoder
    iterations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return nx.resolve_dtype(self.config.precision)

    def copy(self):
        params = {k: v.copy() for k, v in self.params.items()}
        H = hm.Homeomorphism.from_meta(self.H.to_meta(), params)
        E = enc.Encoder(self.encoder.kind, params, self.encoder.code_dim, self.encoder.width)
        return CadexModel(self.config, params, H, E, self.iterations, dict(self.extra))

    # --- inference helpers (no tape) ---
    def const_params(self):
        return {k: nx.Tensor(v) for k, v in self.params.items()}

    def codes(self, seq):
        return codes_graph(self, self.const_params(), seq).value

    def geometry(self, seq, codes, seed=0):
        obs = cs.aggregate_graph(self.H, self.const_params(), self._clouds(seq), codes,
                                 self.config.m_max, np.random.default_rng(seed))
        return cs.geometry_graph(self.params, obs).value

    def encode_sequence(self, seq, seed=0):
        c = self.codes(seq)
        return c, self.geometry(seq, c, seed)

    def canonical(self, points, code):
        return hm.map_forward(self.H, np.asarray(points, self.dtype), code)

    def uncanonical(self, points, code):
        return hm.map_inverse(self.H, np.asarray(points, self.dtype), code)

    def occupancy(self, points, code, g, chunk=65536):
        """Deformed-frame occupancy probability, evaluated in chunks."""
        points = np.asarray(points, self.dtype).reshape(-1, 3)
        out = np.empty(len(points))
        for s in range(0, len(points), chunk):
            uvw = self.canonical(points[s:s + chunk], code)
            out[s:s + chunk] = nx.sigmoid(cs.logits_graph(self.params, uvw, g)).value
        return out

    def _clouds(self, seq):
        return [np.asarray(c, self.dtype) for c in seq.clouds]


def init_model(config=None):
    cfg = (config or ModelConfig()).validate()
    dtype = nx.resolve_dtype(cfg.precision)
    H = hm.init_homeomorphism(cfg.blocks, cfg.code_dim, cfg.flow_mode, cfg.seed,
                              cfg.conditioner_width, cfg.conditioner_layers, cfg.s_clamp, dtype,
                              cfg.patterns)
    E = enc.init_encoder(cfg.encoder, cfg.code_dim, cfg.encoder_width, cfg.seed, dtype)
    params = {}
    params.update(E.params)
    params.update(H.params)
    params.update(cs.init_geometry_encoder(cfg.geometry_dim, cfg.encoder_width, cfg.seed, dtype))
    params.update(cs.init_decoder(cfg.geometry_dim, cfg.decoder_width, cfg.decoder_layers, cfg.seed, dtype))
    H.params = params
    E.params = params
    return CadexModel(cfg, params, H, E)


def codes_graph(model, P, seq):
    clouds = model._clouds(seq)
    return enc.encode_graph(model.encoder, P, clouds, seq.timestamps, getattr(seq, "angles", None))


# --- model file ---------------------------------------------------------------

def _encode(a):
    a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def save_model(model, path, run_config=None):
    """JSON metadata plus base64 little-endian float64 parameter arrays, written atomically."""
    rec = {
        "format_version": MODEL_FORMAT_VERSION,
        "model_config": asdict(model.config),
        "run_config": run_config or {},
        "architecture": {"homeomorphism": model.H.to_meta(), "encoder": model.encoder.to_meta()},
        "iterations": model.iterations,
        "training_seed": model.extra.get("training_seed"),
        "params": {k: _encode(v) for k, v in sorted(model.params.items())},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(rec, f, sort_keys=True)
    os.replace(tmp, path)


def load_model(path):
    path = Path(path)
    if not path.exists():
        raise ParseError(path, "model file", "file not found")
    try:
        rec = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(path, "json", str(e)) from None
    for key in ("format_version", "model_config", "architecture", "params"):
        if key not in rec:
            raise ParseError(path, key)
    try:
        cfg = ModelConfig(**rec["model_config"]).validate()
    except TypeError as e:
        raise ParseError(path, "model_config", str(e)) from None
    dtype = nx.resolve_dtype(cfg.precision)
    params = {}
    for name, a in rec["params"].items():
        try:
            raw = base64.b64decode(a["data"], validate=True)
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(a["shape"]).astype(dtype)
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(path, f"params.{name}", str(e)) from None
    arch = rec["architecture"]
    H = hm.Homeomorphism.from_meta(arch["homeomorphism"], params)
    e = arch["encoder"]
    E = enc.Encoder(e["kind"], params, int(e["code_dim"]), int(e["width"]))
    m = CadexModel(cfg, params, H, E, int(rec.get("iterations", 0)))
    m.extra["training_seed"] = rec.get("training_seed")
    m.extra["run_config"] = rec.get("run_config", {})
    return m
