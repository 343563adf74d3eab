"""Losses and the end-to-end training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import canonical_shape as cs
from . import homeomorphism as hm
from . import numerics as nx
from .errors import ConfigError, DivergenceError, InputError, NumericError
from .model import codes_graph

LOGIT_CLAMP = 30.0


@dataclass
class TrainingConfig:
    w_r: float = 1.0
    w_c: float = 1.0
    l_norm: int = 2
    frames_per_iter: int = 4
    queries_per_frame: int = 512
    corr_per_frame: int = 128
    iterations: int = 2000
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    holdout_frames: tuple = ()
    divergence_threshold: float = 1e4

    def validate(self):
        if not self.w_r > 0:
            raise ConfigError("w_r must be > 0")
        if self.w_c < 0:
            raise ConfigError("w_c must be >= 0")
        if self.l_norm not in (1, 2):
            raise ConfigError("l_norm must be 1 or 2")
        if self.frames_per_iter < 1 or self.queries_per_frame < 1 or self.corr_per_frame < 1:
            raise ConfigError("batch sizes must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if 0 in self.holdout_frames:
            raise ConfigError("frame 0 is the correspondence source and cannot be held out")
        return self


@dataclass
class OccupancySampleSet:
    frames: list        # frame indices
    points: list        # per frame (M_i, 3)
    labels: list        # per frame (M_i,) in {0, 1}


@dataclass
class CorrespondencePairSet:
    source: np.ndarray  # (K, 3) points at frame i
    target: np.ndarray  # (K, 3) ground truth at frame j
    i: np.ndarray       # (K,)
    j: np.ndarray       # (K,)


@dataclass
class LossReport:
    recon: float = 0.0
    corr: float = 0.0
    total: float = 0.0
    history: list = field(default_factory=list)   # (iteration, L_R, L_C, total)


# --- loss graphs -------------------------------------------------------------------

def bce_with_logits(logits, labels):
    """Per-element BCE in the stable softplus(x) - y*x form, logits clamped to +-30."""
    x = nx.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    return nx.sub(nx.softplus(x), nx.mul(x, np.asarray(labels, dtype=x.dtype)))


def reconstruction_graph(model, P, codes, g, samples):
    """Mean over frames of the mean BCE over that frame's queries."""
    per_frame = []
    for f, pts, lab in zip(samples.frames, samples.points, samples.labels):
        pts = np.asarray(pts, model.dtype)
        if len(pts) < 1:
            raise InputError(f"frame {f} has no occupancy queries")
        uvw = hm.forward_graph(model.H, P, pts, nx.getitem(codes, f))
        uvw.name = "canonical"
        per_frame.append(nx.mean(bce_with_logits(cs.logits_graph(P, uvw, g), lab)))
    return nx.mul(nx.tsum(nx.stack(per_frame)), 1.0 / len(per_frame)), per_frame


def batched_reconstruction_graph(model, P, codes, g, frames, points, labels):
    """Equal-size frames in one batched pass; same value as :func:`reconstruction_graph`."""
    F, Q = len(frames), points.shape[1]
    uvw = hm.forward_graph(model.H, P, points.reshape(F * Q, 3), codes, np.repeat(frames, Q))
    uvw.name = "canonical"
    bce = bce_with_logits(cs.logits_graph(P, uvw, g), labels.reshape(-1))
    per_frame = nx.mean(nx.reshape(bce, (F, Q)), axis=1)
    return nx.mean(per_frame), per_frame


def correspondence_graph(model, P, codes, pairs, l_norm=2):
    """Mean over pairs of ||H^-1(H(p_i; c_i); c_j) - p_j||_l."""
    src = np.asarray(pairs.source, model.dtype)
    canon = hm.forward_graph(model.H, P, src, codes, np.asarray(pairs.i))
    canon.name = "canonical"
    pred = hm.inverse_graph(model.H, P, canon, codes, np.asarray(pairs.j))
    diff = nx.sub(pred, np.asarray(pairs.target, model.dtype))
    dist = nx.norm(diff, axis=1) if l_norm == 2 else nx.tsum(nx.absolute(diff), axis=1)
    return nx.mean(dist)


def _codes2d(codes):
    codes = nx.as_tensor(codes)
    return codes if codes.ndim == 2 else nx.reshape(codes, (1, -1))


# --- array-level losses ------------------------------------------------------------------

def reconstruction_loss(model, seq, samples, codes=None, g=None):
    if codes is None:
        codes, g = model.encode_sequence(seq)
    loss, per_frame = reconstruction_graph(model, model.const_params(), _codes2d(codes), g, samples)
    for f, v in zip(samples.frames, per_frame):
        if not np.isfinite(v.value):
            raise NumericError(f"reconstruction loss is NaN at frame {f}")
    return float(loss.value)


def correspondence_loss(model, seq, pairs, l_norm=2, codes=None):
    if codes is None:
        codes = model.codes(seq)
    return float(correspondence_graph(model, model.const_params(), _codes2d(codes), pairs, l_norm).value)


def first_frame_pairs(seq, frames, idx):
    """Pairs from frame-0 surface points to each listed frame."""
    frames = [int(f) for f in frames if f != 0]
    K = len(idx)
    corr = np.asarray(seq.correspondences)
    return CorrespondencePairSet(
        source=np.tile(corr[0][idx], (len(frames), 1)),
        target=np.concatenate([corr[f][idx] for f in frames]) if frames else np.zeros((0, 3)),
        i=np.zeros(K * len(frames), dtype=int),
        j=np.repeat(frames, K).astype(int),
    )


# --- training ---------------------------------------------------------------------

def iteration_graph(model, P, seq, cfg, rng):
    """Sample one training batch and build the loss graph.

    Returns (total, L_R, L_C, canonical tensors) where L_C is None when disabled.
    """
    T = seq.T
    eligible = np.array([f for f in range(T) if f not in set(cfg.holdout_frames)])
    k = min(cfg.frames_per_iter, len(eligible))
    frames = np.sort(rng.choice(eligible, size=k, replace=False))
    M = seq.queries.shape[1]
    q_idx = np.stack([rng.choice(M, size=min(cfg.queries_per_frame, M), replace=False) for _ in frames])
    points = np.stack([seq.queries[f][q] for f, q in zip(frames, q_idx)]).astype(model.dtype)
    labels = np.stack([seq.labels[f][q] for f, q in zip(frames, q_idx)])

    codes = codes_graph(model, P, seq)
    obs = cs.aggregate_graph(model.H, P, model._clouds(seq), codes, model.config.m_max, rng)
    obs.name = "canonical"
    g = cs.geometry_graph(P, obs)
    l_r, _ = batched_reconstruction_graph(model, P, codes, g, frames, points, labels)

    l_c = None
    targets = [f for f in frames if f != 0]
    if cfg.w_c > 0 and targets:
        K = seq.correspondences.shape[1]
        idx = rng.choice(K, size=min(cfg.corr_per_frame, K), replace=False)
        l_c = correspondence_graph(model, P, codes, first_frame_pairs(seq, targets, idx), cfg.l_norm)
    total = nx.mul(l_r, cfg.w_r)
    if l_c is not None:
        total = nx.add(total, nx.mul(l_c, cfg.w_c))
    return total, l_r, l_c


def train(model, dataset, cfg=None, log=None):
    """Adam on w_R * L_R + w_C * L_C; mutates and returns ``model`` with a LossReport."""
    cfg = (cfg or TrainingConfig()).validate()
    if not dataset:
        raise InputError("empty dataset")
    for s in dataset:
        if max(cfg.holdout_frames, default=-1) >= s.T:
            raise ConfigError("holdout frame index beyond sequence length")
    rng = np.random.default_rng(cfg.seed)
    state = nx.AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    report = LossReport()
    last = None
    for it in range(cfg.iterations):
        seq = dataset[int(rng.integers(len(dataset)))]
        tape = nx.Tape()
        P = tape.watch(model.params)
        total, l_r, l_c = iteration_graph(model, P, seq, cfg, rng)
        lr_v = float(l_r.value)
        lc_v = float(l_c.value) if l_c is not None else 0.0
        tot_v = float(total.value)
        if not all(math.isfinite(v) for v in (lr_v, lc_v, tot_v)) or tot_v > cfg.divergence_threshold:
            tape.clear()
            raise DivergenceError(
                f"training diverged at iteration {it}: L_R={lr_v}, L_C={lc_v}, total={tot_v}",
                last_finite=last)
        grads = nx.backward(tape, total)
        tape.clear()
        nx.adam_step(model.params, grads, state)
        model.iterations += 1
        last = (it, lr_v, lc_v, tot_v)
        report.history.append(last)
        if log is not None:
            log(it, lr_v, lc_v, tot_v)
    if report.history:
        _, report.recon, report.corr, report.total = report.history[-1]
    model.extra["training_seed"] = cfg.seed
    return model, report
