"""Reconstruction and correspondence metrics, and whole-sequence evaluation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError

IOU_SAMPLES = 100_000
SURFACE_SAMPLES = 4096


def iou(pred, gt):
    """|pred & gt| / |pred | gt| over binary labels; 1 when both are empty."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise InputError(f"label vectors differ in shape: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def chamfer(a, b):
    """Two-sided mean of unsquared nearest-neighbour distances, halved."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise InputError("chamfer distance needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (d_ab.mean() + d_ba.mean())


def correspondence_error(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InputError(f"prediction and ground truth differ in shape: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


@dataclass
class EvalReport:
    frames: list = field(default_factory=list)
    iou: list = field(default_factory=list)
    chamfer: list = field(default_factory=list)
    corr: list = field(default_factory=list)
    iou_samples: int = IOU_SAMPLES
    surface_samples: int = SURFACE_SAMPLES

    def mean(self, key, frames=None):
        vals = getattr(self, key)
        if frames is not None:
            vals = [v for f, v in zip(self.frames, vals) if f in set(frames)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self):
        out = {}
        for k, f in enumerate(self.frames):
            out[f"frame_{f:03d}.iou"] = self.iou[k]
            out[f"frame_{f:03d}.chamfer"] = self.chamfer[k]
            out[f"frame_{f:03d}.corr"] = self.corr[k]
        out["mean.iou"] = self.mean("iou")
        out["mean.chamfer"] = self.mean("chamfer")
        out["mean.corr"] = self.mean("corr")
        out["count.frames"] = len(self.frames)
        out["count.iou_samples"] = self.iou_samples
        out["count.surface_samples"] = self.surface_samples
        return out

    def to_json(self):
        """JSON text; non-finite values (e.g. Chamfer without meshes) become null."""
        d = {k: (v if not isinstance(v, float) or np.isfinite(v) else None)
             for k, v in self.to_dict().items()}
        return json.dumps(d, indent=1, sort_keys=True) + "\n"


def uniform_queries(n, bounds, seed):
    return np.random.default_rng(seed).uniform(bounds[0], bounds[1], size=(n, 3))


def evaluate(model, seq, frames=None, n_iou=IOU_SAMPLES, n_surface=SURFACE_SAMPLES,
             bounds=(-0.6, 0.6), seed=0, meshes=None, level=0.5):
    """Per-frame IoU, Chamfer and correspondence error of a model against analytic ground truth.

    Chamfer compares mesh vertices (``meshes``, one per frame) with analytic
    surface samples; when no meshes are given it is reported as NaN.
    ``model=None`` evaluates the ground truth against itself.
    """
    frames = list(range(seq.T)) if frames is None else [int(f) for f in frames]
    rep = EvalReport(iou_samples=n_iou, surface_samples=n_surface)
    if model is not None:
        codes, g = model.encode_sequence(seq)
        canon0 = model.canonical(seq.correspondences[0], codes[0])
    for f in frames:
        q = uniform_queries(n_iou, bounds, [seed, f])
        gt = seq.occupancy(q, f)
        surf = seq.surface_samples(f, n_surface, seed=[seed, f, 1])
        if model is None:
            pred, verts, corr_pred = gt, surf, seq.correspondences[f]
        else:
            pred = model.occupancy(q, codes[f], g) >= level
            verts = None if meshes is None else meshes[f].vertices
            corr_pred = model.uncanonical(canon0, codes[f])
        rep.frames.append(f)
        rep.iou.append(float(iou(pred, gt)))
        rep.chamfer.append(float(chamfer(verts, surf)) if verts is not None and len(verts) else float("nan"))
        rep.corr.append(correspondence_error(corr_pred, seq.correspondences[f]))
    return rep
