"""Executable property checks for the canonical maps and the training gradients.

Each check returns a :class:`CheckResult` carrying the measured error and the
tolerance it was held to. ``run_suite`` strings them together for the CLI.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import data
from . import homeomorphism as hm
from . import model as M
from . import numerics as nx
from . import training as tr

INVERTIBILITY_TOL = 1e-8
CYCLE_TOL = 1e-7
VOLUME_TOL = 0.01
LOGDET_TOL = 1e-4
GRADIENT_TOL = 1e-4
CONTINUITY_RATIO = 1e4      # d(1e-3) may exceed d(1e-5) by at most 100x linear scaling times 100
GRAD_FLOOR = 1e-6           # denominators below this count as absolute error


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: error {self.error:.3e} (tolerance {self.tolerance:.1e}) {self.detail}".rstrip()


def randomize_homeomorphism(H, seed, scale=1.0):
    """Replace every conditioner parameter with a nonzero uniform draw.

    Weights use the fan-in bound 1/sqrt(fan_in) times ``scale``; biases get a
    tenth of that. The result is a generic (non-identity) member of the family.
    """
    rng = np.random.default_rng(seed)
    params = dict(H.params)
    for name in sorted(k for k in params if k.startswith("H.")):
        v = params[name]
        bound = scale / np.sqrt(v.shape[0]) if v.ndim == 2 else 0.1 * scale
        params[name] = rng.uniform(-bound, bound, size=v.shape).astype(v.dtype)
    return dataclasses.replace(H, params=params)


def random_stack(mode, seed, B=6, condition_dim=64, scale=1.0):
    return randomize_homeomorphism(hm.init_homeomorphism(B, condition_dim, mode, seed), seed + 1, scale)


def skip_block(H, k):
    """The same stack with block ``k`` removed; used to inject an inverse fault."""
    return dataclasses.replace(H, blocks=[b for i, b in enumerate(H.blocks) if i != k])


def _inverse(H, fault):
    return H if fault is None else skip_block(H, fault)


def check_invertibility(H, n=10_000, seed=0, fault=None, label=""):
    """max |H^-1(H(p; c); c) - p| over ``n`` (point, code) pairs, one code per point."""
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1, 1, size=(n, 3))
    c = rng.normal(size=(n, H.condition_dim))
    idx = np.arange(n)
    back = hm.map_inverse(_inverse(H, fault), hm.map_forward(H, p, c, idx), c, idx)
    err = float(np.max(np.abs(back - p)))
    return CheckResult(f"invertibility{label}", err, INVERTIBILITY_TOL, err < INVERTIBILITY_TOL)


def check_cycle(H, n=1000, seed=0, label=""):
    """max |F_jk(F_ij(p)) - F_ik(p)| over ``n`` random (p, c_i, c_j, c_k) triples."""
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1, 1, size=(n, 3))
    ci, cj, ck = (rng.normal(size=(n, H.condition_dim)) for _ in range(3))
    idx = np.arange(n)

    def F(x, a, b):
        return hm.map_inverse(H, hm.map_forward(H, x, a, idx), b, idx)

    err = float(np.max(np.abs(F(F(p, ci, cj), cj, ck) - F(p, ci, ck))))
    return CheckResult(f"cycle consistency{label}", err, CYCLE_TOL, err < CYCLE_TOL)


def check_nice_logdet(H, n=1000, seed=0):
    """Largest |log det| of a NICE stack; must be exactly zero."""
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1, 1, size=(n, 3))
    c = rng.normal(size=H.condition_dim)
    err = float(np.max(np.abs(hm.log_det_jacobian(H, p, c))))
    return CheckResult("NICE log-det", err, 0.0, err == 0.0, "(exact zero required)")


def image_volume(H, c, n=1_000_000, seed=0, chunk=250_000):
    """Monte-Carlo volume of H([0,1]^3; c) by rejection through H^-1.

    The sampling box is the bounding box of the forward image of a dense cube
    sample, widened by 5% per side.
    """
    rng = np.random.default_rng(seed)
    probe = np.concatenate([rng.uniform(0, 1, size=(50_000, 3)), data.sample_box_surface(
        rng, 50_000, np.zeros(3), np.ones(3))])
    img = hm.map_forward(H, probe, c)
    lo, hi = img.min(0), img.max(0)
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    box = float(np.prod(hi - lo))
    inside = 0
    for s in range(0, n, chunk):
        q = rng.uniform(lo, hi, size=(min(chunk, n - s), 3))
        pre = hm.map_inverse(H, q, c)
        inside += int(np.count_nonzero(np.all((pre >= 0) & (pre <= 1), axis=1)))
    return box * inside / n


def check_volume(H, n=1_000_000, seed=0):
    c = np.random.default_rng([seed, 2]).normal(size=H.condition_dim)
    vol = image_volume(H, c, n, seed)
    err = abs(vol - 1.0)
    return CheckResult("NICE volume", err, VOLUME_TOL, err < VOLUME_TOL, f"(volume {vol:.4f})")


def logdet_rel_error(H, p, c, h=1e-5):
    """|det exp(analytic) / det(FD Jacobian) - 1| at one point."""
    J = hm.numerical_jacobian(lambda x: hm.map_forward(H, x, c), p, h)
    sign, fd = np.linalg.slogdet(J)
    a = float(hm.log_det_jacobian(H, p, c))
    return abs(np.expm1(a - fd)) if sign > 0 else np.inf


def check_logdet(H, n=100, seed=0):
    rng = np.random.default_rng(seed)
    errs = [logdet_rel_error(H, rng.uniform(-1, 1, 3), rng.normal(size=H.condition_dim))
            for _ in range(n)]
    err = float(max(errs))
    return CheckResult("NVP log-det", err, LOGDET_TOL, err < LOGDET_TOL)


def path_displacement(H, p, ci, cj, step, n_alpha=20):
    """max over the code path c(a) = (1-a) ci + a cj of |F(a + step) - F(a)|."""
    canon = hm.map_forward(H, p, ci)
    worst = 0.0
    for a in np.linspace(0.0, 1.0 - step, n_alpha):
        x0 = hm.map_inverse(H, canon, (1 - a) * ci + a * cj)
        b = a + step
        x1 = hm.map_inverse(H, canon, (1 - b) * ci + b * cj)
        worst = max(worst, float(np.max(np.linalg.norm(x1 - x0, axis=-1))))
    return worst


def check_continuity(H, n=200, seed=0, label=""):
    """Output displacement shrinks with the code step: d(1e-3) <= 1e4 * d(1e-5)."""
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1, 1, size=(n, 3))
    ci, cj = rng.normal(size=(2, H.condition_dim))
    big = path_displacement(H, p, ci, cj, 1e-3)
    small = path_displacement(H, p, ci, cj, 1e-5)
    ok = big <= CONTINUITY_RATIO * small and small <= big and np.isfinite(big)
    ratio = big / small if small > 0 else 0.0
    return CheckResult(f"continuity{label}", ratio, CONTINUITY_RATIO, bool(ok),
                       f"(d(1e-3)={big:.2e}, d(1e-5)={small:.2e})")


# --- gradient suite -----------------------------------------------------------------

TINY = dict(blocks=2, patterns=[0, 2], code_dim=8, geometry_dim=8, conditioner_width=8,
            encoder_width=8, decoder_width=8, decoder_layers=2, m_max=32)


def tiny_model(seed, encoder="st", mode="nvp"):
    """Width-8, two-block model with every parameter drawn nonzero."""
    m = M.init_model(M.ModelConfig(encoder=encoder, flow_mode=mode, seed=seed, **TINY))
    rng = np.random.default_rng([seed, 3])
    for name in sorted(m.params):
        v = m.params[name]
        bound = 1.0 / np.sqrt(v.shape[0]) if v.ndim == 2 else 0.1
        v[...] = rng.uniform(-bound, bound, size=v.shape)
    return m


def tiny_sequence(seed):
    return data.generate("translating_sphere", seed, T=3, N=12, M=100)


TINY_TRAINING = tr.TrainingConfig(frames_per_iter=2, queries_per_frame=16, corr_per_frame=6)


def _losses(model, P, seq, seed):
    _, l_r, l_c = tr.iteration_graph(model, P, seq, TINY_TRAINING, np.random.default_rng(seed))
    return {"L_R": l_r, "L_C": l_c}


def gradient_errors(model, seq, seed=0, per_tensor=None, h=1e-5):
    """Worst relative autodiff-vs-FD error per (loss, parameter group).

    A parameter group is the owning part of a tensor (E, H, G, D). With
    ``per_tensor`` set, only that many random entries of each tensor are
    differenced; otherwise every entry is.
    """
    analytic = {}
    for key in ("L_R", "L_C"):
        tape = nx.Tape()
        P = tape.watch(model.params)
        analytic[key] = nx.backward(tape, _losses(model, P, seq, seed)[key])
        tape.clear()

    def value(key):
        return float(_losses(model, model.const_params(), seq, seed)[key].value)

    rng = np.random.default_rng([seed, 4])
    worst = {}
    for name in sorted(model.params):
        arr = model.params[name]
        flat = arr.reshape(-1)
        picks = np.arange(flat.size) if per_tensor is None else \
            rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            plus, minus = {}, {}
            flat[i] = orig + h
            plus = {k: value(k) for k in analytic}
            flat[i] = orig - h
            minus = {k: value(k) for k in analytic}
            flat[i] = orig
            for k in analytic:
                fd = (plus[k] - minus[k]) / (2 * h)
                a = analytic[k][name].reshape(-1)[i]
                rel = abs(a - fd) / max(abs(a), abs(fd), GRAD_FLOOR)
                group = (k, name.split(".")[0])
                worst[group] = max(worst.get(group, 0.0), rel)
    return worst


def check_gradients(draws=10, seed=0, per_tensor=3):
    worst = {}
    for d in range(draws):
        m = tiny_model(seed + d)
        for g, e in gradient_errors(m, tiny_sequence(seed + d), seed + d, per_tensor).items():
            worst[g] = max(worst.get(g, 0.0), e)
    err = max(worst.values())
    detail = " ".join(f"{k}/{g}={e:.1e}" for (k, g), e in sorted(worst.items()))
    return CheckResult("gradients", err, GRADIENT_TOL, err < GRADIENT_TOL, f"({detail})")


# --- suite -------------------------------------------------------------------------

def run_suite(H=None, fault=None, seed=0, grad_draws=10, volume_samples=1_000_000, log=print):
    """All property checks. ``H`` is an extra stack to check (e.g. from a model file).

    ``fault`` names a block index to drop from every inverse, for fault injection.
    """
    nvp = random_stack("nvp", seed)
    nice = random_stack("nice", seed + 10)
    results = []

    def run(r):
        results.append(r)
        if log is not None:
            log(r.line())

    if H is not None:
        run(check_invertibility(H, seed=seed, fault=fault, label=" (model)"))
        run(check_cycle(H, seed=seed, label=" (model)"))
        run(check_continuity(H, seed=seed, label=" (model)"))
    run(check_invertibility(nvp, seed=seed, fault=fault, label=" (random NVP)"))
    run(check_invertibility(nice, seed=seed, fault=fault, label=" (random NICE)"))
    run(check_cycle(nvp, seed=seed, label=" (random NVP)"))
    run(check_nice_logdet(nice, seed=seed))
    run(check_volume(nice, n=volume_samples, seed=seed))
    run(check_logdet(nvp, seed=seed))
    run(check_continuity(nvp, seed=seed, label=" (random NVP)"))
    run(check_gradients(draws=grad_draws, seed=seed))
    return results
