"""Command-line entry point: gen, train, reconstruct, eval, check.

Every verb assembles a :class:`RunConfig` from defaults, an optional JSON
``--config`` file and explicit flags (flags win), validates all of it, and only
then touches the filesystem.

Exit codes: 0 ok, 1 I/O, 2 usage, 3 divergence, 4 empty surface, 5 property failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import checks, data, meshing, metrics
from . import model as M
from . import training as tr
from .errors import ConfigError, DivergenceError, NoSurfaceError, ParseError

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DIVERGED, EXIT_EMPTY, EXIT_PROPERTY = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    """Bad flag or config value; the message names the offending flag."""


@dataclass
class GenerationConfig:
    kind: str = "translating_sphere"
    T: int = 17
    N: int = 300
    M: int = 2048
    sequences: int = 1
    noise: float = 0.005

    def validate(self):
        if self.kind not in data.KINDS:
            raise ConfigError(f"--kind must be one of {', '.join(data.KINDS)}; got {self.kind!r}")
        if self.T < 2 or self.N < 10 or self.M < 100 or self.sequences < 1:
            raise ConfigError("--T must be >= 2, --N >= 10, --M >= 100 and --sequences >= 1")
        if self.noise < 0:
            raise ConfigError("--noise must be >= 0")
        return self


@dataclass
class RunConfig:
    seed: int = 0
    data: str | None = None
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    training: tr.TrainingConfig = field(default_factory=tr.TrainingConfig)
    meshing: meshing.MeshingConfig = field(default_factory=meshing.MeshingConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)

    def validate(self):
        for part in (self.model, self.training, self.meshing, self.generation):
            part.validate()
        return self

    def to_dict(self):
        d = asdict(self)
        d["training"]["holdout_frames"] = list(self.training.holdout_frames)
        d["meshing"]["bounds"] = list(self.meshing.bounds)
        return d


_SECTIONS = {"model": M.ModelConfig, "training": tr.TrainingConfig,
             "meshing": meshing.MeshingConfig, "generation": GenerationConfig}

# flag -> (section, field); section None means a top-level RunConfig field
_FLAG_MAP = {
    "seed": (None, "seed"), "data": (None, "data"),
    "encoder": ("model", "encoder"), "mode": ("model", "flow_mode"), "blocks": ("model", "blocks"),
    "code_dim": ("model", "code_dim"), "geometry_dim": ("model", "geometry_dim"),
    "precision": ("model", "precision"),
    "iters": ("training", "iterations"), "lr": ("training", "lr"),
    "frames_per_iter": ("training", "frames_per_iter"),
    "queries_per_frame": ("training", "queries_per_frame"),
    "corr_per_frame": ("training", "corr_per_frame"), "holdout": ("training", "holdout_frames"),
    "resolution": ("meshing", "resolution"), "level": ("meshing", "level"),
    "kind": ("generation", "kind"), "T": ("generation", "T"), "N": ("generation", "N"),
    "M": ("generation", "M"), "sequences": ("generation", "sequences"), "noise": ("generation", "noise"),
}


def _section(cls, values, where):
    known = {f.name for f in fields(cls)}
    bad = sorted(set(values) - known)
    if bad:
        raise UsageError(f"--config: unknown key(s) {bad} in section {where!r}")
    return cls(**values)


def build_config(args):
    """Defaults <- JSON config file <- flags; raises UsageError / OSError before any side effect."""
    raw = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"--config: {args.config} is not valid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise UsageError("--config: top level must be a JSON object")
    bad = sorted(set(raw) - set(_SECTIONS) - {"seed", "data"})
    if bad:
        raise UsageError(f"--config: unknown key(s) {bad}")
    cfg = RunConfig(seed=int(raw.get("seed", 0)), data=raw.get("data"),
                    **{name: _section(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()})
    seed_given = getattr(args, "seed", None) is not None or "seed" in raw
    for flag, (sec, name) in _FLAG_MAP.items():
        v = getattr(args, flag, None)
        if v is None:
            continue
        setattr(cfg if sec is None else getattr(cfg, sec), name, v)
    if getattr(args, "no_corr", False):
        cfg.training.w_c = 0.0
    if seed_given:
        # one seed drives model init and batch sampling unless the config pins them
        if "seed" not in raw.get("model", {}):
            cfg.model.seed = cfg.seed
        if "seed" not in raw.get("training", {}):
            cfg.training.seed = cfg.seed
    cfg.training.holdout_frames = tuple(int(f) for f in cfg.training.holdout_frames)
    cfg.meshing.bounds = tuple(cfg.meshing.bounds)
    try:
        return cfg.validate()
    except ConfigError as e:
        raise UsageError(str(e)) from None


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise UsageError(f"--{n} is required")


def _with_data(cfg):
    if not cfg.data:
        raise UsageError("--data is required (or set 'data' in --config)")
    return cfg


def _load_inputs(args, cfg, need_model=True):
    seqs = data.load_dataset(cfg.data)
    if not 0 <= args.seq < len(seqs):
        raise UsageError(f"--seq {args.seq} out of range for {len(seqs)} sequence(s)")
    model = M.load_model(args.model) if need_model else None
    if model is not None and args.precision is not None and args.precision != model.config.precision:
        model.config.precision = args.precision
        for k, v in model.params.items():
            model.params[k] = v.astype(model.dtype)
    return seqs, model


def _parse_frames(text, T):
    if text is None:
        return list(range(T))
    try:
        frames = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--frames must be a comma-separated list of integers, got {text!r}") from None
    if not frames or any(not 0 <= f < T for f in frames):
        raise UsageError(f"--frames must lie in 0..{T - 1}")
    return frames


# --- verbs ----------------------------------------------------------------------------

def cmd_gen(args):
    _require(args, "out")
    cfg = build_config(args)
    g = cfg.generation
    seqs = data.generate_dataset(g.kind, seed=cfg.seed, num_sequences=g.sequences,
                                 T=g.T, N=g.N, M=g.M, noise=g.noise)
    data.save_dataset(seqs, args.out)
    print(f"wrote {len(seqs)} sequence(s) of kind {g.kind}: T={g.T} N={g.N} M={g.M} -> {args.out}")
    return EXIT_OK


def format_log_line(it, l_r, l_c, total):
    return f"{it} {l_r:.10g} {l_c:.10g} {total:.10g}\n"


def cmd_train(args):
    _require(args, "out")
    cfg = _with_data(build_config(args))
    seqs = data.load_dataset(cfg.data)
    for s in seqs:
        if max(cfg.training.holdout_frames, default=-1) >= s.T:
            raise UsageError(f"--holdout frame beyond sequence length {s.T}")
    out = Path(args.out)
    model = M.init_model(cfg.model)
    lines = ["# iteration L_R L_C total\n"]

    def log(it, l_r, l_c, total):
        lines.append(format_log_line(it, l_r, l_c, total))
        if args.verbose and it % 100 == 0:
            print(lines[-1], end="", flush=True)

    try:
        model, rep = tr.train(model, seqs, cfg.training, log=log)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        if e.last_finite is not None:
            it, l_r, l_c, total = e.last_finite
            print(f"last finite losses at iteration {it}: L_R={l_r:.6g} L_C={l_c:.6g} total={total:.6g}",
                  file=sys.stderr)
        return EXIT_DIVERGED
    M.save_model(model, out / "model.json", cfg.to_dict())
    _write_text(out / "train.log", "".join(lines))
    print(f"trained {model.iterations} iterations: L_R={rep.recon:.4f} L_C={rep.corr:.4f} -> {out / 'model.json'}")
    return EXIT_OK


def cmd_reconstruct(args):
    _require(args, "model", "out")
    cfg = _with_data(build_config(args))
    seqs, model = _load_inputs(args, cfg)
    try:
        ms = meshing.extract_sequence(model, seqs[args.seq], cfg.meshing)
    except NoSurfaceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EMPTY
    out = Path(args.out)
    meshing.export_obj_sequence(ms.frames, out)
    meshing.export_obj(ms.canonical, out / "canonical.obj")
    summary = {"mc_calls": ms.mc_calls, "frames": len(ms.frames),
               "vertices": int(len(ms.canonical.vertices)), "faces": int(len(ms.canonical.faces)),
               "resolution": cfg.meshing.resolution, "level": cfg.meshing.level}
    _write_text(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(ms.frames)} frame meshes + canonical.obj ({summary['vertices']} vertices, "
          f"{summary['faces']} faces, marching cubes calls: {ms.mc_calls}) -> {out}")
    return EXIT_OK


def cmd_eval(args):
    _require(args, "out")
    if not args.oracle:
        _require(args, "model")
    cfg = _with_data(build_config(args))
    seqs, model = _load_inputs(args, cfg, need_model=not args.oracle)
    seq = seqs[args.seq]
    frames = _parse_frames(args.frames, seq.T)
    meshes = None
    if model is not None and not args.no_mesh:
        try:
            meshes = meshing.extract_sequence(model, seq, cfg.meshing).frames
        except NoSurfaceError:
            meshes = None
    rep = metrics.evaluate(model, seq, frames, n_iou=args.iou_samples, n_surface=args.surface_samples,
                           seed=cfg.seed, meshes=meshes, level=cfg.meshing.level)
    _write_text(args.out, rep.to_json())
    print(f"mean IoU {rep.mean('iou'):.4f}  Chamfer {rep.mean('chamfer'):.4g}  "
          f"corr {rep.mean('corr'):.4g} over {len(frames)} frame(s) -> {args.out}")
    return EXIT_OK


def cmd_check(args):
    cfg = build_config(args)
    H = M.load_model(args.model).H if args.model else M.init_model(cfg.model).H
    label = "model file" if args.model else "fresh model"
    print(f"checking {label} plus random NVP/NICE stacks (seed {cfg.seed})")
    results = checks.run_suite(H, fault=args.inject_fault, seed=cfg.seed, grad_draws=args.grad_draws,
                               volume_samples=args.volume_samples)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED properties: {', '.join(failed)}", file=sys.stderr)
        return EXIT_PROPERTY
    print(f"all {len(results)} properties hold")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _csv_ints(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p):
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON run config; explicit flags override it")
    p.add_argument("--out")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--precision", choices=("f32", "f64"))


def build_parser():
    ap = _Parser(prog="cadex", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic sequence dataset")
    _common(p)
    p.add_argument("--kind", choices=data.KINDS)
    p.add_argument("--T", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--sequences", type=int)
    p.add_argument("--noise", type=float)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset")
    _common(p)
    p.add_argument("--iters", type=int)
    p.add_argument("--no-corr", action="store_true", help="drop the correspondence loss (w_C = 0)")
    p.add_argument("--encoder", choices=("pf", "st", "set"))
    p.add_argument("--mode", choices=("nvp", "nice"))
    p.add_argument("--blocks", type=int)
    p.add_argument("--code-dim", type=int)
    p.add_argument("--geometry-dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--frames-per-iter", type=int)
    p.add_argument("--queries-per-frame", type=int)
    p.add_argument("--corr-per-frame", type=int)
    p.add_argument("--holdout", type=_csv_ints, help="comma-separated frames excluded from supervision")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("reconstruct", help="extract a mesh sequence with shared connectivity")
    _common(p)
    p.add_argument("--seq", type=int, default=0)
    p.add_argument("--resolution", type=int)
    p.add_argument("--level", type=float)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("eval", help="per-frame IoU, Chamfer and correspondence error")
    _common(p)
    p.add_argument("--seq", type=int, default=0)
    p.add_argument("--frames", help="comma-separated frame indices (default: all)")
    p.add_argument("--oracle", action="store_true", help="evaluate the ground truth against itself")
    p.add_argument("--iou-samples", type=int, default=metrics.IOU_SAMPLES)
    p.add_argument("--surface-samples", type=int, default=metrics.SURFACE_SAMPLES)
    p.add_argument("--resolution", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--no-mesh", action="store_true", help="skip mesh extraction; Chamfer is reported as null")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("check", help="run the property-check suite")
    _common(p)
    p.add_argument("--grad-draws", type=int, default=10)
    p.add_argument("--volume-samples", type=int, default=1_000_000)
    p.add_argument("--inject-fault", type=int, metavar="BLOCK",
                   help="drop this block from every inverse (the checks must then fail)")
    p.set_defaults(fn=cmd_check)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"cadex {args.verb}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError) as e:
        print(f"cadex {args.verb}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
