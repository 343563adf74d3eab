"""Pilot run used to calibrate the end-to-end training thresholds.

    python scripts/pilot_train.py --iters 2000 --out runs/pilot
"""
import argparse
import json
import time
from pathlib import Path

from cadex import data, metrics
from cadex import model as M
from cadex import training as tr

HOLDOUT = (3, 8, 13)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--kind", default="translating_sphere")
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--sequences", type=int, default=1)
    ap.add_argument("--no-corr", action="store_true")
    ap.add_argument("--encoder", default="st")
    ap.add_argument("--mode", default="nvp")
    ap.add_argument("--precision", default="f64")
    ap.add_argument("--out", default="runs/pilot")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seqs = data.generate_dataset(args.kind, seed=args.seed, num_sequences=args.sequences)
    model = M.init_model(M.ModelConfig(encoder=args.encoder, flow_mode=args.mode,
                                       precision=args.precision, seed=args.seed))
    cfg = tr.TrainingConfig(iterations=args.iters, seed=args.seed, holdout_frames=HOLDOUT,
                            w_c=0.0 if args.no_corr else 1.0)
    t0 = time.time()
    with open(out / "train.log", "w") as log:
        def cb(it, lr, lc, tot):
            log.write(f"{it} {lr:.6f} {lc:.6f} {tot:.6f}\n")
            if it % 100 == 0:
                log.flush()
                print(f"it {it:5d}  L_R {lr:.4f}  L_C {lc:.4f}  ({time.time() - t0:.0f}s)", flush=True)
        model, rep = tr.train(model, seqs, cfg, log=cb)
    train_time = time.time() - t0
    M.save_model(model, out / "model.json")
    ev = metrics.evaluate(model, seqs[0], n_iou=metrics.IOU_SAMPLES)
    summary = {
        "train_seconds": train_time,
        "final_L_R": rep.recon, "final_L_C": rep.corr,
        "heldout_iou": ev.mean("iou", HOLDOUT), "heldout_corr": ev.mean("corr", HOLDOUT),
        "all_iou": ev.mean("iou"), "all_corr": ev.mean("corr"),
        "per_frame_iou": ev.iou, "per_frame_corr": ev.corr,
        "args": vars(args),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps({k: v for k, v in summary.items() if not k.startswith("per_frame")}, indent=1))


if __name__ == "__main__":
    main()
