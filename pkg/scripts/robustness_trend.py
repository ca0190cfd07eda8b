"""Train (or reuse) the desk models and tabulate the robustness comparison.

Per seed this trains pixel_only, concat and discrete_only with position
embeddings, plus pixel_only and concat without them. It writes one CSV row per
member and prints the gaps against pixel_only and the position-embedding drops.

    python scripts/robustness_trend.py --cache .cache/acceptance --seeds 0,1,2
"""
import argparse
import csv
import sys

import numpy as np

from drvit.eval import mce
from drvit.experiments import Workspace, accuracy, score

FUSIONS = ("pixel_only", "concat", "discrete_only")
COLUMNS = ("seed", "fusion", "use_pos_emb", "clean", "held_out", "texture_swap_3", "checkpoint")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cache", default=".cache/acceptance")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="robustness_trend.csv")
    ap.add_argument("--mce", action="store_true", help="also score the full corruption grid")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    ws = Workspace(args.cache, log=lambda m: print(m, file=sys.stderr, flush=True))

    rows = []
    for seed in seeds:
        members = [(f, True) for f in FUSIONS] + [("pixel_only", False), ("concat", False)]
        for fusion, pos in members:
            rep = score(ws, fusion, seed, pos)
            rows.append({"seed": seed, "fusion": fusion, "use_pos_emb": pos,
                         "clean": rep.top1["clean"], "held_out": rep.top1["held_out"],
                         "texture_swap_3": accuracy(rep, "texture_swap_3"),
                         "checkpoint": rep.checkpoint_hash})
            print(" ".join(f"{k}={rows[-1][k]}" for k in COLUMNS[:-1]), flush=True)

    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, COLUMNS)
        w.writeheader()
        w.writerows(rows)

    def mean(fusion, pos, key):
        return float(np.mean([r[key] for r in rows if r["fusion"] == fusion and r["use_pos_emb"] == pos]))

    for key in ("held_out", "texture_swap_3"):
        base = mean("pixel_only", True, key)
        for fusion in FUSIONS[1:]:
            print(f"{key}: {fusion} - pixel_only = {100 * (mean(fusion, True, key) - base):+.1f} points")
    for fusion in ("pixel_only", "concat"):
        drops = []
        for seed in seeds:
            w = [r for r in rows if r["seed"] == seed and r["fusion"] == fusion]
            on = next(r for r in w if r["use_pos_emb"])["held_out"]
            off = next(r for r in w if not r["use_pos_emb"])["held_out"]
            drops.append(100 * (on - off) / on)
        print(f"pos_emb drop on held_out, {fusion}: " + ", ".join(f"{d:.1f}%" for d in drops))

    if args.mce:
        for seed in seeds:
            base = score(ws, "pixel_only", seed, full_grid=True)
            model = score(ws, "concat", seed, full_grid=True)
            print(f"seed {seed}: concat mCE vs pixel_only twin = {mce(model.errors, base.errors):.2f}")


if __name__ == "__main__":
    main()
