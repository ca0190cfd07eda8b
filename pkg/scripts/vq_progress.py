"""Summarise a VQ pretraining run: reconstruction drop and codebook use.

Works on a cache directory written by drvit.experiments.Workspace (which also
keeps per-step losses) or on a plain ``pretrain-vq`` output directory (windowed
metrics only).

    python scripts/vq_progress.py .cache/acceptance/vq
"""
import argparse
import csv
import os


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir")
    args = ap.parse_args()

    with open(os.path.join(args.run_dir, "vq_metrics.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        print(f"step {int(r['step']):5d}  recon {float(r['recon']):.5f}  perplexity {float(r['perplexity']):6.2f}")

    hist_path = os.path.join(args.run_dir, "vq_history.csv")
    if os.path.exists(hist_path):
        with open(hist_path, newline="") as fh:
            recon = [float(r["recon"]) for r in csv.DictReader(fh)]
        first, last = recon[9], sum(recon[-10:]) / 10
        print(f"recon at step 10 {first:.5f}, mean of last 10 steps {last:.5f}, ratio {last / first:.3f}")
    else:
        first, last = float(rows[0]["recon"]), float(rows[-1]["recon"])
        print(f"recon first window {first:.5f}, last window {last:.5f}, ratio {last / first:.3f}")
    seconds = os.path.join(args.run_dir, "seconds.txt")
    if os.path.exists(seconds):
        print(f"wall time {open(seconds).read().strip()} s")


if __name__ == "__main__":
    main()
