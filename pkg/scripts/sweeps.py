"""Keep-portion surface and loss-weight sensitivity on the small synthetic scenario.

    python scripts/sweeps.py --out results/sweeps --jobs 4

Rows are appended to keep_portion.csv and loss_weights.csv as cells finish;
rerunning with the same --out resumes where it stopped.
"""
import argparse
from pathlib import Path

from osaa import benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, default=1, help="seeds per cell")
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()

    res = benchmark.sweeps(args.out, n_seeds=args.seeds, jobs=args.jobs, progress=lambda row: print(
        f"{row['axis']:8s} p_S={row['p_source']} p_M={row['p_intermediate']} l1={row['lambda1']} "
        f"l2={row['lambda2']}: {row['status']} mean {row['mean']}", flush=True))
    print(f"{len(res.keep_rows)} keep cells, {len(res.weight_rows)} weight cells, {res.n_diverged} diverged, "
          f"{res.seconds / 60:.1f} min; CSVs in {args.out}")


if __name__ == "__main__":
    main()
