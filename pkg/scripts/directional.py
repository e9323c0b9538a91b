"""OSAA vs source-only vs no-selection on the synthetic distant-domain benchmark.

    python scripts/directional.py --seeds 5 --out results/directional.json
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

from osaa import benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=benchmark.DIRECTIONAL_CONFIG.epochs)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--jobs", type=int, help="worker processes (default: one per CPU)")
    p.add_argument("--out", type=Path)
    args = p.parse_args()

    config = replace(benchmark.DIRECTIONAL_CONFIG, epochs=args.epochs)
    res = benchmark.directional(range(args.seeds), config=config, data_seed=args.data_seed, jobs=args.jobs,
                                progress=lambda mode, seed, f1: print(f"seed {seed} {mode:13s} macro-F1 {f1:.4f}",
                                                                      flush=True))
    for mode, mean in res.means().items():
        print(f"{mode:13s} mean {mean:.4f}")
    gaps = res.margins()
    print(f"OSAA - source-only {gaps['over_source_only']:+.4f} (need +0.10), "
          f"OSAA - no-selection {gaps['over_no_selection']:+.4f} (need +0.05), {res.seconds / 60:.1f} min")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({"spec": benchmark.DIRECTIONAL_SPEC.__dict__, "config": config.to_dict(),
                                        **res.to_dict()}, indent=2) + "\n")


if __name__ == "__main__":
    main()
