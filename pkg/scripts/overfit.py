"""Run the seeded overfit experiments and print one row per seed.

    python3 scripts/overfit.py            # seeds 0-4
    python3 scripts/overfit.py 0 3        # chosen seeds
"""
import argparse

from cascadedose import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("seeds", nargs="*", type=int, default=[0, 1, 2, 3, 4])
    args = ap.parse_args()
    print("seed  seg_dice  stage2_mae  e2e_mae  e2e/stage2  seconds")
    for seed in args.seeds:
        r = experiments.run_all(seed)
        secs = sum(r.seconds.values())
        print(f"{seed:4d}  {r.seg_dice:8.3f}  {r.stage2_mae:10.3f}  {r.e2e_mae:7.3f}  {r.e2e_ratio:10.3f}  {secs:7.0f}",
              flush=True)


if __name__ == "__main__":
    main()
