"""Overfit a discriminator on 50 agents and attack it, with and without privacy.

Usage: python demos/membership_attack.py [--seed 0] [--sigma 1.0]
"""
import argparse

import numpy as np

from diarygan import experiments


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=1.0)
    args = p.parse_args()
    for label, sigma in (("non-private", None), (f"sigma={args.sigma}", args.sigma)):
        rep = experiments.mia_run(args.seed, sigma)
        print(f"{label}: AUC {rep.auc:.3f}, peaks {rep.peaks}")
        print(f"  mean score train {np.mean(rep.train_scores):.3f} "
              f"validation {np.mean(rep.validation_scores):.3f}")


if __name__ == "__main__":
    main()
