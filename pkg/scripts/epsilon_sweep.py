"""Frame accuracy of a trained AngleNet under FGSM and PGD across perturbation budgets.

usage: python3 scripts/epsilon_sweep.py runs/default/models/anglenet.bin [--pairs 200]
"""

import argparse

import numpy as np

from multimodal_ad.adversarial import AttackConfig, evaluate_attack, fgsm_batch, pgd_batch
from multimodal_ad.data.serialization import load_anglenet
from multimodal_ad.data.synthetic import make_rotation_pairs


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("model", help="AngleNet weight file")
    ap.add_argument("--pairs", type=int, default=200)
    ap.add_argument("--epsilons", type=float, nargs="+", default=[0.0, 0.01, 0.03, 0.1, 0.25])
    ap.add_argument("--iterations", type=int, default=20)
    ap.add_argument("--seed", type=int, default=12345)
    args = ap.parse_args()

    model, _ = load_anglenet(args.model)
    refs, tests, angles = make_rotation_pairs(args.pairs, seed=args.seed)
    print(f"{'epsilon':>8} {'clean':>7} {'fgsm':>7} {'pgd':>7}")
    for eps in args.epsilons:
        cfg = AttackConfig(epsilon=eps, iterations=args.iterations)
        f = evaluate_attack(model, refs, tests, angles, lambda m, r, t, y: fgsm_batch(m, r, t, y, eps), "fgsm")
        p = evaluate_attack(model, refs, tests, angles, lambda m, r, t, y: pgd_batch(m, r, t, y, cfg), "pgd")
        print(f"{eps:>8g} {f.clean_accuracy:>7.3f} {f.attacked_accuracy:>7.3f} {p.attacked_accuracy:>7.3f}")


if __name__ == "__main__":
    main()
