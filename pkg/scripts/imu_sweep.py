"""Per-modality IMU detection quality as the turbulence variance multiplier grows.

usage: python3 scripts/imu_sweep.py [--n 1000] [--multipliers 2 4 8 16] [--seed 0]
"""

import argparse

import numpy as np

from multimodal_ad.data.synthetic import anomaly_mask, simulate_imu
from multimodal_ad.imu import fit_imu_detector


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000, help="timestamps for training and for each test stream")
    ap.add_argument("--multipliers", type=float, nargs="+", default=[1.5, 2, 4, 8, 16])
    ap.add_argument("--fraction", type=float, default=0.37, help="abnormal share of each test stream")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    t = np.arange(args.n) * 0.1
    det, _ = fit_imu_detector(*simulate_imu(t, np.zeros(args.n, bool), rng))
    print(f"{'mult':>6} {'acc_data':>9} {'acc_mag':>8} {'fn_data':>8} {'fn_mag':>7} {'fn_imu':>7} {'fp_imu':>7}")
    for mult in args.multipliers:
        ab = anomaly_mask(args.n, args.fraction, rng)
        sd, sm = det.sigmas(*simulate_imu(200 + t, ab, rng, variance_multiplier=mult))
        fused = sd + 0.9 * sm >= 1
        print(f"{mult:>6g} {np.mean((sd >= 1) == ab):>9.3f} {np.mean((sm >= 1) == ab):>8.3f} "
              f"{np.sum((sd < 1) & ab):>8d} {np.sum((sm < 1) & ab):>7d} {np.sum(~fused & ab):>7d} "
              f"{np.sum(fused & ~ab):>7d}")


if __name__ == "__main__":
    main()
