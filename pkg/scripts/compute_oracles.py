"""Recompute the frozen oracle values used by the tests.

Every number is derived without calling the package: closed-form arithmetic
cross-checked by plain numpy Monte Carlo.

    python scripts/compute_oracles.py   # rewrites tests/oracles/frozen.json
"""

import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "tests" / "oracles" / "frozen.json"


def half_overlap_iou():
    # unit cubes [−.5,.5]^3 and [0,1]×[−.5,.5]^2: intersection 0.5, union 1.5
    exact = 0.5 / 1.5
    rng = np.random.default_rng(2024)
    p = rng.uniform([-1, -1, -1], [1.5, 1, 1], size=(1_000_000, 3))
    a = np.all(np.abs(p) < 0.5, axis=1)
    b = np.all(np.abs(p - [0.5, 0, 0]) < 0.5, axis=1)
    mc = (a & b).sum() / (a | b).sum()
    assert abs(mc - exact) < 2e-3
    return exact, float(mc)


def box_corner_distance():
    return float(np.hypot(1.0, 1.0))


def noise_sigma_at(z, sigma0=0.002):
    return sigma0 * (1 + (z - 0.4) ** 2 / 0.16)


def main():
    exact, mc = half_overlap_iou()
    frozen = {
        "half_overlap_iou": exact,
        "half_overlap_iou_monte_carlo_1e6": mc,
        "box_corner_distance_2_2_0": box_corner_distance(),
        "noise_sigma_z0.8": noise_sigma_at(0.8),
        "bce_half_label1": float(np.log(2.0)),
    }
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(frozen, indent=2, sort_keys=True) + "\n")
    print(json.dumps(frozen, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
