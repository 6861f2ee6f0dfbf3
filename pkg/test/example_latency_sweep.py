"""
Complete example: tune the controller, run the acceptance episode,
then find how much one-way channel delay the loop tolerates
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.config import ExperimentConfig  # noqa: E402
from src.experiment import latency_sweep, run_experiment, tune_from_config  # noqa: E402


def run_latency_study():
    config = ExperimentConfig()

    print("=" * 60)
    print("TUNING")
    print("=" * 60)
    result = tune_from_config(config, verbose=True)
    print(f"Slowest closed-loop pole: {result.max_real:.3f} 1/s")

    print("\n" + "=" * 60)
    print("ACCEPTANCE EPISODE")
    print("=" * 60)
    _, metrics = run_experiment(config, result.gains, verbose=True)
    for key, value in metrics.to_dict(degrees=True).items():
        print(f"  {key:15s} {value}")

    print("\n" + "=" * 60)
    print("LATENCY SWEEP")
    print("=" * 60)
    sweep = latency_sweep(config, result.gains,
                          delays_ms=(0, 5, 10, 15, 20, 30, 40, 50, 75, 100, 150, 200),
                          verbose=True)

    print("\n" + "=" * 60)
    print("SUMMARY")
    print("=" * 60)
    print(f"Stable up to:  {sweep.stable_up_to} ms one-way")
    print(f"First fall at: {sweep.first_fall} ms one-way")
    for p in sweep.points:
        settle = "-" if p.metrics.settling_time is None else f"{p.metrics.settling_time:.2f} s"
        print(f"  {p.delay_ms:6.1f} ms  {p.metrics.status.value:10s} "
              f"peak {p.metrics.peak_phi:.4f} rad  settle {settle}  misses {p.metrics.miss_count}")
    return sweep


if __name__ == "__main__":
    run_latency_study()
