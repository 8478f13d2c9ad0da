"""Pilot for the exact-field generative check.

Runs the oracle on independently seeded charge sets and prior draws (seeds
disjoint from the acceptance run) and freezes a sliced-W1 threshold:

    threshold = 1.25 * max(pilot W1), rounded up to 1e-3

The result is written to ``configs/oracle_threshold.json``; the acceptance
test reads that file and never recomputes it.
"""

import json
import math
import sys
from pathlib import Path

from pfjm.harness.config import load_config
from pfjm.harness.experiments import oracle_trace

PILOT_SEEDS = (101, 102, 103, 104, 105)
ROOT = Path(__file__).resolve().parents[1]


def main():
    out = ROOT / "configs" / "oracle_threshold.json"
    w1 = {}
    for seed in PILOT_SEEDS:
        cfg = load_config(ROOT / "configs" / "oracle.toml", seed=seed)
        w1[seed] = oracle_trace(cfg)["sliced_w1"]
        print(f"seed {seed}: sliced W1 {w1[seed]:.6f}", flush=True)
    threshold = math.ceil(1.25 * max(w1.values()) * 1000) / 1000
    record = {"pilot_seeds": list(PILOT_SEEDS), "pilot_w1": w1, "rule": "1.25 * max, ceil to 1e-3",
              "threshold": threshold}
    out.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"threshold {threshold} -> {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
