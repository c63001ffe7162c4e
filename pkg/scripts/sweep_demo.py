"""Sensitivity sweeps on a synthetic corpus: how the regression fit moves
as the full-graph weight threshold and the labeling percentile vary.

Usage: python scripts/sweep_demo.py [workdir]
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from netdiv.config import PipelineConfig
from netdiv.pipeline import sweep, write_sweep_csv
from netdiv.synth import SynthConfig, generate_corpus, write_corpus


def main():
    workdir = sys.argv[1] if len(sys.argv) > 1 else "sweep_run"
    corpus = generate_corpus(
        SynthConfig(
            n_areas=12,
            users_per_area=20,
            messages_per_user=120,
            label_rates=0.1,
            locality={"knowledge": (0.0, 20.0), "support": (0.0, 20.0)},
            outcome_intercept=0.2,
            outcome_betas={"knowledge": 1.0, "support": -0.55},
            outcome_noise_sd=0.1,
            seed=3,
        )
    )
    paths = write_corpus(corpus, os.path.join(workdir, "corpus"))
    cfg = PipelineConfig(
        messages=paths["messages"],
        activity=paths["activity"],
        areas=paths["areas"],
        out_dir=os.path.join(workdir, "out"),
        alpha=corpus.exact_alpha["knowledge"],
        min_weight=2,
        min_users=1,
        seed=5,
    )
    rows = []
    rows += sweep(cfg, "min_weight", ["1", "2", "3", "4", "5", "6"])
    rows += sweep(cfg, "alpha", ["0.75", "0.9", "0.95", str(cfg.alpha)])
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_sweep_csv(rows, os.path.join(cfg.out_dir, "sweep.csv"))
    for r in rows:
        print(f"{r.parameter}={r.value:<22} {r.model:<45} r2_adj={r.r2_adj:.3f}")


if __name__ == "__main__":
    main()
