"""Train on the synthetic oracle, then check what the fine-tuned loss buys us.

1. run the pipeline (library -> pairs -> pretraining -> KTO fine-tuning)
2. correlate avg_loss with noiseless fitness on held-out mutants, for the
   fine-tuned and the pretrained checkpoint
3. few-shot maturation: do the 8 lowest-loss mutants beat their parent?

Usage: python3 demos/hit_maturation.py [seed]   (takes a few minutes on one core)
"""

import logging
import sys

import torch

from carpref import config as C
from carpref.pipeline import correlation_trial, maturation_trials, run_pipeline

OVERRIDES = ["data.t_c=2.5", "data.t_r=1.0", "data.k_context=3", "data.val_fraction=0.1",
             "train.epochs=2", "train.eval_every=100"]


def main(seed: int = 0):
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    res = run_pipeline(C.build_config(None, OVERRIDES, seed=seed))
    last = res.finetune_log.records[-1]
    print(f"\n{len(res.train)} train / {len(res.val)} val pairs; final accuracy {last.accuracy:.3f}, "
          f"rewards chosen {last.reward_chosen:+.3f} rejected {last.reward_rejected:+.3f}")

    print("\ncorrelation on 100 held-out mutants (negative = low loss means high fitness)")
    for i in range(3):
        t = correlation_trial(res, seed * 100 + i)
        print(f"  {t.target} {t.parent}: fine-tuned r={t.r_finetuned:+.3f} (p={t.p_finetuned:.1e}), "
              f"pretrained r={t.r_pretrained:+.3f}")

    print("\ntop-8 exhaustive mutants vs parent (noiseless fitness)")
    trials = maturation_trials(res, seed, n_parents=3)
    for t in trials:
        print(f"  {t.target} {t.parent} {t.parent_fitness:+.2f} -> best {max(t.top_fitness):+.2f}"
              f" {'improved' if t.improved else ''}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
