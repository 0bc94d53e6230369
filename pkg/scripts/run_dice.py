"""Consensus Dice against the phantom truth for every sampler."""

import argparse

from biouncert.cli import render_dice
from biouncert.evaluation import dice_study
from biouncert.phantom import EffectSpec, SamplerConfig, SamplerKind, simulate_cohort


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--subjects", type=int, default=60)
    ap.add_argument("--samples", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=4)
    args = ap.parse_args()

    rows = {}
    for kind in SamplerKind:
        cfg = SamplerConfig(kind, n_samples=args.samples, seed=args.seed)
        sim = simulate_cohort(args.subjects, 109 / 308, EffectSpec(), cfg, args.seed, jobs=args.jobs)
        truths = {s.subject_id: p.truth for s, p in zip(sim.stacks, sim.phantoms)}
        rows[kind.value] = dice_study(sim.stacks, truths)
    print(render_dice(rows, "md"), end="")


if __name__ == "__main__":
    main()
