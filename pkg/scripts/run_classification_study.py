"""Mean diabetes-classification accuracy over repeated stratified splits.

Runs the group-confidence-shift scenario, where failed segmentations are
more common among diabetics, and a label-independent chance scenario.
"""

import argparse

from biouncert.evaluation import SplitSpec, classification_study
from biouncert.report import render_report
from biouncert.scenarios import GROUP_CONFIDENCE_SHIFT, chance_cohort, corrupted_cohort


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=4)
    ap.add_argument("--with-covariates", action="store_true")
    args = ap.parse_args()

    cohorts = {
        "confidence shift": corrupted_cohort(args.seed, corruption=GROUP_CONFIDENCE_SHIFT),
        "default corruption": corrupted_cohort(args.seed + 1),
        "chance": chance_cohort(args.seed + 2),
    }
    report = classification_study(
        cohorts,
        split=SplitSpec(args.repeats, seed=args.seed),
        include_covariates=args.with_covariates,
        jobs=args.jobs,
    )
    print(render_report(report, "md"), end="")


if __name__ == "__main__":
    main()
