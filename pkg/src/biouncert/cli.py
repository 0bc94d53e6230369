"""Command-line front end.

Subcommands::

    simulate        synthetic phantoms and Monte-Carlo sample stacks
    confidence      IoU / CV / CV^-1 and volumes for every stack
    group-analysis  diabetes coefficient per model variant
    classify        repeated random-split classification accuracy
    evaluate        all of the above for every sampler, in memory

Exit codes: 0 success, 1 I/O or data error, 2 bad arguments, 3 some
report cell failed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .confidence import confidence_report, uncertainty_map
from .core import (
    Cohort,
    ConfidenceKind,
    FormatError,
    SampleStack,
    read_cohort_csv,
    read_label_volume,
    write_cohort_csv,
    write_float_volume,
    write_label_volume,
)
from .evaluation import (
    CLF_VARIANTS,
    GROUP_VARIANTS,
    KINDS,
    SplitSpec,
    StudyReport,
    classification_study,
    dice_study,
    group_study,
)
from .phantom import SIM_DIMS, SIM_SPACING, EffectSpec, SamplerConfig, SamplerKind, simulate_cohort
from .report import FORMATS, render_report
from .stats import Variant

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_CELL_FAILED = 0, 1, 2, 3
SEED_ENV = "BIOUNCERT_SEED"


class CliError(Exception):
    """Data or I/O problem; maps to exit code 1."""


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "0"))


def _csv_list(choices):
    def parse(text: str):
        items = [t.strip() for t in text.split(",") if t.strip()]
        bad = [t for t in items if t not in choices]
        if bad or not items:
            raise argparse.ArgumentTypeError(f"choose from {', '.join(choices)}; got {text!r}")
        return items

    return parse


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return value


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of option defaults; flags override it")
    p.add_argument("--seed", type=_seed, default=None, help=f"random seed (default ${SEED_ENV} or 0)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker threads (results do not depend on it)")


def _output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=FORMATS, default="md")
    p.add_argument("--output", type=Path, help="write the report here instead of stdout")


def _sampler_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--samples", type=int, default=10, help="Monte-Carlo samples per subject (N)")
    p.add_argument("--dropout-rate", type=float, default=0.2)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--latent-dim", type=int, default=12)
    p.add_argument("--latent-std", type=float, default=1.0)
    p.add_argument("--n-scales", type=int, default=3)
    p.add_argument("--band", type=float, default=2.0, help="flip band half-width in voxels (mc-dropout)")


def _cohort_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--subjects", type=int, default=308)
    p.add_argument("--diabetic-fraction", type=float, default=109 / 308)
    p.add_argument("--dims", type=int, nargs=3, default=list(SIM_DIMS), metavar=("NZ", "NY", "NX"))
    p.add_argument("--spacing", type=float, nargs=3, default=list(SIM_SPACING), metavar=("SZ", "SY", "SX"))
    p.add_argument("--beta4", type=float, default=EffectSpec.diabetes, help="planted diabetes effect (mm^3)")
    p.add_argument("--volume-noise", type=float, default=EffectSpec.noise_sd, help="residual volume sd (mm^3)")
    p.add_argument("--difficulty-sd", type=float, default=EffectSpec.difficulty_sd)
    p.add_argument("--diabetic-difficulty", type=float, default=EffectSpec.diabetic_difficulty)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biouncert", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a cohort of phantoms and sample stacks")
    _common(p)
    _cohort_args(p)
    p.add_argument("--sampler", choices=[k.value for k in SamplerKind], default=SamplerKind.MC_DROPOUT.value)
    _sampler_args(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("confidence", help="confidence measures for every stack of a simulated run")
    _common(p)
    p.add_argument("--run", type=Path, required=True, help="directory holding manifest.json and cohort.csv")
    p.add_argument("--out", type=Path, help="output directory (default: --run)")
    p.add_argument("--volume", choices=["consensus", "mean"], default="consensus", help="biomarker volume source")
    p.add_argument("--kind", choices=[k.value for k in ConfidenceKind], default="iou", help="measure stored as 'confidence'")
    p.add_argument("--emit-uncertainty", action="store_true", help="write a bfv1 uncertainty map per subject")
    p.set_defaults(func=cmd_confidence)

    p = sub.add_parser("group-analysis", help="diabetes coefficient for each model variant")
    _common(p)
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--method", default=None, help="row label (default: cohort file stem)")
    p.add_argument("--variants", type=_csv_list([v.value for v in GROUP_VARIANTS]), default=[v.value for v in GROUP_VARIANTS])
    p.add_argument("--kinds", type=_csv_list([k.value for k in KINDS]), default=[k.value for k in KINDS])
    p.add_argument("--reference", type=float, default=None, help="reference beta_4 (default: fit on true_volume_mm3)")
    p.add_argument("--standardize-volume", action=argparse.BooleanOptionalAction, default=True)
    _output(p)
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("classify", help="repeated random-split diabetes classification")
    _common(p)
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--method", default=None, help="row label (default: cohort file stem)")
    p.add_argument("--variants", type=_csv_list([v.value for v in CLF_VARIANTS]), default=[v.value for v in CLF_VARIANTS])
    p.add_argument("--kinds", type=_csv_list([k.value for k in KINDS]), default=[k.value for k in KINDS])
    p.add_argument("--repeats", type=int, default=1000)
    p.add_argument("--train-frac", type=float, default=0.5)
    p.add_argument("--stratified", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--with-covariates", action="store_true", help="add age, sex and BMI to the classifiers")
    _output(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="Dice, group and classification studies for every sampler")
    _common(p)
    _cohort_args(p)
    p.add_argument("--samplers", type=_csv_list([k.value for k in SamplerKind]), default=[k.value for k in SamplerKind])
    _sampler_args(p)
    p.add_argument("--repeats", type=int, default=1000)
    p.add_argument("--train-frac", type=float, default=0.5)
    p.add_argument("--format", choices=FORMATS, default="md")
    p.add_argument("--out", type=Path, required=True, help="output directory for the reports")
    p.set_defaults(func=cmd_evaluate)
    return parser


# --- config handling --------------------------------------------------------------


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _config_path(argv: list[str]) -> str | None:
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if token.startswith("--config="):
            return token.split("=", 1)[1]
    return None


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command = next((t for t in argv if not t.startswith("-")), None)
    config_path = _config_path(argv)
    if config_path is not None and command in ("simulate", "confidence", "group-analysis", "classify", "evaluate"):
        sub = _subparser(parser, command)
        try:
            config = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            sub.error(f"cannot read config {config_path}: {exc}")
        if not isinstance(config, dict):
            sub.error("config must be a JSON object")
        known = {a.dest for a in sub._actions} - {"help", "config"}
        config = {k.replace("-", "_"): v for k, v in config.items()}
        unknown = sorted(set(config) - known)
        if unknown:
            sub.error(f"unknown config key(s): {', '.join(unknown)}")
        # file values become defaults, so explicit flags still win
        for action in sub._actions:
            if action.dest in config:
                action.required = False
                if action.type is not None and isinstance(config[action.dest], str):
                    config[action.dest] = action.type(config[action.dest])
                elif action.type is Path:
                    config[action.dest] = Path(config[action.dest])
        sub.set_defaults(**config)
    args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = _default_seed()
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    return args


def _sampler_config(args, kind: str) -> SamplerConfig:
    return SamplerConfig(
        kind=SamplerKind(kind),
        n_samples=args.samples,
        seed=args.seed,
        dropout_rate=args.dropout_rate,
        noise_std=args.noise_std,
        latent_dim=args.latent_dim,
        latent_std=args.latent_std,
        n_scales=args.n_scales,
        boundary_band_vox=args.band,
    )


def _effect_spec(args) -> EffectSpec:
    return replace(
        EffectSpec(),
        diabetes=args.beta4,
        noise_sd=args.volume_noise,
        difficulty_sd=args.difficulty_sd,
        diabetic_difficulty=args.diabetic_difficulty,
    )


def _write_text(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


def _emit_report(report: StudyReport, args) -> int:
    _write_text(render_report(report, args.format), args.output)
    for method, key, reason in report.failed_cells:
        print(f"cell {method}/{key} failed: {reason}", file=sys.stderr)
    return EXIT_CELL_FAILED if report.failed_cells else EXIT_OK


# --- subcommands ---------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _sampler_config(args, args.sampler)
    sim = simulate_cohort(
        args.subjects,
        args.diabetic_fraction,
        _effect_spec(args),
        cfg,
        args.seed,
        dims=tuple(args.dims),
        spacing=tuple(args.spacing),
        jobs=args.jobs,
    )
    out: Path = args.out
    (out / "stacks").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    subjects = []
    for stack, phantom in zip(sim.stacks, sim.phantoms):
        sdir = out / "stacks" / stack.subject_id
        sdir.mkdir(exist_ok=True)
        names = []
        for k, sample in enumerate(stack.samples):
            name = f"sample_{k:02d}.blv1"
            write_label_volume(sample, sdir / name)
            names.append(name)
        write_label_volume(phantom.truth, out / "truth" / f"{stack.subject_id}.blv1")
        manifest = {
            "subject_id": stack.subject_id,
            "organ_label": stack.organ_label,
            "sampler": cfg.kind.value,
            "samples": names,
            "truth": f"../../truth/{stack.subject_id}.blv1",
        }
        (sdir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        subjects.append(f"stacks/{stack.subject_id}/manifest.json")
    top = {"sampler": cfg.kind.value, "n_samples": cfg.n_samples, "seed": args.seed, "subjects": subjects}
    (out / "manifest.json").write_text(json.dumps(top, indent=2) + "\n")
    (out / "truth.json").write_text(json.dumps(sim.planted, indent=2) + "\n")
    write_cohort_csv(sim.cohort, out / "cohort.csv")
    return EXIT_OK


def load_stack(manifest_path: Path) -> SampleStack:
    manifest = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    samples = [read_label_volume(base / name) for name in manifest["samples"]]
    if len(samples) < 2:
        raise CliError(f"{manifest_path}: need at least 2 samples, found {len(samples)}")
    return SampleStack(manifest["subject_id"], tuple(samples), int(manifest.get("organ_label", 1)))


def load_run_stacks(run: Path) -> list[SampleStack]:
    top = json.loads((run / "manifest.json").read_text())
    return [load_stack(run / rel) for rel in top["subjects"]]


def with_confidence(cohort: Cohort, reports, volume: str, kind: ConfidenceKind) -> Cohort:
    """Cohort with volumes and confidences taken from per-stack reports; all measures go to extras."""
    by_id = {r.subject_id: r for r in reports}
    missing = [sid for sid in cohort.subject_ids if sid not in by_id]
    if missing:
        raise CliError(f"no sample stack for subject(s): {', '.join(missing[:5])}")
    records = []
    for rec in cohort.records:
        r = by_id[rec.subject_id]
        extras = dict(rec.extras)
        extras.update(
            iou=r.iou,
            cv=r.cv,
            inv_cv=r.inv_cv,
            mean_volume_mm3=r.mean_volume_mm3,
            consensus_volume_mm3=r.consensus_volume_mm3,
        )
        records.append(
            replace(
                rec,
                volume_mm3=r.consensus_volume_mm3 if volume == "consensus" else r.mean_volume_mm3,
                confidence=r.iou if kind is ConfidenceKind.IOU else r.inv_cv,
                confidence_kind=kind,
                extras=extras,
            )
        )
    return Cohort(tuple(records))


def cmd_confidence(args) -> int:
    run: Path = args.run
    out: Path = args.out or run
    stacks = load_run_stacks(run)
    cohort = read_cohort_csv(run / "cohort.csv")
    reports = [confidence_report(s) for s in stacks]
    for r in reports:
        if r.empty_union or r.cv_undefined:
            print(f"warning: {r.subject_id}: no sample contains the organ", file=sys.stderr)
    out.mkdir(parents=True, exist_ok=True)
    write_cohort_csv(with_confidence(cohort, reports, args.volume, ConfidenceKind(args.kind)), out / "cohort.csv")
    if args.emit_uncertainty:
        (out / "uncertainty").mkdir(exist_ok=True)
        for s in stacks:
            umap = uncertainty_map(s)
            write_float_volume(umap.values, umap.spacing_mm, out / "uncertainty" / f"{s.subject_id}.bfv1")
    return EXIT_OK


def cmd_group(args) -> int:
    cohort = read_cohort_csv(args.cohort)
    method = args.method or args.cohort.stem
    report = group_study(
        {method: cohort},
        [Variant(v) for v in args.variants],
        [ConfidenceKind(k) for k in args.kinds],
        reference_beta4=args.reference,
        standardize_volume=args.standardize_volume,
    )
    return _emit_report(report, args)


def cmd_classify(args) -> int:
    cohort = read_cohort_csv(args.cohort)
    method = args.method or args.cohort.stem
    split = SplitSpec(args.repeats, args.train_frac, args.stratified, args.seed)
    report = classification_study(
        {method: cohort},
        [Variant(v) for v in args.variants],
        [ConfidenceKind(k) for k in args.kinds],
        split,
        include_covariates=args.with_covariates,
        jobs=args.jobs,
    )
    return _emit_report(report, args)


def render_dice(summaries: dict, fmt: str) -> str:
    if fmt == "json":
        data = {m: {"mean": s.mean, "std": s.std} for m, s in summaries.items()}
        return json.dumps(data, indent=2) + "\n"
    if fmt == "csv":
        return "method,mean,std\n" + "".join(f"{m},{s.mean:.6g},{s.std:.6g}\n" for m, s in summaries.items())
    lines = ["**Dice score of consensus segmentation vs truth**", "", "| Method | Mean | Std |", "|---|---|---|"]
    lines += [f"| {m} | {s.mean:.6g} | {s.std:.6g} |" for m, s in summaries.items()]
    return "\n".join(lines) + "\n"


def cmd_evaluate(args) -> int:
    effect = _effect_spec(args)
    cohorts, dice_rows = {}, {}
    for kind in args.samplers:
        sim = simulate_cohort(
            args.subjects,
            args.diabetic_fraction,
            effect,
            _sampler_config(args, kind),
            args.seed,
            dims=tuple(args.dims),
            spacing=tuple(args.spacing),
            jobs=args.jobs,
        )
        truths = {s.subject_id: p.truth for s, p in zip(sim.stacks, sim.phantoms)}
        dice_rows[kind] = dice_study(sim.stacks, truths)
        reports = [confidence_report(s) for s in sim.stacks]
        cohorts[kind] = with_confidence(sim.cohort, reports, "consensus", ConfidenceKind.IOU)

    split = SplitSpec(args.repeats, args.train_frac, True, args.seed)
    group = group_study(cohorts)
    clf = classification_study(cohorts, split=split, jobs=args.jobs)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    ext = args.format
    (out / f"dice.{ext}").write_text(render_dice(dice_rows, ext))
    (out / f"group.{ext}").write_text(render_report(group, ext))
    (out / f"classify.{ext}").write_text(render_report(clf, ext))
    failed = group.failed_cells + clf.failed_cells
    for method, key, reason in failed:
        print(f"cell {method}/{key} failed: {reason}", file=sys.stderr)
    return EXIT_CELL_FAILED if failed else EXIT_OK


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        return args.func(args)
    except (CliError, FormatError, OSError, ValueError, KeyError) as exc:
        print(f"biouncert {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
