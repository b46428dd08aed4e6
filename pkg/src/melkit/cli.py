"""Command-line entry point: synthetic data generation and pipeline stages."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .pipeline import (
    STAGE_ORDER,
    PipelineConfig,
    PipelineError,
    compare_runs,
    format_delta_table,
    load_profile,
    run_pipeline,
    run_stage,
)
from .synth import SyntheticSpec, gen_synthetic

logger = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--workdir", type=Path, required=True, help="pipeline working directory")
    parser.add_argument("--config", default=None, help="profile overrides file (key = value)")
    parser.add_argument("--profile", default="desk", choices=["desk", "paper"])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--entity-arch", default="f", choices=["e", "f"],
                        help="entity side: description encoder (f) or embedding table (e)")
    parser.add_argument("--aux", action="store_true", help="enable the description-pairing task")
    parser.add_argument("--mining", action="store_true", help="enable hard-negative mining")


def _pipeline_config(args) -> PipelineConfig:
    profile = load_profile(args.profile)
    if args.config:
        profile.update(load_profile(args.config))
    return PipelineConfig(
        workdir=args.workdir, profile=profile, profile_name=args.profile,
        entity_arch=args.entity_arch, use_aux=args.aux, mining=args.mining,
        seed=args.seed,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="melkit",
                                     description="Desk-scale multilingual entity-linking pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic KB and corpus")
    synth.add_argument("--workdir", type=Path, required=True)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--entities", type=int, default=500)
    synth.add_argument("--languages", type=int, default=2)
    synth.add_argument("--zipf", type=float, default=1.1)
    synth.add_argument("--mentions-per-language", type=int, default=10000)
    synth.add_argument("--ambiguity", type=float, default=0.3)
    synth.add_argument("--zero-shot", type=float, default=0.1)

    for stage in STAGE_ORDER:
        stage_parser = sub.add_parser(stage, help=f"run the {stage} stage")
        _add_common(stage_parser)

    run = sub.add_parser("run", help="run the full pipeline")
    _add_common(run)
    run.add_argument("--rerank", action="store_true", help="include the reranker stages")

    compare = sub.add_parser("compare", help="difference table between two report JSON files")
    compare.add_argument("report_a", type=Path)
    compare.add_argument("report_b", type=Path)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        if args.command == "synth":
            spec = SyntheticSpec(
                n_entities=args.entities, n_languages=args.languages,
                zipf_exponent=args.zipf, mentions_per_language=args.mentions_per_language,
                ambiguity_rate=args.ambiguity, zero_shot_frac=args.zero_shot,
                seed=args.seed,
            )
            paths = gen_synthetic(spec, args.workdir)
            print(f"synthetic corpus written under {args.workdir}")
            print(f"kb: {paths.kb}")
            print(f"documents: {paths.documents}")
            return 0
        if args.command == "compare":
            report_a = json.loads(args.report_a.read_text(encoding="utf-8"))
            report_b = json.loads(args.report_b.read_text(encoding="utf-8"))
            print(format_delta_table(compare_runs(report_a, report_b)), end="")
            return 0
        cfg = _pipeline_config(args)
        if args.command == "run":
            report = run_pipeline(cfg, include_rerank=args.rerank)
            print(cfg.path("report.txt").read_text(encoding="utf-8"), end="")
            print(f"micro R@1 = {report['micro']['r1']:.4f}")
            return 0
        run_stage(cfg, args.command)
        print(f"stage {args.command} complete")
        return 0
    except PipelineError as exc:
        print("ERROR " + json.dumps({"stage": exc.stage, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print("ERROR " + json.dumps({"stage": getattr(args, "command", ""),
                                     "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
