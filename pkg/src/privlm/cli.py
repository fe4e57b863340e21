"""Command-line entry points: train, attack, detector-train, audit-context, report."""

from __future__ import annotations

import argparse
import sys

from . import experiment, report


def _cmd_train(args: argparse.Namespace) -> int:
    config = experiment.ExperimentConfig.from_file(args.config)
    try:
        manifest = experiment.train(config)
    except experiment.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    last = manifest["epochs"][-1] if manifest["epochs"] else None
    print(f"run {manifest['run_id']} ({manifest['regime']}) completed")
    print(f"  train/test sequences: {manifest['n_train']}/{manifest['n_test']}")
    print(f"  sensitive sequences:  {manifest['sensitive_count']}")
    if last:
        print(f"  final valid perplexity: {last['valid_perplexity']:.4f}")
    audit = manifest.get("audit")
    if audit and "eps_total" in audit:
        print(f"  privacy budget: eps={audit['eps_total']:.4f} delta={audit['delta']}")
    elif audit and "error" in audit:
        print(f"  privacy budget unavailable: {audit['error']}")
    print(f"  manifest: {config['out_dir']}/manifest.json")
    return 0


def _cmd_attack(args: argparse.Namespace) -> int:
    rep = experiment.run_attacks(
        args.manifest, checkpoint_epoch=args.checkpoint, dump_table=args.dump_table
    )
    print(f"run {rep.run_id} ({rep.regime}) epoch {rep.epoch}")
    print(f"  canary rank: {rep.canary_rank} of {rep.candidate_space_size}")
    print(f"  exposure:    {rep.exposure:.4f}")
    print(f"  membership inference accuracy: {rep.mi_accuracy:.4f}")
    return 0


def _cmd_detector_train(args: argparse.Namespace) -> int:
    _, info = experiment.train_detector_from_config(args.config)
    print("detector trained")
    print(f"  positives/negatives: {info['n_positive']}/{info['n_negative']}")
    print(f"  threshold: {info['threshold']:.4f}")
    print(f"  measured gamma (held-out TPR): {info['measured_gamma']:.4f}")
    print(f"  checkpoint: {info['checkpoint']}")
    return 0


def _cmd_audit_context(args: argparse.Namespace) -> int:
    audit = experiment.audit_manifest_context(args.manifest, args.sentence, args.index, args.alpha)
    print(f"reference probability of target: {audit.reference_probability:.6f}")
    for length, gap in enumerate(audit.gaps_by_length):
        print(f"  suffix length {length}: probability gap {gap:.6f}")
    if audit.found:
        shown = audit.context_text if audit.context_text else "(empty)"
        print(f"minimal context (length {audit.length}): {shown}")
    else:
        print("no qualifying context found under the configured paraphrase")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    written = report.write_report(args.manifests, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privlm",
        description="Selective differentially private LM training and privacy auditing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one regime from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("attack", help="run canary and membership attacks on a finished run")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", type=int, default=None, help="epoch to attack (default: last)")
    p.add_argument("--dump-table", default=None, help="write the full candidate perplexity CSV")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("detector-train", help="train the sensitivity detector")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_detector_train)

    p = sub.add_parser("audit-context", help="minimal predictive context of a token")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sentence", required=True)
    p.add_argument("--index", type=int, required=True, help="1-based target token index")
    p.add_argument("--alpha", type=float, required=True, help="probability gap tolerance")
    p.set_defaults(func=_cmd_audit_context)

    p = sub.add_parser("report", help="aggregate manifests into CSVs and SVG plots")
    p.add_argument("--out", required=True)
    p.add_argument("manifests", nargs="+")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
