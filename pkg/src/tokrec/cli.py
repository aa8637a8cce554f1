"""Command-line interface for tokrec."""

import argparse
import json
import sys

from . import __version__
from .config import SLOT_SEARCH_SPACE, RunConfig, load_config
from .errors import TokrecError
from .log import configure_logging


def _load_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) with command-line overrides applied."""
    config = load_config(args.config).with_overrides(
        seed=args.seed, threads=args.threads, output_dir=args.output_dir
    )
    config.validate()
    return config


def _fail(e: TokrecError) -> int:
    print(f"Error: {e}", file=sys.stderr)
    return e.exit_code


def cmd_quantize(args: argparse.Namespace) -> int:
    """Fit codebooks and write token files."""
    try:
        from .pipeline import run_quantize

        config = _load_config(args)
        results = run_quantize(config)

        summary = {m: r.summary() for m, r in results.items()}
        if args.json:
            print(json.dumps(summary, indent=2, sort_keys=True))
        else:
            for modality, info in summary.items():
                dist = info["distinguishability"]
                print(f"{modality}: D={info['num_slots']} K={info['codebook_size']}")
                print(f"  Quantization error: {info['quantization_error']:.6g}")
                print(
                    f"  Distinct signatures: {dist['distinct_signatures']}/{dist['num_items']}"
                    f" (collision rate {dist['collision_rate']:.4f})"
                )
            print(f"Wrote tokens to {config.output_dir}")
        return 0

    except TokrecError as e:
        return _fail(e)


def cmd_train(args: argparse.Namespace) -> int:
    """Train a model with early stopping."""
    try:
        from .pipeline import run_train

        config = _load_config(args)
        outcome = run_train(config)
        print(f"Trained {outcome.epochs_run} epoch(s); best epoch {outcome.best_epoch}")
        print(f"  Best val recall@20: {outcome.best_metric:.5f}")
        print(f"Wrote checkpoint: {outcome.checkpoint}")
        return 0

    except TokrecError as e:
        return _fail(e)


def _print_report(report) -> None:
    metrics = report.result.metrics
    print(f"Run {report.run_id} ({report.result.num_evaluated_users} users)")
    for k in (10, 20):
        print(f"  R@{k}: {metrics[f'recall@{k}']:.5f}  N@{k}: {metrics[f'ndcg@{k}']:.5f}")
    print("  Buckets (train degree):")
    for bucket in report.result.buckets:
        print(
            f"    {bucket.label:>6}: items={bucket.num_items} "
            f"R@20={bucket.recall:.5f} N@20={bucket.ndcg:.5f}"
        )
    audit = report.audit
    print(
        f"  Item-side params: {audit.item_side_params} "
        f"(ID-based {audit.id_based_equivalent}, ratio {audit.ratio:.4f})"
    )


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Evaluate the trained checkpoint on the test split."""
    try:
        from .pipeline import REPORT_FILE, run_evaluate

        config = _load_config(args)
        report = run_evaluate(config, per_user=args.per_user)
        if args.json:
            print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        else:
            _print_report(report)
            print(f"Wrote report: {config.output_dir / REPORT_FILE}")
        return 0

    except TokrecError as e:
        return _fail(e)


def cmd_retrieve(args: argparse.Namespace) -> int:
    """List items sharing the most tokens with a query item."""
    try:
        from .pipeline import run_retrieve

        config = _load_config(args)
        matches = run_retrieve(config, args.item, args.top_n)
        if args.json:
            print(json.dumps([{"item": i, "overlap": o} for i, o in matches], indent=2))
        else:
            for rank, (item_id, overlap) in enumerate(matches, start=1):
                print(f"{rank}\t{item_id}\t{overlap}")
        return 0

    except TokrecError as e:
        return _fail(e)


def cmd_run_all(args: argparse.Namespace) -> int:
    """Quantize, train and evaluate in one go."""
    try:
        from .pipeline import REPORT_FILE, run_all

        config = _load_config(args)
        report = run_all(config, per_user=args.per_user)
        _print_report(report)
        print(f"Wrote report: {config.output_dir / REPORT_FILE}")
        return 0

    except TokrecError as e:
        return _fail(e)


def cmd_sweep(args: argparse.Namespace) -> int:
    """Train one ID-free model per token count and compare them."""
    try:
        from .pipeline import SWEEP_FILE, run_sweep

        config = _load_config(args)
        rows = run_sweep(config, tuple(args.slots))
        print("D\tparams\titem_side\tratio\tR@20\tN@20")
        for row in rows:
            print(
                f"{row['num_slots']}\t{row['total_params']}\t{row['item_side_params']}\t"
                f"{row['ratio']:.4f}\t{row['recall@20']:.5f}\t{row['ndcg@20']:.5f}"
            )
        print(f"Wrote sweep: {config.output_dir / SWEEP_FILE}")
        return 0

    except TokrecError as e:
        return _fail(e)


def cmd_synth(args: argparse.Namespace) -> int:
    """Write a planted-cluster dataset and a config that points at it."""
    try:
        from .synthetic import PlantedSpec, generate_planted, write_planted

        spec = PlantedSpec(
            num_users=args.users,
            num_items=args.items,
            num_clusters=args.clusters,
            seed=args.seed if args.seed is not None else 0,
        )
        data = generate_planted(spec)
        path = write_planted(args.output_dir, data)
        print(f"Wrote {len(data.edges)} interactions for {len(data.item_cluster)} items")
        print(f"Config: {path}")
        return 0

    except TokrecError as e:
        return _fail(e)


def create_parser() -> argparse.ArgumentParser:
    """Create the argument parser."""
    parser = argparse.ArgumentParser(
        prog="tokrec",
        description="ID-free recommendation with quantized multimodal item tokens",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="Run configuration JSON file")
    common.add_argument("--seed", type=int, help="Override the configured seed")
    common.add_argument("--threads", type=int, help="Worker threads (default: all cores)")
    common.add_argument("--output-dir", "-o", help="Override the output directory")

    subparsers = parser.add_subparsers(dest="command", help="Commands")

    quantize_parser = subparsers.add_parser(
        "quantize", parents=[common], help="Fit codebooks and assign item tokens"
    )
    quantize_parser.add_argument("--json", action="store_true", help="Output as JSON")

    subparsers.add_parser("train", parents=[common], help="Train a model")

    evaluate_parser = subparsers.add_parser(
        "evaluate", parents=[common], help="Evaluate the trained checkpoint"
    )
    evaluate_parser.add_argument(
        "--per-user", action="store_true", help="Also write per-user metrics TSV"
    )
    evaluate_parser.add_argument("--json", action="store_true", help="Output as JSON")

    retrieve_parser = subparsers.add_parser(
        "retrieve", parents=[common], help="Find items with the most similar token IDs"
    )
    retrieve_parser.add_argument("item", help="Original item ID")
    retrieve_parser.add_argument(
        "--top-n", "-n", type=int, default=2, help="Number of items to list (default: 2)"
    )
    retrieve_parser.add_argument("--json", action="store_true", help="Output as JSON")

    run_all_parser = subparsers.add_parser(
        "run-all", parents=[common], help="Quantize, train and evaluate"
    )
    run_all_parser.add_argument(
        "--per-user", action="store_true", help="Also write per-user metrics TSV"
    )

    sweep_parser = subparsers.add_parser(
        "sweep", parents=[common], help="Compare token counts D"
    )
    sweep_parser.add_argument(
        "--slots",
        type=int,
        nargs="+",
        default=list(SLOT_SEARCH_SPACE),
        help="Token counts to try (default: 2 4 8 16)",
    )

    synth_parser = subparsers.add_parser(
        "synth", help="Generate a planted-cluster dataset"
    )
    synth_parser.add_argument("--output-dir", "-o", required=True, help="Directory to write")
    synth_parser.add_argument("--seed", type=int, help="Generator seed (default: 0)")
    synth_parser.add_argument("--users", type=int, default=2000, help="Number of users")
    synth_parser.add_argument("--items", type=int, default=500, help="Number of items")
    synth_parser.add_argument("--clusters", type=int, default=20, help="Latent clusters")

    return parser


def main(argv: list[str] | None = None) -> int:
    """Main entry point."""
    configure_logging()
    parser = create_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 0

    commands = {
        "quantize": cmd_quantize,
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "retrieve": cmd_retrieve,
        "run-all": cmd_run_all,
        "sweep": cmd_sweep,
        "synth": cmd_synth,
    }

    cmd_func = commands.get(args.command)
    if cmd_func:
        return cmd_func(args)

    parser.print_help()
    return 0


if __name__ == "__main__":
    sys.exit(main())
