"""Command-line interface: ingest, train, sample, evaluate, gradcheck and fixture."""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .cache import load_dataset_cache, save_dataset_cache
from .checkpoint import load_checkpoint, resolve_path
from .checks import run_gradient_suite
from .density import dense_region, density_sort, sample_patch
from .diffusion import make_cosine_schedule, make_linear_schedule
from .errors import EdgeRecError, UsageError
from .evaluate import EvalConfig, compare_tiled, evaluate_model, evaluate_region
from .gdit import GDiTConfig
from .ingest import build_matrix, featurize, load_dataset, time_split
from .records import DatasetKind, RatingDataset
from .sample import DiffusionSampler, SampleConfig, export_predictions
from .sample_data import create_fixture_dataset, make_rank_one_dataset, print_full_matrix
from .train import TrainConfig, resolve_dtype, run_training
from .xform import RatingScaler, TransformMode

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "EDGE_REC_DATA_DIR"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

_INPUT_FILES = {
    DatasetKind.ML_100K: ("u.data", "u.user", "u.item"),
    DatasetKind.ML_1M: ("ratings.dat", "users.dat", "movies.dat"),
}


def git_blob_hash(data: bytes) -> str:
    """Content hash as computed by ``git hash-object``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    """
    Reproducible description of one CLI run.

    Attributes:
        command: Subcommand
        config: Every resolved option, defaults included
        inputs: Input path -> git-style blob hash
        seed: Base seed
        started: UTC start time (ISO 8601)
        finished: UTC end time (ISO 8601)
    """
    command: str
    config: dict
    seed: int
    inputs: Dict[str, str] = field(default_factory=dict)
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished: Optional[str] = None

    def add_input(self, path: Path) -> None:
        self.inputs[str(path)] = git_blob_hash(Path(path).read_bytes())

    def write(self, out_dir: Path) -> Path:
        self.finished = datetime.now(timezone.utc).isoformat()
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, default=str))
        return path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def parse_size(text: str) -> Tuple[int, int]:
    """Parse ``NxM``."""
    try:
        n, m = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected NxM, got {text!r}")
    if n < 1 or m < 1:
        raise argparse.ArgumentTypeError(f"Sizes must be positive, got {text!r}")
    return n, m


def _size_list(text: str) -> List[Tuple[int, int]]:
    return [parse_size(part) for part in text.split(",")]


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated integers, got {text!r}")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON file of option values (flags override)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--precision", choices=["single", "double"], default="single")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--out", type=Path, default=Path("out"))


def _add_data(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", default=DatasetKind.ML_100K.value, choices=[k.value for k in DatasetKind])
    parser.add_argument("--data-dir", type=Path, default=os.environ.get(DATA_DIR_ENV))
    parser.add_argument("--cache", type=Path, help="Dataset cache written by 'ingest' (skips parsing)")
    parser.add_argument("--test-fraction", type=float, default=0.1)
    parser.add_argument("--transform", choices=[m.value for m in TransformMode], default=TransformMode.LINEAR.value)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="edge-rec", description="Diffusion over user-item interaction matrices")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fixture = sub.add_parser("fixture", help="Print the four-user toy graph")
    _add_common(fixture)

    ingest = sub.add_parser("ingest", help="Parse a dataset and write its cache")
    _add_common(ingest)
    _add_data(ingest)
    ingest.add_argument("--subgraph-density", type=float, default=0.7)

    train = sub.add_parser("train", help="Train a denoiser")
    _add_common(train)
    _add_data(train)
    train.add_argument("--iters", type=int, default=10000)
    train.add_argument("--batch", type=int, default=16)
    train.add_argument("--patch", type=parse_size, default=(50, 50))
    train.add_argument("--min-density", type=float, default=0.0)
    train.add_argument("--lr", type=float, default=1e-4)
    train.add_argument("--weight-decay", type=float, default=0.0)
    train.add_argument("--bpr-weight", type=float, default=0.1)
    train.add_argument("--bpr-pairs", type=int, default=4)
    train.add_argument("--mask-unknown", action="store_true")
    train.add_argument("--subgraph-density", type=float)
    train.add_argument("--checkpoint-every", type=int, default=1000)
    train.add_argument("--schedule", choices=["linear", "cosine"], default="linear")
    train.add_argument("--steps", type=int, default=1000, help="Diffusion steps T")
    train.add_argument("--d-model", type=int, default=64)
    train.add_argument("--heads", type=int, default=4)
    train.add_argument("--blocks", type=int, default=1)
    train.add_argument("--progress", action="store_true")

    sample = sub.add_parser("sample", help="Sample predictions from a checkpoint")
    _add_common(sample)
    _add_data(sample)
    sample.add_argument("--ckpt", type=Path)
    sample.add_argument("--patch", type=parse_size, default=(50, 50))
    sample.add_argument("--min-density", type=float, default=0.0)
    sample.add_argument("--tile", type=parse_size, help="Tiled sampling over the full graph or dense corner")
    sample.add_argument("--subgraph-density", type=float)
    sample.add_argument("--generate", action="store_true", help="Sample from noise without conditioning")

    evaluate = sub.add_parser("evaluate", help="Top-K evaluation of a checkpoint")
    _add_common(evaluate)
    _add_data(evaluate)
    evaluate.add_argument("--ckpt", type=Path)
    evaluate.add_argument("--patch", type=_size_list, default=[(50, 50)])
    evaluate.add_argument("--min-density", type=_float_list, default=[0.0])
    evaluate.add_argument("--num-patches", type=int, default=10)
    evaluate.add_argument("--k", type=_int_list, default=[1, 5, 10, 20, 50])
    evaluate.add_argument("--threshold", type=float, default=4.0)
    evaluate.add_argument("--tile", type=parse_size, help="Also evaluate tiled sampling of a region")
    evaluate.add_argument("--subgraph-density", type=float, help="Region is the dense corner at this density")

    gradcheck = sub.add_parser("gradcheck", help="Run the finite-difference gradient suite")
    _add_common(gradcheck)
    gradcheck.add_argument("--directions", type=int, default=6)

    parser.subcommands = sub.choices
    return parser


def _config_values(path: Path, command: str) -> dict:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    values = data.get(command, data)
    return {key.replace("-", "_"): value for key, value in values.items() if not isinstance(value, dict)}


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    """Parse flags; values from ``--config`` sit between the defaults and explicit flags."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    values = _config_values(args.config, args.command)
    subparser = parser.subcommands[args.command]
    known = {action.dest: action for action in subparser._actions}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise UsageError(f"{args.config}: unknown options {unknown}")
    for dest, value in values.items():
        action = known[dest]
        if isinstance(value, str) and action.type is not None:
            value = action.type(value)
        subparser.set_defaults(**{dest: value})
    return parser.parse_args(argv)


def _load(args, manifest: RunManifest) -> RatingDataset:
    if args.cache is not None:
        manifest.add_input(args.cache)
        dataset, _, _ = load_dataset_cache(args.cache)
        return dataset
    kind = DatasetKind(args.dataset)
    if kind == DatasetKind.FIXTURE:
        return create_fixture_dataset()
    if kind == DatasetKind.SYNTHETIC:
        return make_rank_one_dataset(seed=args.seed)
    if args.data_dir is None:
        raise UsageError(f"--data-dir (or {DATA_DIR_ENV}) is required for {kind.value}")
    for name in _INPUT_FILES[kind]:
        manifest.add_input(args.data_dir / name)
    return load_dataset(kind, args.data_dir)


def _prepare(args, manifest: RunManifest, scaler: Optional[RatingScaler] = None):
    dataset = _load(args, manifest)
    train, test = time_split(dataset, args.test_fraction)
    scaler = scaler or RatingScaler.fit(dataset.rating_scale, train.ratings(), TransformMode(args.transform))
    return dataset, train, test, scaler, featurize(dataset)


def cmd_fixture(args, manifest: RunManifest) -> int:
    dataset = create_fixture_dataset()
    print_full_matrix(dataset)
    args.out.mkdir(parents=True, exist_ok=True)
    save_dataset_cache(args.out / "fixture.cache", dataset, featurize(dataset))
    return EXIT_OK


def cmd_ingest(args, manifest: RunManifest) -> int:
    dataset, train, test, scaler, features = _prepare(args, manifest)
    matrix = build_matrix(train, scaler)
    args.out.mkdir(parents=True, exist_ok=True)
    save_dataset_cache(args.out / "dataset.cache", dataset, features, matrix)

    print(f"\n{dataset!r}")
    print(f"  train: {len(train)} ratings   test: {len(test)} ratings")
    print(f"  training density: {matrix.density:.4f}")
    print(f"  features: {features.d_user} per user, {features.d_item} per item")
    try:
        side = dense_region(density_sort(matrix), args.subgraph_density)
        print(f"  dense corner at {args.subgraph_density:.0%}: {side}x{side}")
    except EdgeRecError as e:
        print(f"  dense corner at {args.subgraph_density:.0%}: none ({e})")
    return EXIT_OK


def _schedule(args):
    if args.schedule == "cosine":
        return make_cosine_schedule(args.steps)
    return make_linear_schedule(args.steps)


def cmd_train(args, manifest: RunManifest) -> int:
    dataset, train, _, scaler, features = _prepare(args, manifest)
    config = TrainConfig(
        iterations=args.iters,
        batch_size=args.batch,
        patch_n=args.patch[0],
        patch_m=args.patch[1],
        min_density=args.min_density,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        bpr_weight=args.bpr_weight,
        bpr_pairs_per_user=args.bpr_pairs,
        mask_unknown_in_loss=args.mask_unknown,
        seed=args.seed,
        subgraph_density=args.subgraph_density,
        checkpoint_every=args.checkpoint_every,
        precision=args.precision,
    )
    model_config = GDiTConfig(
        d_model=args.d_model, n_heads=args.heads, n_blocks=args.blocks,
        d_user_in=features.d_user, d_item_in=features.d_item,
    )
    manifest.config["train_config"] = config.to_dict()
    manifest.config["model_config"] = model_config.to_dict()
    final = run_training(
        train, config, scaler=scaler, model_config=model_config, schedule=_schedule(args),
        features=features, out_dir=args.out, progress=args.progress,
        run_info={"dataset": dataset.kind.value, "test_fraction": args.test_fraction},
    )
    print(f"Trained {final.iteration} iterations; checkpoint {args.out / 'final.ckpt'}")
    return EXIT_OK


def _restore(args, manifest: RunManifest):
    if args.ckpt is None:
        raise UsageError("--ckpt is required")
    path = resolve_path(args.ckpt)
    manifest.add_input(path)
    ckpt = load_checkpoint(path)
    args.test_fraction = ckpt.train_config.get("test_fraction", args.test_fraction)
    dataset, train, test, scaler, features = _prepare(args, manifest, scaler=ckpt.scaler)
    model = ckpt.build_model(resolve_dtype(args.precision))
    model.eval()
    sampler = DiffusionSampler(
        model, ckpt.schedule, SampleConfig(seed=args.seed, threads=args.threads), bounds=scaler.bounds,
    )
    return dataset, build_matrix(train, scaler), test, scaler, features, sampler


def cmd_sample(args, manifest: RunManifest) -> int:
    dataset, matrix, _, scaler, features, sampler = _restore(args, manifest)
    if args.tile is not None:
        region = matrix
        if args.subgraph_density is not None:
            region = density_sort(matrix)
            side = dense_region(region, args.subgraph_density)
            region = region.permuted(np.arange(side), np.arange(side))
        users = features.user_features[region.row_ids]
        items = features.item_features[region.col_ids]
        values = sampler.tiled_sample(region.values, region.known, users, items, *args.tile)
        user_index, item_index = region.row_ids, region.col_ids
    else:
        patch = sample_patch(matrix, args.patch[0], args.patch[1], args.min_density, np.random.default_rng(args.seed))
        users, items = features.for_patch(matrix, patch)
        if args.generate:
            values = sampler.generate_patch(users, items)
        else:
            values = sampler.inpaint_patch(patch.values, patch.known, users, items)
        user_index, item_index = matrix.row_ids[patch.user_rows], matrix.col_ids[patch.item_cols]

    args.out.mkdir(parents=True, exist_ok=True)
    export_predictions(values, user_index, item_index, dataset, scaler, args.out / "predictions.csv")
    return EXIT_OK


def _print_metrics(title: str, report) -> None:
    print("\n" + "=" * 64)
    print(title)
    print("=" * 64)
    print(report.to_frame().to_string(index=False, float_format=lambda v: f"{v:.4f}"))


def cmd_evaluate(args, manifest: RunManifest) -> int:
    _, matrix, test, _, features, sampler = _restore(args, manifest)
    combos = [(size, density) for size in args.patch for density in args.min_density]
    reports = []
    for (n, m), density in combos:
        config = EvalConfig(
            k_values=tuple(args.k), num_patches=args.num_patches, patch_n=n, patch_m=m,
            min_density=density, relevance_threshold=args.threshold, seed=args.seed,
        )
        report = evaluate_model(sampler, matrix, test, features, config)
        prefix = "" if len(combos) == 1 else f"patch{n}x{m}_density{density:g}_"
        report.write(args.out, prefix=prefix)
        _print_metrics(f"PATCH {n}x{m}, min density {density:g}", report)
        reports.append(report)

    if args.tile is not None:
        config = EvalConfig(k_values=tuple(args.k), relevance_threshold=args.threshold, seed=args.seed)
        tiled = evaluate_region(sampler, matrix, test, features, config, args.tile, args.subgraph_density)
        tiled.write(args.out, prefix="tiled_")
        _print_metrics(f"TILED {args.tile[0]}x{args.tile[1]}", tiled)
        if 10 in config.k_values:
            gap = compare_tiled(reports[0], tiled, k=10)
            print(f"\nNDCG@10 gap, tiled vs patch: {gap:.4f}")
    return EXIT_OK


def cmd_gradcheck(args, manifest: RunManifest) -> int:
    results = run_gradient_suite(args.precision, seed=args.seed, directions=args.directions)
    for result in results:
        print(result)
    failed = [r for r in results if not r.passed]
    print(f"\n{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_RUNTIME if failed else EXIT_OK


COMMANDS = {
    "fixture": cmd_fixture,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, 1 on a usage error, 2 on a runtime error
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    logging.basicConfig(
        level=args.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    torch.set_num_threads(max(1, args.threads))
    manifest = RunManifest(
        command=args.command,
        config={k: v for k, v in vars(args).items() if k != "command"},
        seed=args.seed,
    )
    try:
        code = COMMANDS[args.command](args, manifest)
    except UsageError as e:
        print(f"edge-rec {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (EdgeRecError, OSError, ValueError, RuntimeError) as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest.write(args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
