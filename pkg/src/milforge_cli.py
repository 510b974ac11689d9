"""
milforge command-line interface
===============================

One entry point with a subcommand per pipeline stage:

    milforge tile [SLIDE ...]                  segment tissue, write patch manifests
    milforge featurize [SLIDE_ID ...]          baseline embeddings for manifested slides
    milforge import-embeddings STREAM DESC     bring in externally computed embeddings
    milforge train                             cross-validate every (or one) head
    milforge evaluate CHECKPOINT               score a checkpoint on labelled slides
    milforge heatmap SLIDE_ID CHECKPOINT       attention overlay + top patches
    milforge report RUN_DIR                    re-aggregate saved fold reports
    milforge gradcheck                         finite-difference check of every head

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd

from .milforge_autodiff import gradient_check
from .milforge_config import ProjectConfig, load_config, read_labels
from .milforge_errors import (
    EXIT_DATA,
    EXIT_INTERNAL,
    EXIT_OK,
    EXIT_USAGE,
    ConfigurationError,
    FormatError,
    MilForgeError,
    UnknownSlideError,
    exit_code_for,
)
from .milforge_features import (
    FeatureBag,
    FeatureStore,
    LabelSpace,
    check_manifest_alignment,
    extract_bag,
    import_embeddings,
)
from .milforge_heatmap import build_heatmap
from .milforge_logging import configure_logging
from .milforge_models import (
    MilModel,
    MilVariant,
    ModelConfig,
    load_checkpoint,
    loss_and_gradients,
    save_checkpoint,
    total_loss,
)
from .milforge_seeding import check_seed, substream
from .milforge_tiling import (
    PYRAMID_SUFFIXES,
    RASTER_SUFFIXES,
    Magnification,
    build_patch_grid,
    manifest_path,
    open_slide,
    read_manifest,
    save_mask_preview,
    segment_tissue,
    write_manifest,
)
from .milforge_trainer import (
    TABLE_ORDER,
    FoldReport,
    aggregate_table,
    cross_validate,
    evaluate,
    macro_auc,
    write_aggregate_csv,
)

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-5


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class SlideResult:
    """Outcome of one slide in a batch command"""
    slide_id: str
    success: bool
    detail: str = ""
    error_message: Optional[str] = None
    exit_code: int = EXIT_OK
    execution_time: float = 0.0


@dataclass
class Context:
    args: argparse.Namespace
    config: ProjectConfig

    @property
    def out_dir(self) -> Path:
        return Path(self.args.out) if self.args.out else Path(self.config.paths.output)

    @property
    def magnification(self) -> Magnification:
        return Magnification.parse(self.args.mag or self.config.train.magnification)

    @property
    def jobs(self) -> int:
        return max(1, self.args.jobs or os.cpu_count() or 1)

    def label_space(self) -> LabelSpace:
        space = self.config.labels
        return space.restrict(self.args.classes) if self.args.classes else space

    def labels(self):
        return read_labels(self.config.paths.labels, self.label_space(), self.config.labels.class_names)

    def store(self) -> FeatureStore:
        return FeatureStore(self.config.paths.features)


def _run_batch(items: Sequence[str], work: Callable[[str], str], jobs: int) -> List[SlideResult]:
    """Run ``work`` per item, collecting failures instead of aborting"""

    def attempt(item: str) -> SlideResult:
        started = time.perf_counter()
        try:
            detail = work(item)
            return SlideResult(item, True, detail, execution_time=time.perf_counter() - started)
        except MilForgeError as e:
            logger.error(f"❌ {item}: {e}")
            return SlideResult(item, False, error_message=str(e), exit_code=e.exit_code,
                               execution_time=time.perf_counter() - started)
        except OSError as e:
            logger.error(f"❌ {item}: {e}")
            return SlideResult(item, False, error_message=str(e), exit_code=EXIT_DATA,
                               execution_time=time.perf_counter() - started)

    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            return list(executor.map(attempt, items))
    return [attempt(item) for item in items]


def _report_batch(results: Sequence[SlideResult], what: str) -> int:
    failed = [r for r in results if not r.success]
    for result in results:
        if result.success:
            print(f"✅ {result.slide_id}: {result.detail}")
    for result in failed:
        print(f"❌ {result.slide_id}: {result.error_message}", file=sys.stderr)
    print(f"{what}: {len(results) - len(failed)} succeeded, {len(failed)} failed")
    if not failed:
        return EXIT_OK
    return max(r.exit_code for r in failed)


def _slide_files(directory: Path) -> List[Path]:
    if not directory.is_dir():
        return []
    suffixes = PYRAMID_SUFFIXES | RASTER_SUFFIXES
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in suffixes)


def find_slide_file(directory: Path, slide_id: str) -> Path:
    files = _slide_files(directory)
    for path in files:
        if path.stem == slide_id:
            return path
    raise UnknownSlideError(slide_id, [p.stem for p in files])


# -- commands ----------------------------------------------------------------

def cmd_tile(ctx: Context) -> int:
    """Segment tissue and write one patch manifest per slide"""
    if ctx.args.slides:
        slides = [Path(s) for s in ctx.args.slides]
    else:
        slides = _slide_files(Path(ctx.config.paths.slides))
    if not slides:
        print("No slides to tile; nothing to do")
        return EXIT_OK

    params = ctx.config.segmentation
    mag = ctx.magnification
    manifest_dir = Path(ctx.config.paths.manifests)
    by_name = {str(p): p for p in slides}

    def tile_one(name: str) -> str:
        path = by_name[name]
        with open_slide(path) as slide:
            mask = segment_tissue(slide, params)
            grid = build_patch_grid(mask, slide, mag, params.min_tissue_fraction, params.patch_size)
            target = write_manifest(grid, manifest_path(manifest_dir, slide.slide_id, mag), params)
            if ctx.args.preview:
                save_mask_preview(slide, mask, manifest_dir / "previews" / f"{slide.slide_id}_mask.png")
        return f"{len(grid)} patches -> {target}"

    return _report_batch(_run_batch(list(by_name), tile_one, ctx.jobs), "tile")


def _manifested_ids(manifest_dir: Path, mag: Magnification) -> List[str]:
    suffix = f"_{mag.value}.jsonl"
    if not manifest_dir.is_dir():
        return []
    return sorted(p.name[:-len(suffix)] for p in manifest_dir.glob(f"*{suffix}"))


def cmd_featurize(ctx: Context) -> int:
    """Baseline embeddings for every manifested slide"""
    mag = ctx.magnification
    manifest_dir = Path(ctx.config.paths.manifests)
    slide_ids = list(ctx.args.slide_ids) or _manifested_ids(manifest_dir, mag)
    if not slide_ids:
        print(f"No {mag.value} manifests in {manifest_dir}; nothing to do")
        return EXIT_OK
    labels = ctx.labels() if Path(ctx.config.paths.labels).is_file() else {}
    store = ctx.store()
    slides_dir = Path(ctx.config.paths.slides)

    def featurize_one(slide_id: str) -> str:
        path = manifest_path(manifest_dir, slide_id, mag)
        if not path.is_file():
            raise UnknownSlideError(slide_id, _manifested_ids(manifest_dir, mag))
        grid = read_manifest(path)
        with open_slide(find_slide_file(slides_dir, slide_id), slide_id) as slide:
            bag = extract_bag(slide, grid, labels.get(slide_id, -1))
        return f"{bag.n_instances} x {bag.dim} -> {store.save(bag)}"

    return _report_batch(_run_batch(slide_ids, featurize_one, ctx.jobs), "featurize")


def cmd_import_embeddings(ctx: Context) -> int:
    """Import a raw float32 embedding stream described by a JSON sidecar"""
    store = FeatureStore(ctx.config.paths.features, ctx.args.dim)
    bag = import_embeddings(ctx.args.stream, ctx.args.descriptor, ctx.args.dim)
    path = manifest_path(ctx.config.paths.manifests, bag.slide_id, bag.magnification)
    if path.is_file():
        check_manifest_alignment(bag, read_manifest(path))
    else:
        logger.warning(f"No manifest for '{bag.slide_id}' at {bag.magnification.value}; row count not checked")
    target = store.save(bag)
    print(f"✅ {bag.slide_id}: {bag.n_instances} x {bag.dim} -> {target}")
    return EXIT_OK


def _variants(ctx: Context) -> List[MilVariant]:
    return [MilVariant.parse(ctx.args.variant)] if ctx.args.variant else list(TABLE_ORDER)


def _print_table(table: pd.DataFrame):
    for row in table.itertuples(index=False):
        print(f"{row.method:<34} {row.embedding:<10} {row.magnification:<4} "
              f"AUC {row.auc_mean:.2f} ± {row.auc_sd:.2f}   accuracy {row.accuracy_mean:.2f} ± {row.accuracy_sd:.2f}")


def cmd_train(ctx: Context) -> int:
    """Cross-validate the selected heads and write reports, checkpoints and the aggregate CSV"""
    labels = ctx.labels()
    space = ctx.label_space()
    store = ctx.store()
    store.require(labels, ctx.magnification)
    out_dir = ctx.out_dir
    runs = {}
    for variant in _variants(ctx):
        config = ctx.config.train_config(variant=variant.value, seed=ctx.args.seed, n_folds=ctx.args.folds,
                                         magnification=ctx.magnification.value, classes=list(space.class_names))
        logger.info(f"Training {variant.method_label}: {config.n_folds} folds, {len(labels)} slides")
        results = cross_validate(labels, config, store, ctx.jobs)
        run_dir = out_dir / variant.value
        run_dir.mkdir(parents=True, exist_ok=True)
        for report, model in results:
            (run_dir / f"fold_{report.fold:02d}.json").write_text(report.to_json(indent=2) + "\n", encoding="utf-8")
            save_checkpoint(model, run_dir / f"fold_{report.fold:02d}.milc")
        runs[variant.value] = [report for report, _ in results]

    if all(len(reports) >= 2 for reports in runs.values()):
        table = aggregate_table(runs)
        write_aggregate_csv(table, out_dir / "aggregate.csv")
        _print_table(table)
        print(f"Aggregate written to {out_dir / 'aggregate.csv'}")
    else:
        logger.warning("Fewer than 2 folds per head; skipping the aggregate table")
    return EXIT_OK


def cmd_evaluate(ctx: Context) -> int:
    """Score a checkpoint on labelled slides"""
    model = load_checkpoint(ctx.args.checkpoint)
    labels = ctx.labels()
    slide_ids = list(ctx.args.slides) or sorted(labels)
    unknown = [s for s in slide_ids if s not in labels]
    if unknown:
        raise UnknownSlideError(unknown[0], sorted(labels))
    store = ctx.store()
    store.require(slide_ids, ctx.magnification)
    bags = [store.load(s, ctx.magnification).with_label(labels[s]) for s in slide_ids]
    config = ctx.config.train_config(variant=model.variant.value,
                                     classes=list(ctx.label_space().class_names))
    result = evaluate(model, bags, config)
    summary = {
        "checkpoint": str(ctx.args.checkpoint),
        "n_slides": len(bags),
        "loss": result.loss,
        "accuracy": float(np.mean(result.predictions == result.labels)),
        "auc": macro_auc(result.probabilities, result.labels, model.config.n_classes),
    }
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    target = ctx.out_dir / f"evaluation_{Path(ctx.args.checkpoint).stem}.json"
    target.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"AUC {summary['auc']:.3f}  accuracy {summary['accuracy']:.3f}  ({len(bags)} slides) -> {target}")
    return EXIT_OK


def cmd_heatmap(ctx: Context) -> int:
    """Attention overlay, sidecar and top-k patches for one slide"""
    spec = ctx.config.heatmap
    mag = Magnification.parse(ctx.args.mag or spec.magnification)
    slide_id = ctx.args.slide_id
    manifest_dir = Path(ctx.config.paths.manifests)
    path = manifest_path(manifest_dir, slide_id, mag)
    if not path.is_file():
        raise UnknownSlideError(slide_id, _manifested_ids(manifest_dir, mag))
    grid = read_manifest(path)
    model = load_checkpoint(ctx.args.checkpoint)
    bag = FeatureStore(ctx.config.paths.features, model.config.d_in).load(slide_id, mag)

    overrides = {"slide_id": slide_id, "magnification": mag.value}
    if ctx.args.class_index is not None:
        overrides["class_index"] = ctx.args.class_index
    if ctx.args.top_k is not None:
        overrides["top_k"] = ctx.args.top_k
    spec = replace(spec, **overrides)

    with open_slide(find_slide_file(Path(ctx.config.paths.slides), slide_id), slide_id) as slide:
        artifacts = build_heatmap(model, bag, grid, slide, spec, ctx.out_dir / "heatmaps")
    kind = "marker overlay" if artifacts.marker_only else "heatmap"
    print(f"✅ {slide_id}: {kind} {artifacts.overlay_path}, {len(artifacts.patches)} top patches, "
          f"class {artifacts.class_index}")
    return EXIT_OK


def cmd_report(ctx: Context) -> int:
    """Rebuild the aggregate table from saved fold reports"""
    run_dir = Path(ctx.args.run_dir)
    runs = {}
    for variant in TABLE_ORDER:
        files = sorted((run_dir / variant.value).glob("fold_*.json"))
        if files:
            runs[variant.value] = [FoldReport.from_json(f.read_text(encoding="utf-8")) for f in files]
    if not runs:
        raise FormatError(f"no fold reports found under {run_dir}")
    table = aggregate_table(runs)
    write_aggregate_csv(table, run_dir / "aggregate.csv")
    _print_table(table)
    return EXIT_OK


def cmd_gradcheck(ctx: Context) -> int:
    """Central-difference check of every head on a small random bag"""
    seed = ctx.args.seed if ctx.args.seed is not None else ctx.config.train.seed
    n_classes = ctx.args.classes or 2
    rng = substream(seed, "gradcheck")
    features = rng.standard_normal((ctx.args.instances, ctx.args.dim))
    bag = FeatureBag("gradcheck", "20x", features, int(rng.integers(n_classes)))
    worst = 0.0
    for variant in _variants(ctx):
        config = ModelConfig(variant.value, ctx.args.dim, n_classes, embed_dim=5, attn_dim=4, dropout=0.0)
        model = MilModel.initialize(config, substream(seed, "gradcheck-init", variant.code))
        loss_kwargs = {"c2": 0.3, "n_cluster": 2}

        def loss_fn(params):
            return total_loss(bag, model.with_params(params), **loss_kwargs).total

        def grad_fn(params):
            return loss_and_gradients(bag, model.with_params(params), **loss_kwargs)[1]

        errors = gradient_check(loss_fn, grad_fn, model.params)
        variant_worst = max(errors.values())
        worst = max(worst, variant_worst)
        status = "✅" if variant_worst <= GRADCHECK_TOLERANCE else "❌"
        print(f"{status} {variant.value:<14} max relative error {variant_worst:.2e}")
        for name, error in errors.items():
            logger.debug(f"{variant.value} {name}: {error:.2e}")
    return EXIT_OK if worst <= GRADCHECK_TOLERANCE else EXIT_INTERNAL


# -- parser ------------------------------------------------------------------

def _seed_argument(text: str) -> int:
    try:
        return check_seed(int(text))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid seed '{text}': expected an integer in [0, 2**64)") from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="project TOML file")
    common.add_argument("--seed", type=_seed_argument, help="run seed (overrides [train].seed)")
    common.add_argument("--jobs", type=int, help="parallel workers (default: available cores)")
    common.add_argument("--mag", choices=[m.value for m in Magnification], help="patch magnification")
    common.add_argument("--variant", choices=[v.value for v in MilVariant], help="single head to run")
    common.add_argument("--classes", type=int, choices=[2, 3], help="3-class task or the 2 extreme classes")
    common.add_argument("--folds", type=int, help="number of cross-validation resamples")
    common.add_argument("--out", help="output directory (overrides [paths].output)")
    common.add_argument("--log-level", help="log level (default: $MILFORGE_LOG or WARNING)")

    # shared flags are attached per subcommand
    parser = _Parser(prog="milforge", description="Attention-based multiple instance learning for slide images")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    tile = sub.add_parser("tile", aliases=["segment"], parents=[common], help="segment tissue and write manifests")
    tile.add_argument("slides", nargs="*", help="slide files (default: every slide in [paths].slides)")
    tile.add_argument("--preview", action="store_true", help="also write tissue mask previews")
    tile.set_defaults(handler=cmd_tile)

    featurize = sub.add_parser("featurize", parents=[common], help="baseline embeddings from manifests")
    featurize.add_argument("slide_ids", nargs="*")
    featurize.set_defaults(handler=cmd_featurize)

    importer = sub.add_parser("import-embeddings", parents=[common], help="import an external embedding stream")
    importer.add_argument("stream")
    importer.add_argument("descriptor")
    importer.add_argument("--dim", type=int, help="expected embedding dimension")
    importer.set_defaults(handler=cmd_import_embeddings)

    train = sub.add_parser("train", parents=[common], help="cross-validate MIL heads")
    train.set_defaults(handler=cmd_train)

    evaluate_cmd = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    evaluate_cmd.add_argument("checkpoint")
    evaluate_cmd.add_argument("--slides", nargs="*", default=[], help="slide ids (default: all labelled)")
    evaluate_cmd.set_defaults(handler=cmd_evaluate)

    heatmap = sub.add_parser("heatmap", parents=[common], help="render an attention heatmap")
    heatmap.add_argument("slide_id")
    heatmap.add_argument("checkpoint")
    heatmap.add_argument("--class", dest="class_index", type=int, help="class branch (default: predicted)")
    heatmap.add_argument("--top-k", type=int, help="patches to export (default 5)")
    heatmap.set_defaults(handler=cmd_heatmap)

    report = sub.add_parser("report", parents=[common], help="aggregate saved fold reports")
    report.add_argument("run_dir")
    report.set_defaults(handler=cmd_report)

    gradcheck = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    gradcheck.add_argument("--dim", type=int, default=6)
    gradcheck.add_argument("--instances", type=int, default=5)
    gradcheck.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        if args.jobs is not None and args.jobs < 1:
            raise ConfigurationError(f"--jobs must be >= 1, got {args.jobs}")
        if args.folds is not None and args.folds < 1:
            raise ConfigurationError(f"--folds must be >= 1, got {args.folds}")
        config = load_config(args.config)
        return args.handler(Context(args, config))
    except MilForgeError as e:
        print(f"milforge {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure in '{args.command}'")
        print(f"milforge {args.command}: internal error: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
