import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.config import PRESETS, TrainConfig, load_train_config, logger
from src.core import TrainingAborted, VaeEvaluator, VaeTrainer, embed_samples, train_test_split_or_default
from src.data import resample_wbt, select_split, split_by_patient
from src.io_adapters import (
    read_embeddings,
    read_wbt_csv,
    write_embeddings,
    write_grids,
    write_pgm,
    write_ppm,
    write_projection,
)
from src.latent import PROJECTION_METHODS, ClassKdeSet, generate_pairs, project
from src.models import Diagnosis
from src.storage import CheckpointFormatError, CheckpointStorage, DatasetStorage, KdeStorage, atomic_write_bytes
from src.synth import class_counts_from_ratio, synth_dataset
from src.tensor import ShapeError

EXIT_OK = 0
EXIT_RUNTIME_ERROR = 1
EXIT_USAGE = 2


class MmtVaeCLI:
    """Command-line interface over every stage of the pipeline."""

    def __init__(self) -> None:
        self.parser = self._build_parser()

    @staticmethod
    def _add_global_flags(parser: argparse.ArgumentParser, suppress: bool = False) -> None:
        """
        Add the flags every subcommand shares.

        Args:
            parser: Top-level parser, or the parent of the subcommand parsers
            suppress: Leave absent flags out of the namespace so a value given
                before the subcommand is kept
        """

        def default(value: object) -> object:
            return argparse.SUPPRESS if suppress else value

        parser.add_argument("--seed", type=int, default=default(None), help="Seed overriding the config (default: 0)")
        parser.add_argument("--config", default=default(None), help="JSON file overriding preset values")
        parser.add_argument(
            "--preset", choices=PRESETS, default=default("desk"), help="Base configuration (default: desk)"
        )
        parser.add_argument("--verbose", action="store_true", default=default(False), help="Log at debug level")

    def _build_parser(self) -> argparse.ArgumentParser:
        common = argparse.ArgumentParser(add_help=False)
        self._add_global_flags(common, suppress=True)

        parser = argparse.ArgumentParser(
            prog="mmtvae", description="Multi-modal triplet VAE for paired otoscopy images and WBT"
        )
        self._add_global_flags(parser)
        sub = parser.add_subparsers(dest="command", required=True)

        synth = sub.add_parser("synth", parents=[common], help="Generate a synthetic paired dataset")
        counts = synth.add_mutually_exclusive_group()
        counts.add_argument("--n-per-class", type=int, default=None, help="Samples per class (default: 100)")
        counts.add_argument("--total", type=int, default=None, help="Total samples in the clinical class ratio")
        synth.add_argument("--image-size", type=int, default=None, help="Side length (default: from preset)")
        synth.add_argument("--test-fraction", type=float, default=0.2, help="Test share (default: 0.2)")
        synth.add_argument("--out", required=True, help="Dataset directory to write")

        train = sub.add_parser("train", parents=[common], help="Train a model on a dataset directory")
        train.add_argument("--data", required=True, help="Dataset directory")
        train.add_argument("--out", required=True, help="Run directory for metrics and checkpoints")
        train.add_argument("--epochs", type=int, default=None, help="Override the number of epochs")

        embed = sub.add_parser("embed", parents=[common], help="Write encoder means of a split as CSV")
        embed.add_argument("--checkpoint", required=True)
        embed.add_argument("--data", required=True)
        embed.add_argument("--split", choices=["train", "test"], default="test")
        embed.add_argument("--out", required=True, help="Embedding CSV to write")

        fit_kde = sub.add_parser("fit-kde", parents=[common], help="Fit per-class KDEs to embeddings")
        fit_kde.add_argument("--embeddings", required=True)
        fit_kde.add_argument("--folds", type=int, default=5)
        fit_kde.add_argument("--out", required=True, help="Directory for kde.json and kde.bin")

        sample = sub.add_parser("sample", parents=[common], help="Generate class-conditional pairs")
        sample.add_argument("--checkpoint", required=True)
        sample.add_argument("--kde", required=True, help="Directory written by fit-kde")
        sample.add_argument("--class", dest="label", required=True, choices=[d.value for d in Diagnosis])
        sample.add_argument("--n", type=int, default=6)
        sample.add_argument("--out", required=True, help="Directory for PPM/PGM files and the grid CSV")

        proj = sub.add_parser("project", parents=[common], help="Project embeddings to 2-D")
        proj.add_argument("--embeddings", required=True)
        proj.add_argument("--method", choices=PROJECTION_METHODS, default="tsne")
        proj.add_argument("--perplexity", type=float, default=30.0)
        proj.add_argument("--max-iter", type=int, default=1000)
        proj.add_argument("--out", required=True, help="Projection CSV to write")

        evaluate = sub.add_parser("eval", parents=[common], help="Write an evaluation report")
        evaluate.add_argument("--checkpoint", required=True)
        evaluate.add_argument("--data", required=True)
        evaluate.add_argument("--split", choices=["train", "test"], default="test")
        evaluate.add_argument("--n-generated", type=int, default=500)
        evaluate.add_argument("--folds", type=int, default=5, help="KDE cross-validation folds")
        evaluate.add_argument("--out", required=True, help="Report JSON to write")

        resample = sub.add_parser("resample-wbt", parents=[common], help="Regrid a raw WBT table")
        resample.add_argument("--input", required=True, help="CSV: frequencies across, pressures down")
        resample.add_argument("--steps", type=int, default=64)
        resample.add_argument("--out", required=True, help="Output path prefix for .pgm and .csv")
        return parser

    def parse_arguments(self, argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
        """Parse command-line arguments."""
        return self.parser.parse_args(argv)

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """
        Run one subcommand.

        Returns:
            0 on success, 2 on a usage error, 1 on any runtime error
        """
        try:
            args = self.parse_arguments(argv)
        except SystemExit as e:
            return EXIT_OK if e.code in (0, None) else EXIT_USAGE

        if args.verbose:
            logger.setLevel(logging.DEBUG)

        handlers = {
            "synth": self._run_synth,
            "train": self._run_train,
            "embed": self._run_embed,
            "fit-kde": self._run_fit_kde,
            "sample": self._run_sample,
            "project": self._run_project,
            "eval": self._run_eval,
            "resample-wbt": self._run_resample_wbt,
        }
        try:
            handlers[args.command](args)
        except KeyboardInterrupt:
            logger.info("Interrupted by user.")
            return EXIT_RUNTIME_ERROR
        except TrainingAborted as e:
            logger.error(f"{e} (last good checkpoint: {e.last_checkpoint})")
            return EXIT_RUNTIME_ERROR
        except (OSError, ValueError, KeyError, CheckpointFormatError, ShapeError) as e:
            logger.error(f"{args.command} failed: {e}")
            return EXIT_RUNTIME_ERROR
        except Exception as e:
            logger.error(f"An error occurred: {e}", exc_info=True)
            return EXIT_RUNTIME_ERROR
        return EXIT_OK

    def _config(self, args: argparse.Namespace) -> TrainConfig:
        return load_train_config(args.preset, args.config, args.seed)

    def _run_synth(self, args: argparse.Namespace) -> None:
        config = self._config(args)
        image_size = args.image_size or config.model.image_size
        class_counts: Optional[Dict[Diagnosis, int]] = None
        if args.total is not None:
            class_counts = class_counts_from_ratio(args.total)
        n_per_class = args.n_per_class if args.n_per_class is not None else 100
        samples = synth_dataset(n_per_class, image_size, config.seed, class_counts=class_counts)
        split = split_by_patient(samples, args.test_fraction, config.seed)
        DatasetStorage.save(Path(args.out), samples, split)

    def _run_train(self, args: argparse.Namespace) -> None:
        config = self._config(args)
        if args.epochs is not None:
            config = config.merged({"epochs": args.epochs})
        samples, split = DatasetStorage.load(Path(args.data))
        split, derived = train_test_split_or_default(samples, split, config.seed)
        if derived:
            logger.warning("Dataset has no stored split; derived one from the seed")
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out_dir / "config.json", json.dumps(config.to_dict(), indent=2).encode("utf-8"))
        result = VaeTrainer(config, out_dir).train(samples, split)
        logger.info(f"Training finished; best epoch-mean total {result.best_total:.5f}")

    def _load_split(self, args: argparse.Namespace, seed: int):
        samples, split = DatasetStorage.load(Path(args.data))
        split, _ = train_test_split_or_default(samples, split, seed)
        return samples, split

    def _run_embed(self, args: argparse.Namespace) -> None:
        checkpoint = CheckpointStorage.load(Path(args.checkpoint))
        samples, split = self._load_split(args, checkpoint.seed)
        subset = select_split(samples, split, args.split)
        if not subset:
            raise ValueError(f"Split '{args.split}' is empty")
        mu = embed_samples(checkpoint.model, subset)
        write_embeddings(Path(args.out), [s.sample_id for s in subset], [s.label for s in subset], mu)

    def _run_fit_kde(self, args: argparse.Namespace) -> None:
        config = self._config(args)
        _, labels, mu = read_embeddings(Path(args.embeddings))
        kdes = ClassKdeSet.fit(mu, labels, folds=args.folds, seed=config.seed)
        KdeStorage.save(Path(args.out), kdes)

    def _run_sample(self, args: argparse.Namespace) -> None:
        config = self._config(args)
        checkpoint = CheckpointStorage.load(Path(args.checkpoint))
        kdes = KdeStorage.load(Path(args.kde))
        label = Diagnosis.from_string(args.label)
        pairs = generate_pairs(kdes, checkpoint.model, label, args.n, np.random.default_rng(config.seed))

        out_dir = Path(args.out)
        names: List[str] = []
        grids: List[np.ndarray] = []
        for index, (image, wbt) in enumerate(pairs):
            stem = f"{label.value}_{index}"
            write_ppm(out_dir / f"{stem}_image.ppm", image)
            write_pgm(out_dir / f"{stem}_wbt.pgm", wbt)
            names.append(stem)
            grids.append(wbt)
        write_grids(out_dir / f"{label.value}_wbt_grids.csv", names, grids)
        logger.info(f"Wrote {len(pairs)} generated {label.value} pairs to {out_dir}")

    def _run_project(self, args: argparse.Namespace) -> None:
        config = self._config(args)
        sample_ids, labels, mu = read_embeddings(Path(args.embeddings))
        result = project(
            mu,
            method=args.method,
            sample_ids=sample_ids,
            labels=labels,
            perplexity=args.perplexity,
            max_iter=args.max_iter,
            seed=config.seed,
        )
        write_projection(Path(args.out), result.sample_ids, result.labels, result.coords)

    def _run_eval(self, args: argparse.Namespace) -> None:
        config = self._config(args)
        checkpoint = CheckpointStorage.load(Path(args.checkpoint))
        samples, split = self._load_split(args, checkpoint.seed)
        evaluator = VaeEvaluator(checkpoint.model, checkpoint.train_config)
        report = evaluator.evaluate(
            samples,
            split,
            split_name=args.split,
            n_generated=args.n_generated,
            folds=args.folds,
            seed=config.seed,
        )
        report["epoch"] = checkpoint.epoch
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out, json.dumps(report, indent=2).encode("utf-8"))
        logger.info(f"Wrote evaluation report to {out}")

    def _run_resample_wbt(self, args: argparse.Namespace) -> None:
        grid = resample_wbt(read_wbt_csv(Path(args.input)), steps=args.steps)
        prefix = Path(args.out)
        write_pgm(prefix.with_suffix(".pgm"), grid)
        write_grids(prefix.with_suffix(".csv"), [prefix.stem], [grid])
        logger.info(f"Regridded {args.input} onto {args.steps}x{args.steps}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point of the `mmtvae` console script."""
    return MmtVaeCLI().run(argv)


if __name__ == "__main__":
    sys.exit(main())
