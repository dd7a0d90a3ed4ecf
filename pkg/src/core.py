from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import silhouette_score
from sklearn.neighbors import NearestCentroid

from src.config import TrainConfig, logger
from src.data import BalancedBatchSampler, augment, select_split, split_by_patient, stack_batch
from src.io_adapters import MetricsCsvLog, MetricsSink, ScalarCsvLog
from src.latent import ClassKdeSet, generate_pairs
from src.losses import LossReport, compute_losses
from src.models import Diagnosis, PairedSample, SplitManifest
from src.optim import AdamState, adam_step
from src.storage import CheckpointStorage
from src.tensor import NonFiniteError, no_grad
from src.vae import MultiModalVae

LATEST_CHECKPOINT = "latest.ckpt"
BEST_CHECKPOINT = "best.ckpt"
METRICS_FILE = "metrics.csv"
SILHOUETTE_FILE = "silhouette.csv"


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss or gradient stops training."""

    def __init__(self, message: str, last_checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def embed_samples(model: MultiModalVae, samples: Sequence[PairedSample], batch_size: int = 64) -> np.ndarray:
    """Encoder means for `samples` in eval mode, shape (n, latent_dim)."""
    model.eval()
    chunks = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            images, wbts, _ = stack_batch(samples[start : start + batch_size])
            mu, _ = model.encode(images, wbts)
            chunks.append(mu.data.copy())
    if not chunks:
        return np.zeros((0, model.config.latent_dim))
    return np.concatenate(chunks, axis=0)


def class_silhouette(mu: np.ndarray, labels: Sequence[Diagnosis]) -> float:
    """Silhouette of the latent means grouped by class; 0.0 when undefined."""
    label_values = [label.value for label in labels]
    if len(set(label_values)) < 2 or len(label_values) <= len(set(label_values)):
        logger.warning("Silhouette undefined for fewer than two classes; reporting 0.0")
        return 0.0
    return float(silhouette_score(mu, label_values, metric="euclidean"))


@dataclass
class TrainResult:
    model: MultiModalVae
    adam: AdamState
    history: List[LossReport] = field(default_factory=list)
    best_total: float = float("inf")
    out_dir: Optional[Path] = None


class VaeTrainer:
    """Runs the balanced-batch Adam loop and writes metrics and checkpoints."""

    def __init__(self, config: TrainConfig, out_dir: Path, metrics_sink: Optional[MetricsSink] = None):
        self.config = config
        self.out_dir = Path(out_dir)
        self.latest_path = self.out_dir / LATEST_CHECKPOINT
        self.best_path = self.out_dir / BEST_CHECKPOINT
        self.metrics_sink = metrics_sink

    def _last_good(self) -> Optional[Path]:
        return self.latest_path if self.latest_path.exists() else None

    def _save(self, path: Path, model: MultiModalVae, adam: AdamState, epoch: int, report: LossReport) -> None:
        CheckpointStorage.save(
            path,
            model,
            adam,
            epoch=epoch,
            seed=self.config.seed,
            metrics=report.to_dict(),
            train_config=self.config,
        )

    def train(
        self,
        samples: Sequence[PairedSample],
        split: Optional[SplitManifest] = None,
        model: Optional[MultiModalVae] = None,
    ) -> TrainResult:
        """
        Train on the train split of `samples`.

        Args:
            samples: The whole dataset
            split: Patient split; derived from the seed when None
            model: Optional model to continue from; a freshly seeded one otherwise

        Returns:
            The trained model, its optimizer state and the per-epoch loss means

        Raises:
            ValueError: If a class has no training samples
            TrainingAborted: On a non-finite loss or gradient
        """
        cfg = self.config
        split = split or split_by_patient(samples, seed=cfg.seed)
        train_set = select_split(samples, split, "train")
        test_set = select_split(samples, split, "test")

        sampler_seed, augment_seed, noise_seed = np.random.SeedSequence(cfg.seed).spawn(3)
        sampler = BalancedBatchSampler(train_set, cfg.per_class_batch, np.random.default_rng(sampler_seed))
        augment_rng = np.random.default_rng(augment_seed)
        noise_rng = np.random.default_rng(noise_seed)

        model = model or MultiModalVae(cfg.model, seed=cfg.seed)
        params = model.parameters()
        adam = AdamState(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)

        self.out_dir.mkdir(parents=True, exist_ok=True)
        metrics_log = self.metrics_sink
        if metrics_log is None:
            metrics_log = MetricsCsvLog(self.out_dir / METRICS_FILE)
        silhouette_log = ScalarCsvLog(self.out_dir / SILHOUETTE_FILE, "silhouette") if cfg.silhouette_every > 0 else None

        logger.info(
            f"Training {model.parameter_count()} parameters on {len(train_set)} samples, "
            f"{sampler.batches_per_epoch} batches of {sampler.batch_size} per epoch for {cfg.epochs} epochs"
        )
        result = TrainResult(model=model, adam=adam, out_dir=self.out_dir)

        for epoch in range(1, cfg.epochs + 1):
            reports: List[LossReport] = []
            histograms = Counter()
            for batch in sampler:
                batch = [augment(sample, cfg.augment, augment_rng) for sample in batch]
                images, wbts, labels = stack_batch(batch)
                histogram = tuple(Counter(labels)[label] for label in Diagnosis)
                histograms[histogram] += 1
                logger.debug(f"Epoch {epoch} batch histogram {histogram}")

                model.train()
                model.zero_grad()
                try:
                    output = model(images, wbts, rng=noise_rng)
                    total, report = compute_losses(output, images, wbts, labels, cfg.loss, cfg.triplet)
                    if not np.isfinite(report.total):
                        raise NonFiniteError(f"loss is {report.total}")
                    total.backward()
                    adam_step(params, adam)
                except NonFiniteError as e:
                    last = self._last_good()
                    logger.error(f"Training aborted at epoch {epoch}: {e}; last good checkpoint: {last}")
                    raise TrainingAborted(f"Non-finite values at epoch {epoch}: {e}", last) from e
                reports.append(report)

            epoch_report = LossReport.mean(reports)
            result.history.append(epoch_report)
            metrics_log.append(epoch, epoch_report)
            logger.info(
                f"Epoch {epoch}/{cfg.epochs}: total={epoch_report.total:.5f} "
                f"triplet={epoch_report.triplet_loss:.5f} batch histograms {dict(histograms)}"
            )

            if epoch_report.total < result.best_total:
                result.best_total = epoch_report.total
                self._save(self.best_path, model, adam, epoch, epoch_report)
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                self._save(self.latest_path, model, adam, epoch, epoch_report)
            if silhouette_log is not None and epoch % cfg.silhouette_every == 0 and test_set:
                score = class_silhouette(embed_samples(model, test_set), [s.label for s in test_set])
                silhouette_log.append(epoch, score)
                logger.info(f"Epoch {epoch}: test silhouette {score:.4f}")

        model.eval()
        return result


class VaeEvaluator:
    """Scores a trained model on one split of the dataset."""

    def __init__(self, model: MultiModalVae, train_config: Optional[TrainConfig] = None):
        self.model = model
        self.train_config = train_config or TrainConfig.preset_config("desk").merged(
            {"model": model.config.to_dict()}
        )

    def split_losses(self, samples: Sequence[PairedSample], rng: np.random.Generator, batch_size: int = 60) -> LossReport:
        """Mean loss terms over `samples`, evaluated in eval mode on shuffled batches."""
        cfg = self.train_config
        order = rng.permutation(len(samples))
        reports, sizes = [], []
        self.model.eval()
        with no_grad():
            for start in range(0, len(order), batch_size):
                batch = [samples[i] for i in order[start : start + batch_size]]
                images, wbts, labels = stack_batch(batch)
                output = self.model(images, wbts, rng=rng)
                _, report = compute_losses(output, images, wbts, labels, cfg.loss, cfg.triplet)
                reports.append(report)
                sizes.append(len(batch))
        return LossReport.mean(reports, sizes)

    def evaluate(
        self,
        samples: Sequence[PairedSample],
        split: SplitManifest,
        split_name: str = "test",
        n_generated: int = 500,
        folds: int = 5,
        seed: int = 0,
    ) -> Dict[str, Any]:
        """
        Build the evaluation report for one split.

        Returns:
            A JSON-ready dict with `losses`, `silhouette`, `class_means`,
            `generation_fidelity` and `mean_wbt_l1`

        Raises:
            ValueError: If the split is missing or empty
        """
        subset = select_split(samples, split, split_name)
        if not subset:
            raise ValueError(f"Split '{split_name}' is missing or empty")
        rng = np.random.default_rng(seed)
        labels = [s.label for s in subset]

        losses = self.split_losses(subset, rng)
        mu = embed_samples(self.model, subset)
        silhouette = class_silhouette(mu, labels)

        # Classifier on dataset WBT grids scores what the generated WBTs look like
        grids = np.stack([s.wbt.reshape(-1) for s in subset])
        label_values = np.array([label.value for label in labels])
        classifier = NearestCentroid().fit(grids, label_values)

        kdes = ClassKdeSet.fit(mu, labels, folds=folds, seed=seed)
        class_means: Dict[str, Dict[str, List[List[float]]]] = {}
        fidelity: Dict[str, float] = {}
        wbt_l1: Dict[str, float] = {}

        recon_by_class = self._reconstructed_wbt_means(subset)
        for label in kdes.models:
            pairs = generate_pairs(kdes, self.model, label, n_generated, rng)
            generated = np.stack([wbt.reshape(-1) for _, wbt in pairs])
            dataset_mean = grids[label_values == label.value].mean(axis=0)
            generated_mean = generated.mean(axis=0)

            fidelity[label.value] = float(np.mean(classifier.predict(generated) == label.value))
            wbt_l1[label.value] = float(np.mean(np.abs(generated_mean - dataset_mean)))
            side = subset[0].wbt.shape[-1]
            class_means[label.value] = {
                "dataset_wbt": dataset_mean.reshape(side, side).tolist(),
                "reconstructed_wbt": recon_by_class[label].reshape(side, side).tolist(),
                "generated_wbt": generated_mean.reshape(side, side).tolist(),
            }
            logger.info(
                f"{label.value}: fidelity {fidelity[label.value]:.3f}, mean WBT L1 {wbt_l1[label.value]:.4f}"
            )

        logger.info(f"Evaluated {len(subset)} {split_name} samples: silhouette {silhouette:.4f}")
        return {
            "split": split_name,
            "n_samples": len(subset),
            "losses": losses.to_dict(),
            "silhouette": silhouette,
            "class_means": class_means,
            "generation_fidelity": fidelity,
            "mean_wbt_l1": wbt_l1,
            "bandwidths": {label.value: model.bandwidth for label, model in kdes.models.items()},
        }

    def _reconstructed_wbt_means(self, subset: Sequence[PairedSample], batch_size: int = 64) -> Dict[Diagnosis, np.ndarray]:
        sums: Dict[Diagnosis, np.ndarray] = {}
        counts: Counter = Counter()
        self.model.eval()
        with no_grad():
            for start in range(0, len(subset), batch_size):
                batch = subset[start : start + batch_size]
                images, wbts, labels = stack_batch(batch)
                mu, _ = self.model.encode(images, wbts)
                _, recon = self.model.decode(mu)
                for row, label in zip(recon.data, labels):
                    flat = row.reshape(-1)
                    sums[label] = flat.copy() if label not in sums else sums[label] + flat
                    counts[label] += 1
        return {label: total / counts[label] for label, total in sums.items()}


def train_test_split_or_default(
    samples: Sequence[PairedSample], split: Optional[SplitManifest], seed: int
) -> Tuple[SplitManifest, bool]:
    """The stored split, or a fresh seeded one (flagged True) when none was stored."""
    if split is not None:
        return split, False
    return split_by_patient(samples, seed=seed), True
