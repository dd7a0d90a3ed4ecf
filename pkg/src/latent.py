"""
Per-class kernel density models over latent means, class-conditional
generation and 2-D projections of embeddings.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist, squareform
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE
from sklearn.manifold._utils import _binary_search_perplexity
from sklearn.model_selection import GridSearchCV, KFold
from sklearn.neighbors import KernelDensity

from src.config import logger
from src.models import Diagnosis
from src.tensor import no_grad
from src.vae import MultiModalVae

PROJECTION_METHODS = ("pca", "tsne")


@dataclass(frozen=True, eq=False)
class KdeModel:
    """Isotropic Gaussian KDE: p(z) = mean_i N(z; z_i, h^2 I)."""

    label: Diagnosis
    points: np.ndarray
    bandwidth: float
    cv_scores: Optional[np.ndarray] = None
    bandwidth_grid: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.points.ndim != 2 or self.points.shape[0] < 2:
            raise ValueError(f"KDE needs at least 2 points of shape (n, d), got {self.points.shape}")
        if not self.bandwidth > 0.0:
            raise ValueError(f"Bandwidth must be > 0, got {self.bandwidth}")

    @property
    def latent_dim(self) -> int:
        return int(self.points.shape[1])

    @property
    def n_points(self) -> int:
        return int(self.points.shape[0])

    def _estimator(self) -> KernelDensity:
        return KernelDensity(kernel="gaussian", bandwidth=self.bandwidth).fit(self.points)

    def log_density(self, z: np.ndarray) -> np.ndarray:
        """Log density at each row of `z`."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[1] != self.latent_dim:
            raise ValueError(f"Expected {self.latent_dim}-dimensional queries, got {z.shape[1]}")
        return self._estimator().score_samples(z)

    def density(self, z: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(z))


def default_bandwidth_grid(points: np.ndarray, count: int = 20) -> np.ndarray:
    """
    Log-spaced candidates spanning [0.05, 5] x median pairwise distance / sqrt(d).

    Raises:
        ValueError: If all points coincide
    """
    points = np.asarray(points, dtype=float)
    scale = float(np.median(pdist(points))) / np.sqrt(points.shape[1])
    if not scale > 0.0:
        raise ValueError("Cannot derive a bandwidth scale: the points coincide")
    return scale * np.logspace(np.log10(0.05), np.log10(5.0), count)


def _mean_log_likelihood(estimator: KernelDensity, X: np.ndarray, y: Optional[np.ndarray] = None) -> float:
    return float(np.mean(estimator.score_samples(X)))


def fit_kde(
    points: np.ndarray,
    label: Diagnosis,
    bandwidth_grid: Optional[Sequence[float]] = None,
    folds: int = 5,
    seed: int = 0,
) -> KdeModel:
    """
    Fit a KDE whose bandwidth maximizes mean held-out log-likelihood.

    Args:
        points: (n, d) latent means of one class
        label: Class the points belong to
        bandwidth_grid: Candidate bandwidths; a scale-aware default if None
        folds: Cross-validation folds
        seed: Fold shuffling seed

    Returns:
        The fitted model; ties between candidates go to the smaller bandwidth

    Raises:
        ValueError: If there are fewer points than folds or every candidate is degenerate
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ValueError(f"Expected (n, d) points, got shape {points.shape}")
    if points.shape[0] < folds:
        raise ValueError(f"Need at least {folds} points for {folds}-fold CV, got {points.shape[0]}")

    grid = default_bandwidth_grid(points) if bandwidth_grid is None else np.asarray(bandwidth_grid, dtype=float)
    grid = np.sort(grid)

    search = GridSearchCV(
        KernelDensity(kernel="gaussian"),
        {"bandwidth": grid},
        cv=KFold(n_splits=folds, shuffle=True, random_state=seed),
        scoring=_mean_log_likelihood,
        refit=False,
    )
    search.fit(points)
    scores = np.asarray(search.cv_results_["mean_test_score"], dtype=float)
    if not np.any(np.isfinite(scores)):
        raise ValueError(f"All candidate bandwidths give degenerate likelihoods for {label.value}")

    best = int(np.argmax(np.where(np.isfinite(scores), scores, -np.inf)))
    if best in (0, grid.size - 1):
        logger.warning(f"KDE bandwidth for {label.value} sits on the grid edge ({grid[best]:.4g})")
    logger.info(f"KDE {label.value}: n={points.shape[0]}, h={grid[best]:.4g}, cv={scores[best]:.4f}")
    return KdeModel(label=label, points=points, bandwidth=float(grid[best]), cv_scores=scores, bandwidth_grid=grid)


def sample_kde(model: KdeModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Exact mixture sampling: a uniformly chosen point plus N(0, h^2 I) noise."""
    picks = rng.integers(0, model.n_points, size=n)
    noise = rng.standard_normal((n, model.latent_dim)) * model.bandwidth
    return model.points[picks] + noise


@dataclass
class ClassKdeSet:
    """One KDE per class, all over the same latent space."""

    models: Dict[Diagnosis, KdeModel] = field(default_factory=dict)

    def __post_init__(self) -> None:
        dims = {model.latent_dim for model in self.models.values()}
        if len(dims) > 1:
            raise ValueError(f"Class KDEs disagree on latent dimension: {sorted(dims)}")

    @property
    def latent_dim(self) -> int:
        if not self.models:
            raise ValueError("Empty KDE set has no latent dimension")
        return next(iter(self.models.values())).latent_dim

    def __getitem__(self, label: Diagnosis) -> KdeModel:
        if label not in self.models:
            raise KeyError(f"No KDE fitted for class {label.value}")
        return self.models[label]

    @classmethod
    def fit(
        cls,
        points: np.ndarray,
        labels: Sequence[Diagnosis],
        folds: int = 5,
        seed: int = 0,
        bandwidth_grid: Optional[Sequence[float]] = None,
    ) -> "ClassKdeSet":
        """Fit one KDE per class present in `labels`."""
        points = np.asarray(points, dtype=float)
        label_array = np.array([label.value for label in labels])
        models = {}
        for label in Diagnosis:
            members = points[label_array == label.value]
            if members.shape[0] == 0:
                logger.warning(f"No embeddings for class {label.value}; skipping its KDE")
                continue
            models[label] = fit_kde(members, label, bandwidth_grid, folds, seed)
        return cls(models=models)


def generate_pairs(
    kdes: ClassKdeSet,
    model: MultiModalVae,
    label: Diagnosis,
    n: int,
    rng: np.random.Generator,
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Decode `n` latent draws from the class KDE into (image, wbt) pairs.

    Raises:
        ValueError: If the KDE and the model disagree on latent dimension
    """
    if kdes.latent_dim != model.config.latent_dim:
        raise ValueError(
            f"KDE latent dimension {kdes.latent_dim} does not match model {model.config.latent_dim}"
        )
    z = sample_kde(kdes[label], n, rng)
    model.eval()
    with no_grad():
        images, wbts = model.decode(z)
    return [(images.data[i].copy(), wbts.data[i].copy()) for i in range(n)]


@dataclass(frozen=True, eq=False)
class ProjectionResult:
    """2-D coordinates of embedded samples."""

    coords: np.ndarray
    method: str
    sample_ids: List[str]
    labels: List[Diagnosis]

    def __post_init__(self) -> None:
        if self.coords.shape != (len(self.sample_ids), 2):
            raise ValueError(f"Expected ({len(self.sample_ids)}, 2) coordinates, got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("Projection produced non-finite coordinates")


def effective_perplexity(perplexity: float, n_points: int) -> float:
    """Clamp a t-SNE perplexity to (n - 1) / 3 for small point sets."""
    if not perplexity > 0.0:
        raise ValueError(f"Perplexity must be > 0, got {perplexity}")
    return min(float(perplexity), (n_points - 1) / 3.0)


def conditional_affinities(points: np.ndarray, perplexity: float) -> np.ndarray:
    """
    Per-point Gaussian neighbour distributions calibrated to `perplexity`.

    Runs the same per-point bandwidth search the exact t-SNE uses, on squared
    Euclidean distances.

    Args:
        points: (n, d) inputs
        perplexity: Target perplexity, before clamping

    Returns:
        (n, n) row-stochastic matrix with a zero diagonal
    """
    points = np.asarray(points, dtype=float)
    target = effective_perplexity(perplexity, points.shape[0])
    sq_distances = squareform(pdist(points, "sqeuclidean")).astype(np.float32)
    return np.asarray(_binary_search_perplexity(sq_distances, target, 0), dtype=float)


def project(
    points: np.ndarray,
    method: str = "tsne",
    sample_ids: Optional[Sequence[str]] = None,
    labels: Optional[Sequence[Diagnosis]] = None,
    perplexity: float = 30.0,
    max_iter: int = 1000,
    seed: int = 0,
) -> ProjectionResult:
    """
    Project latent means to two dimensions.

    PCA keeps the top-2 principal axes; t-SNE runs the exact (non Barnes-Hut)
    optimisation with perplexity clamped to (n - 1) / 3.

    Raises:
        ValueError: Unknown method, fewer than 3 points, or identical points
    """
    points = np.asarray(points, dtype=float)
    if method not in PROJECTION_METHODS:
        raise ValueError(f"Unknown projection method: {method}")
    n = points.shape[0]
    if points.ndim != 2 or n < 3:
        raise ValueError(f"Need at least 3 points of shape (n, d), got {points.shape}")
    if np.allclose(points, points[0]):
        raise ValueError("Degenerate covariance: all points are identical")

    sample_ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(n)]
    labels = list(labels) if labels is not None else [Diagnosis.NOE] * n

    if method == "pca":
        coords = PCA(n_components=2, svd_solver="full").fit_transform(points)
    else:
        effective = effective_perplexity(perplexity, n)
        if effective != perplexity:
            logger.info(f"t-SNE perplexity clamped from {perplexity} to {effective:.3g} for n={n}")
        coords = TSNE(
            n_components=2,
            perplexity=effective,
            method="exact",
            max_iter=max_iter,
            learning_rate=200.0,
            early_exaggeration=12.0,
            init="pca",
            random_state=seed,
        ).fit_transform(points)
    return ProjectionResult(coords=np.asarray(coords, dtype=float), method=method, sample_ids=sample_ids, labels=labels)
