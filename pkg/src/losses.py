"""
Reconstruction, latent and metric-learning losses.

The training objective is

    total = image term + BCE(WBT) + latent_weight * (KL + triplet)

where the image term is 1 - mean SSIM by default.
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import LossWeights, TripletConfig, logger
from src.models import Diagnosis, Triplet
from src.tensor import ShapeError, Tensor, conv2d
from src.vae import VaeOutput

_K1, _K2 = 0.01, 0.03
BCE_CLAMP = 1e-7

Scalar = Union[Tensor, float]


@dataclass
class LossReport:
    """The four loss terms and their weighted total, as plain floats."""

    ssim_loss: float
    bce_loss: float
    kl_loss: float
    triplet_loss: float
    total: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def mean(cls, reports: Sequence["LossReport"], weights: Optional[Sequence[float]] = None) -> "LossReport":
        """Weighted average of several reports (e.g. the batches of an epoch)."""
        if not reports:
            raise ValueError("Cannot average an empty list of loss reports")
        w = np.ones(len(reports)) if weights is None else np.asarray(weights, dtype=float)
        w = w / w.sum()
        values = {
            name: float(sum(wi * getattr(r, name) for wi, r in zip(w, reports)))
            for name in ("ssim_loss", "bce_loss", "kl_loss", "triplet_loss", "total")
        }
        return cls(**values)


def _tensor(value: Union[Tensor, np.ndarray]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# *** reconstruction terms ***


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian window of shape (size, size)."""
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    profile = np.exp(-(offsets**2) / (2.0 * sigma**2))
    window = np.outer(profile, profile)
    return window / window.sum()


def ssim_map(
    x: Union[Tensor, np.ndarray],
    y: Union[Tensor, np.ndarray],
    window_size: int = 11,
    sigma: float = 1.5,
    value_range: float = 1.0,
) -> Tensor:
    """
    Local SSIM over every fully covered window position, per channel.

    Returns:
        Tensor of shape (N * C, 1, H - k + 1, W - k + 1)
    """
    x, y = _tensor(x), _tensor(y)
    if x.shape != y.shape or x.ndim != 4:
        raise ShapeError(f"SSIM needs two equal NCHW batches, got {x.shape} and {y.shape}")
    n, c, h, w = x.shape
    if window_size > h or window_size > w:
        raise ValueError(f"SSIM window {window_size} larger than the {h}x{w} image")

    window = Tensor(gaussian_window(window_size, sigma).reshape(1, 1, window_size, window_size))
    x = x.reshape(n * c, 1, h, w)
    y = y.reshape(n * c, 1, h, w)

    mu_x = conv2d(x, window)
    mu_y = conv2d(y, window)
    mu_x_sq = mu_x * mu_x
    mu_y_sq = mu_y * mu_y
    mu_xy = mu_x * mu_y

    sigma_x_sq = conv2d(x * x, window) - mu_x_sq
    sigma_y_sq = conv2d(y * y, window) - mu_y_sq
    sigma_xy = conv2d(x * y, window) - mu_xy

    c1 = (_K1 * value_range) ** 2
    c2 = (_K2 * value_range) ** 2

    luminance = (mu_xy * 2.0 + c1) / (mu_x_sq + mu_y_sq + c1)
    contrast_structure = (sigma_xy * 2.0 + c2) / (sigma_x_sq + sigma_y_sq + c2)
    return luminance * contrast_structure


def ssim_loss(
    x: Union[Tensor, np.ndarray],
    y: Union[Tensor, np.ndarray],
    window_size: int = 11,
    sigma: float = 1.5,
) -> Tensor:
    """1 - mean local SSIM; 0 for identical inputs, at most 2."""
    return 1.0 - ssim_map(x, y, window_size, sigma).mean()


def bce_loss(pred: Union[Tensor, np.ndarray], target: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean binary cross entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    pred, target = _tensor(pred), _tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"BCE needs equal shapes, got {pred.shape} and {target.shape}")
    p = pred.clip(BCE_CLAMP, 1.0 - BCE_CLAMP)
    per_element = target * p.log() + (1.0 - target) * (1.0 - p).log()
    return -per_element.mean()


# *** latent terms ***


def kl_loss(mu: Tensor, logvar: Tensor) -> Tensor:
    """Batch mean of KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims."""
    if mu.shape != logvar.shape or mu.ndim != 2:
        raise ShapeError(f"KL needs equal (N, d) tensors, got {mu.shape} and {logvar.shape}")
    per_dim = 1.0 + logvar - mu * mu - logvar.exp()
    return per_dim.sum(axis=1).mean() * -0.5


def pairwise_sq_distances(points: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between all rows of `points`."""
    diff = points[:, None, :] - points[None, :, :]
    return (diff * diff).sum(axis=-1)


def _label_indices(labels: Sequence[Union[int, Diagnosis]]) -> np.ndarray:
    return np.asarray([lab.index if isinstance(lab, Diagnosis) else int(lab) for lab in labels])


def mine_semi_hard(
    mu_batch: Union[Tensor, np.ndarray],
    labels: Sequence[Union[int, Diagnosis]],
    cfg: TripletConfig,
) -> List[Triplet]:
    """
    Pick one negative per (anchor, positive) pair from the batch means.

    The negative is the closest one inside the semi-hard band
    d(a,p) < d(a,n) < d(a,p) + margin. With an empty band the easiest hard
    negative (largest d(a,n) <= d(a,p)) is used; if every negative is already
    beyond the margin the pair is skipped. Ties go to the lowest index.

    Args:
        mu_batch: (N, d) encoder means
        labels: Class of every row
        cfg: Triplet margin

    Returns:
        Triplets ordered by anchor, then positive
    """
    points = mu_batch.data if isinstance(mu_batch, Tensor) else np.asarray(mu_batch, dtype=float)
    label_ids = _label_indices(labels)
    if points.ndim != 2 or points.shape[0] != label_ids.size:
        raise ShapeError(f"Expected (N, d) means for {label_ids.size} labels, got {points.shape}")

    distances = pairwise_sq_distances(points)
    classes, counts = np.unique(label_ids, return_counts=True)
    singletons = classes[counts < 2]
    if singletons.size:
        logger.warning(f"Classes {singletons.tolist()} appear once in the batch; no triplets for them")

    triplets: List[Triplet] = []
    for anchor in range(label_ids.size):
        same = label_ids == label_ids[anchor]
        positives = np.flatnonzero(same)
        positives = positives[positives != anchor]
        negatives = np.flatnonzero(~same)
        if positives.size == 0 or negatives.size == 0:
            continue

        d_ap = distances[anchor, positives][:, None]
        d_an = distances[anchor, negatives][None, :]

        in_band = (d_an > d_ap) & (d_an < d_ap + cfg.margin)
        hard = d_an <= d_ap
        band_choice = np.argmin(np.where(in_band, d_an, np.inf), axis=1)
        hard_choice = np.argmax(np.where(hard, d_an, -np.inf), axis=1)

        for row, positive in enumerate(positives):
            if in_band[row].any():
                negative = negatives[band_choice[row]]
            elif hard[row].any():
                negative = negatives[hard_choice[row]]
            else:
                continue
            triplets.append(Triplet(int(anchor), int(positive), int(negative)))
    return triplets


def triplet_loss(mu_batch: Tensor, triplets: Sequence[Triplet], cfg: TripletConfig) -> Tensor:
    """Mean hinge max(0, d(a,p) - d(a,n) + margin) over squared-Euclidean distances."""
    if not triplets:
        logger.warning("No triplets mined in this batch; triplet loss is 0")
        return Tensor(0.0)
    anchors = mu_batch.take_rows([t.anchor for t in triplets])
    positives = mu_batch.take_rows([t.positive for t in triplets])
    negatives = mu_batch.take_rows([t.negative for t in triplets])
    diff_ap = anchors - positives
    diff_an = anchors - negatives
    d_ap = (diff_ap * diff_ap).sum(axis=1)
    d_an = (diff_an * diff_an).sum(axis=1)
    return (d_ap - d_an + cfg.margin).relu().mean()


def total_loss(
    ssim_part: Scalar,
    bce_part: Scalar,
    kl_part: Scalar,
    triplet_part: Scalar,
    weights: Optional[LossWeights] = None,
) -> Scalar:
    """Reconstruction terms plus `latent_weight` times the latent terms."""
    weights = weights or LossWeights()
    return ssim_part + bce_part + weights.latent_weight * (kl_part + triplet_part)


def compute_losses(
    output: VaeOutput,
    image: Union[Tensor, np.ndarray],
    wbt: Union[Tensor, np.ndarray],
    labels: Sequence[Union[int, Diagnosis]],
    weights: LossWeights,
    triplet_cfg: TripletConfig,
    triplets: Optional[Sequence[Triplet]] = None,
) -> Tuple[Tensor, LossReport]:
    """
    Evaluate the full objective for one batch.

    Triplets are mined on `output.mu` unless given explicitly.

    Returns:
        The differentiable total and a float report of every term
    """
    if weights.image_loss == "ssim":
        image_term = ssim_loss(output.recon_image, image, weights.ssim_window, weights.ssim_sigma)
    else:
        image_term = bce_loss(output.recon_image, image)
    wbt_term = bce_loss(output.recon_wbt, wbt)
    kl_term = kl_loss(output.mu, output.logvar)
    if triplets is None:
        triplets = mine_semi_hard(output.mu, labels, triplet_cfg)
    triplet_term = triplet_loss(output.mu, triplets, triplet_cfg)

    total = total_loss(image_term, wbt_term, kl_term, triplet_term, weights)
    report = LossReport(
        ssim_loss=image_term.item(),
        bce_loss=wbt_term.item(),
        kl_loss=kl_term.item(),
        triplet_loss=triplet_term.item(),
        total=total.item(),
    )
    logger.debug(f"Batch losses: {report.to_dict()}")
    return total, report
