"""
WBT regridding, augmentation, patient-disjoint splitting and balanced batching.
"""

from collections import deque
from typing import Deque, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator

from src.config import AugmentConfig, logger
from src.models import Diagnosis, PairedSample, SplitManifest, WbtRawGrid

# Common WBT grid: linear pressure 180 -> -280 daPa, linear frequency 226 -> 4000 Hz
TARGET_PRESSURE_RANGE = (180.0, -280.0)
TARGET_FREQUENCY_RANGE = (226.0, 4000.0)
DEFAULT_WBT_STEPS = 64

EraseBox = Tuple[int, int, int, int]


def target_axes(steps: int = DEFAULT_WBT_STEPS) -> Tuple[np.ndarray, np.ndarray]:
    """Pressure (descending) and frequency (ascending) axes of the common grid."""
    pressures = np.linspace(TARGET_PRESSURE_RANGE[0], TARGET_PRESSURE_RANGE[1], steps)
    frequencies = np.linspace(TARGET_FREQUENCY_RANGE[0], TARGET_FREQUENCY_RANGE[1], steps)
    return pressures, frequencies


def resample_wbt(raw: WbtRawGrid, steps: int = DEFAULT_WBT_STEPS) -> np.ndarray:
    """
    Bilinearly regrid a device-native WBT measurement onto the common grid.

    Rows of the result follow pressure from 180 to -280 daPa, columns follow
    frequency from 226 Hz to 4 kHz.

    Args:
        raw: Measurement whose axes cover both target ranges
        steps: Points per axis

    Returns:
        Array of shape (1, steps, steps) clipped to [0, 1]

    Raises:
        ValueError: If the raw pressure or frequency axis does not cover the target range
    """
    p_high, p_low = TARGET_PRESSURE_RANGE
    f_low, f_high = TARGET_FREQUENCY_RANGE
    if raw.pressures.max() < p_high or raw.pressures.min() > p_low:
        raise ValueError(
            f"pressure axis [{raw.pressures.min()}, {raw.pressures.max()}] daPa "
            f"does not cover [{p_low}, {p_high}]"
        )
    if raw.frequencies.min() > f_low or raw.frequencies.max() < f_high:
        raise ValueError(
            f"frequency axis [{raw.frequencies.min()}, {raw.frequencies.max()}] Hz "
            f"does not cover [{f_low}, {f_high}]"
        )

    # The interpolator needs ascending axes
    interpolator = RegularGridInterpolator(
        (raw.pressures[::-1], raw.frequencies),
        raw.absorbance[::-1, :],
        method="linear",
        bounds_error=True,
    )
    pressures, frequencies = target_axes(steps)
    grid_p, grid_f = np.meshgrid(pressures, frequencies, indexing="ij")
    values = interpolator(np.stack([grid_p, grid_f], axis=-1))
    return np.clip(values, 0.0, 1.0)[None, :, :]


# *** augmentation ***


def random_erasing(
    array: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, max_attempts: int = 10
) -> Tuple[np.ndarray, Optional[EraseBox]]:
    """
    Fill one random rectangle of a (C, H, W) array with uniform noise.

    A rectangle is accepted only if its realised area fraction and aspect
    lie inside the configured bounds; after `max_attempts` misses the array
    is returned unchanged.

    Returns:
        The (possibly) erased copy and the (top, left, height, width) box, or None
    """
    if cfg.erase_prob <= 0.0 or rng.random() >= cfg.erase_prob:
        return array, None

    _, height, width = array.shape
    area = height * width
    for _ in range(max_attempts):
        target_area = rng.uniform(cfg.erase_area_min, cfg.erase_area_max) * area
        aspect = np.exp(rng.uniform(np.log(cfg.erase_aspect_min), np.log(cfg.erase_aspect_max)))
        box_h = int(round(np.sqrt(target_area * aspect)))
        box_w = int(round(np.sqrt(target_area / aspect)))
        if not (0 < box_h <= height and 0 < box_w <= width):
            continue
        fraction = box_h * box_w / area
        if not cfg.erase_area_min <= fraction <= cfg.erase_area_max:
            continue
        top = int(rng.integers(0, height - box_h + 1))
        left = int(rng.integers(0, width - box_w + 1))
        erased = array.copy()
        erased[:, top : top + box_h, left : left + box_w] = rng.uniform(
            0.0, 1.0, size=(array.shape[0], box_h, box_w)
        )
        return erased, (top, left, box_h, box_w)
    return array, None


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror a (C, H, W) image left to right."""
    return np.ascontiguousarray(image[:, :, ::-1])


def rotate(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """
    Bilinear rotation about the centre with zero-filled corners.

    Args:
        image: Array of shape (C, H, W) in [0, 1]
        angle_deg: Rotation angle in degrees

    Returns:
        The rotated image, same shape, clipped back to [0, 1]
    """
    rotated = ndimage.rotate(
        image, angle_deg, axes=(1, 2), reshape=False, order=1, mode="constant", cval=0.0
    )
    return np.clip(rotated, 0.0, 1.0)


def augment(sample: PairedSample, cfg: AugmentConfig, rng: np.random.Generator) -> PairedSample:
    """
    Randomly flip, rotate and erase the image; randomly erase the WBT.

    The WBT is never flipped or rotated since its axes are physical.
    Labels, ids and shapes are left untouched.

    Args:
        sample: The pair to augment
        cfg: Probabilities and ranges of each transform
        rng: Source of every random draw

    Returns:
        `sample` itself when nothing changed, a copy with new arrays otherwise
    """
    if not cfg.enabled:
        return sample

    image = sample.image
    if cfg.hflip_prob > 0.0 and rng.random() < cfg.hflip_prob:
        image = hflip(image)
    if cfg.rotation_deg > 0.0:
        image = rotate(image, rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    image, _ = random_erasing(image, cfg, rng)
    wbt, _ = random_erasing(sample.wbt, cfg, rng)

    if image is sample.image and wbt is sample.wbt:
        return sample
    return sample.with_arrays(image=image, wbt=wbt)


# *** splitting ***


def split_by_patient(
    samples: Sequence[PairedSample], test_fraction: float = 0.2, seed: int = 0
) -> SplitManifest:
    """
    Assign whole patients to train or test.

    Patients are shuffled by `seed` and moved to the test side until at least
    `test_fraction` of the samples are covered.

    Raises:
        ValueError: If the samples come from fewer than two patients
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")

    by_patient: Dict[str, List[str]] = {}
    for sample in samples:
        by_patient.setdefault(sample.patient_id, []).append(sample.sample_id)
    if len(by_patient) < 2:
        raise ValueError(f"Need at least two patients to split, got {len(by_patient)}")

    patients = sorted(by_patient)
    order = np.random.default_rng(seed).permutation(len(patients))
    needed = test_fraction * len(samples)

    patient_split: Dict[str, str] = {}
    covered = 0
    for position in order:
        patient = patients[position]
        # Always leave at least one patient for training
        if covered < needed and len(patient_split) < len(patients) - 1:
            patient_split[patient] = "test"
            covered += len(by_patient[patient])
        else:
            patient_split[patient] = "train"

    train_ids = [s.sample_id for s in samples if patient_split[s.patient_id] == "train"]
    test_ids = [s.sample_id for s in samples if patient_split[s.patient_id] == "test"]
    logger.info(
        f"Patient split: {len(train_ids)} train / {len(test_ids)} test samples "
        f"from {len(patients)} patients"
    )
    return SplitManifest(train_ids=train_ids, test_ids=test_ids, patient_split=patient_split)


def select_split(samples: Sequence[PairedSample], manifest: SplitManifest, split: str) -> List[PairedSample]:
    """
    Samples of one split, in manifest order.

    Args:
        samples: The whole dataset
        manifest: Train and test ids
        split: "train" or "test"

    Returns:
        The samples of `split`

    Raises:
        KeyError: If the manifest names an id missing from `samples`
        ValueError: If `split` is neither "train" nor "test"
    """
    by_id = {s.sample_id: s for s in samples}
    return [by_id[sample_id] for sample_id in manifest.ids_for(split)]


# *** batching ***


class BalancedBatchSampler:
    """
    Draws batches holding exactly `per_class` samples of every class.

    Each class keeps a queue of shuffled indices that persists across epochs
    and is refilled with a fresh permutation once exhausted, so minority
    classes are oversampled and no sample repeats before its class is used up.
    """

    def __init__(self, samples: Sequence[PairedSample], per_class: int, rng: np.random.Generator):
        if per_class < 1:
            raise ValueError(f"per_class must be >= 1, got {per_class}")
        self.samples = list(samples)
        self.per_class = per_class
        self.rng = rng
        self._members: Dict[Diagnosis, np.ndarray] = {}
        for label in Diagnosis:
            members = np.array([i for i, s in enumerate(self.samples) if s.label is label], dtype=int)
            if members.size == 0:
                raise ValueError(f"Class {label.value} has no samples in the training set")
            self._members[label] = members
        self._queues: Dict[Diagnosis, Deque[int]] = {label: deque() for label in Diagnosis}

    @property
    def batch_size(self) -> int:
        return self.per_class * len(Diagnosis)

    @property
    def batches_per_epoch(self) -> int:
        """Batches needed for the largest class to be seen once."""
        largest = max(members.size for members in self._members.values())
        return int(np.ceil(largest / self.per_class))

    def _draw(self, label: Diagnosis) -> List[int]:
        queue = self._queues[label]
        picked = []
        while len(picked) < self.per_class:
            if not queue:
                queue.extend(int(i) for i in self.rng.permutation(self._members[label]))
            picked.append(queue.popleft())
        return picked

    def next_batch(self) -> List[PairedSample]:
        indices = [i for label in Diagnosis for i in self._draw(label)]
        return [self.samples[i] for i in indices]

    def __iter__(self) -> Iterator[List[PairedSample]]:
        for _ in range(self.batches_per_epoch):
            yield self.next_batch()


def balanced_batches(
    samples: Sequence[PairedSample],
    per_class: int = 20,
    rng: Optional[np.random.Generator] = None,
    n_batches: Optional[int] = None,
) -> Iterator[List[PairedSample]]:
    """
    Yield class-balanced batches.

    Args:
        samples: Pool holding every class at least once
        per_class: Samples of each class per batch
        rng: Generator for the queue shuffles; a fresh unseeded one when None
        n_batches: Number of batches; one epoch when None

    Yields:
        Lists of `per_class * 3` samples, grouped by class in enum order
    """
    sampler = BalancedBatchSampler(samples, per_class, rng if rng is not None else np.random.default_rng())
    count = sampler.batches_per_epoch if n_batches is None else n_batches
    for _ in range(count):
        yield sampler.next_batch()


def stack_batch(batch: Sequence[PairedSample]) -> Tuple[np.ndarray, np.ndarray, List[Diagnosis]]:
    """
    Stack a list of samples into (N,C,H,W) image and WBT arrays plus labels.

    Returns:
        float64 images, float64 WBT grids and the labels in batch order
    """
    images = np.stack([s.image for s in batch]).astype(np.float64)
    wbts = np.stack([s.wbt for s in batch]).astype(np.float64)
    return images, wbts, [s.label for s in batch]
