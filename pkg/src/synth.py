"""
Synthetic paired otoscopy/WBT data.

Every sample is rendered from one `SynthFactors` record: the WBT as a smooth
absorbance surface on a device-like grid (then regridded), the image as a
tympanic-membrane disk whose hue, bulge shading and effusion tint follow the
class. Both modalities therefore carry the same class signal without any
pixel-to-pixel correspondence.
"""

import colorsys
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from src.config import logger
from src.data import resample_wbt
from src.models import Diagnosis, PairedSample, SynthFactors, WbtRawGrid

# Device-native sweep: 200 -> -300 daPa, 226 Hz -> 8 kHz
RAW_PRESSURES = np.linspace(200.0, -300.0, 101)
RAW_FREQUENCIES = np.geomspace(226.0, 8000.0, 107)

# Clinical class proportions (NOE : OME : AOM)
CLASS_RATIO: Dict[Diagnosis, int] = {Diagnosis.NOE: 537, Diagnosis.OME: 419, Diagnosis.AOM: 211}

_FACTOR_RANGES: Dict[Diagnosis, Dict[str, Tuple[float, float]]] = {
    Diagnosis.AOM: {
        "absorbance_level": (0.05, 0.25),
        "pressure_peak_center": (-40.0, 40.0),
        "peak_sharpness": (0.8, 1.25),
        "membrane_hue": (0.0, 0.03),
        "bulge": (0.6, 1.0),
        "effusion_level": (0.2, 0.6),
    },
    Diagnosis.OME: {
        "absorbance_level": (0.05, 0.30),
        "pressure_peak_center": (-40.0, 40.0),
        "peak_sharpness": (0.8, 1.25),
        "membrane_hue": (0.11, 0.16),
        "bulge": (0.0, 0.3),
        "effusion_level": (0.5, 1.0),
    },
    Diagnosis.NOE: {
        "absorbance_level": (0.45, 0.85),
        "pressure_peak_center": (-40.0, 40.0),
        "peak_sharpness": (0.8, 1.25),
        "membrane_hue": (0.05, 0.12),
        "bulge": (0.0, 0.2),
        "effusion_level": (0.0, 0.1),
    },
}

_SATURATION = {Diagnosis.AOM: 0.75, Diagnosis.OME: 0.7, Diagnosis.NOE: 0.08}
_EFFUSION_TINT = np.array([0.9, 0.7, 0.25])


def draw_factors(label: Diagnosis, rng_seed: int) -> SynthFactors:
    """Draw class-conditioned factors from a generator seeded with `rng_seed`."""
    rng = np.random.default_rng(rng_seed)
    ranges = _FACTOR_RANGES[label]
    values = {name: float(rng.uniform(low, high)) for name, (low, high) in ranges.items()}
    return SynthFactors(label=label, rng_seed=rng_seed, **values)


def _normalized_log_frequency(frequencies: np.ndarray) -> np.ndarray:
    """0 at 226 Hz, 1 at 4 kHz."""
    return np.log(frequencies / 226.0) / np.log(4000.0 / 226.0)


def render_wbt_raw(
    factors: SynthFactors,
    pressures: np.ndarray = RAW_PRESSURES,
    frequencies: np.ndarray = RAW_FREQUENCIES,
) -> WbtRawGrid:
    """
    Render the absorbance surface implied by `factors`.

    AOM and OME are flat across pressure at a low level; AOM adds a
    mid/high-frequency hump that grows with the bulge, OME loses absorbance
    towards high frequencies as effusion grows. NOE is a pressure ridge centred
    on `pressure_peak_center` that rises with frequency.
    """
    fn = _normalized_log_frequency(frequencies)[None, :]
    p = pressures[:, None]
    ones = np.ones((pressures.size, frequencies.size))
    level = factors.absorbance_level

    if factors.label is Diagnosis.AOM:
        hump = (0.25 + 0.1 * factors.bulge) * np.exp(-(((fn - 0.7) / 0.2) ** 2))
        surface = (level + hump) * ones
    elif factors.label is Diagnosis.OME:
        surface = level * (1.0 - 0.7 * factors.effusion_level * np.clip(fn, 0.0, 1.0)) * ones
    else:
        width = 100.0 / factors.peak_sharpness
        ridge = 0.3 + 0.7 * np.exp(-(((p - factors.pressure_peak_center) / width) ** 2))
        surface = level * (0.7 + 0.3 * np.clip(fn, 0.0, 1.0)) * ridge

    return WbtRawGrid(
        pressures=np.asarray(pressures, dtype=float),
        frequencies=np.asarray(frequencies, dtype=float),
        absorbance=np.clip(surface, 0.0, 1.0),
    )


def render_image(factors: SynthFactors, size: int) -> np.ndarray:
    """
    Render a (3, size, size) otoscopy-like image in [0, 1].

    A membrane disk on a dark background: class hue, a dome highlight scaled by
    the bulge, an amber effusion tint towards the rim and a bright malleus
    stripe that the bulge partly hides.
    """
    rng = np.random.default_rng(factors.rng_seed + 1)
    cx, cy = rng.uniform(-0.08, 0.08, size=2)
    radius = rng.uniform(0.70, 0.85)
    angle = np.deg2rad(rng.uniform(100.0, 130.0))

    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - cx, yy - cy
    rr = np.sqrt(dx**2 + dy**2) / radius
    membrane = expit((1.0 - rr) * size / 4.0)

    base = np.array(
        colorsys.hsv_to_rgb(factors.membrane_hue, _SATURATION[factors.label], 0.85)
    )[:, None, None]
    dome = np.clip(1.0 - rr**2, 0.0, 1.0)
    shade = 1.0 - 0.15 * factors.bulge + 0.35 * factors.bulge * dome
    rim = np.clip(rr, 0.0, 1.0) ** 2
    tint_weight = 0.5 * factors.effusion_level * rim
    color = base * shade * (1.0 - tint_weight) + _EFFUSION_TINT[:, None, None] * tint_weight

    # Malleus: a short bright segment from the centre towards the upper rim
    ux, uy = np.cos(angle), -np.sin(angle)
    along = dx * ux + dy * uy
    across = np.abs(-dx * uy + dy * ux)
    on_segment = (along >= 0.0) & (along <= 0.6 * radius)
    stripe = np.where(on_segment, np.exp(-((across / 0.05) ** 2)), 0.0)
    malleus = 0.35 * (1.0 - 0.7 * factors.bulge) * stripe

    background = 0.04 * (1.0 - 0.5 * np.clip(rr / 1.5, 0.0, 1.0))
    image = background * (1.0 - membrane) + membrane * (color + malleus)
    return np.clip(image, 0.0, 1.0)


def class_counts_from_ratio(total: int) -> Dict[Diagnosis, int]:
    """Split `total` samples in the clinical class ratio, every class getting at least 2."""
    weight = sum(CLASS_RATIO.values())
    counts = {label: max(2, int(round(total * share / weight))) for label, share in CLASS_RATIO.items()}
    return {label: counts[label] for label in Diagnosis}


def synth_dataset(
    n_per_class: int,
    image_size: int,
    seed: int,
    class_counts: Optional[Dict[Diagnosis, int]] = None,
    max_samples_per_patient: int = 3,
) -> List[PairedSample]:
    """
    Generate a deterministic synthetic paired dataset.

    Args:
        n_per_class: Samples per class when `class_counts` is not given
        image_size: Side length of both the image and the regridded WBT
        seed: Master seed; the same seed yields a bit-identical dataset
        class_counts: Optional per-class sample counts
        max_samples_per_patient: Patients own between 1 and this many samples

    Returns:
        Samples ordered by class, each carrying its SynthFactors
    """
    if class_counts is None:
        if n_per_class < 1:
            raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
        class_counts = {label: n_per_class for label in Diagnosis}

    rng = np.random.default_rng(seed)
    drafts = []
    for label in Diagnosis:
        for index in range(class_counts.get(label, 0)):
            factors = draw_factors(label, int(rng.integers(0, 2**31 - 1)))
            drafts.append((f"{label.value}-{index:04d}", factors))

    # Patients own a few samples each, assigned over a shuffled order
    patient_of: Dict[int, str] = {}
    order = rng.permutation(len(drafts))
    cursor, patient = 0, 0
    while cursor < len(order):
        take = int(rng.integers(1, max_samples_per_patient + 1))
        for position in order[cursor : cursor + take]:
            patient_of[int(position)] = f"P{patient:04d}"
        cursor += take
        patient += 1

    samples = []
    for position, (sample_id, factors) in enumerate(drafts):
        wbt = resample_wbt(render_wbt_raw(factors), steps=image_size)
        samples.append(
            PairedSample(
                image=render_image(factors, image_size),
                wbt=wbt,
                label=factors.label,
                patient_id=patient_of[position],
                sample_id=sample_id,
                factors=factors,
            )
        )
    logger.info(
        f"Synthesized {len(samples)} samples from {patient} patients "
        f"({', '.join(f'{k.value}={v}' for k, v in class_counts.items())})"
    )
    return samples
