from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np


class Diagnosis(Enum):
    """Enumeration of the three middle-ear classes."""

    AOM = "AOM"
    OME = "OME"
    NOE = "NOE"

    @property
    def index(self) -> int:
        return list(Diagnosis).index(self)

    @staticmethod
    def from_string(label: str) -> "Diagnosis":
        """Convert a label string to a Diagnosis enum value."""
        for diagnosis in Diagnosis:
            if diagnosis.value == label.upper():
                return diagnosis
        raise ValueError(f"Unknown diagnosis: {label}")

    @staticmethod
    def from_index(index: int) -> "Diagnosis":
        members = list(Diagnosis)
        if not 0 <= index < len(members):
            raise ValueError(f"Unknown diagnosis index: {index}")
        return members[index]


@dataclass(frozen=True)
class SynthFactors:
    """Latent generative factors behind one synthetic sample."""

    label: Diagnosis
    absorbance_level: float
    pressure_peak_center: float
    peak_sharpness: float
    membrane_hue: float
    bulge: float
    effusion_level: float
    rng_seed: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label.value,
            "absorbance_level": self.absorbance_level,
            "pressure_peak_center": self.pressure_peak_center,
            "peak_sharpness": self.peak_sharpness,
            "membrane_hue": self.membrane_hue,
            "bulge": self.bulge,
            "effusion_level": self.effusion_level,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SynthFactors":
        return cls(
            label=Diagnosis.from_string(data["label"]),
            absorbance_level=float(data["absorbance_level"]),
            pressure_peak_center=float(data["pressure_peak_center"]),
            peak_sharpness=float(data["peak_sharpness"]),
            membrane_hue=float(data["membrane_hue"]),
            bulge=float(data["bulge"]),
            effusion_level=float(data["effusion_level"]),
            rng_seed=int(data["rng_seed"]),
        )


@dataclass(frozen=True, eq=False)
class PairedSample:
    """One otoscopy image with its WBT grid, label and provenance."""

    image: np.ndarray
    wbt: np.ndarray
    label: Diagnosis
    patient_id: str
    sample_id: str
    factors: Optional[SynthFactors] = None

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.wbt.ndim != 3 or self.wbt.shape[0] != 1:
            raise ValueError(
                f"Sample {self.sample_id}: expected (C,H,W) image and (1,H,W) WBT, "
                f"got {self.image.shape} and {self.wbt.shape}"
            )
        for name, array in (("image", self.image), ("wbt", self.wbt)):
            if array.size and (array.min() < 0.0 or array.max() > 1.0):
                raise ValueError(f"Sample {self.sample_id}: {name} values outside [0, 1]")

    def with_arrays(self, image: np.ndarray, wbt: np.ndarray) -> "PairedSample":
        """Return a copy carrying new modality arrays but the same label and ids."""
        return replace(self, image=image, wbt=wbt)

    def to_dict(self) -> Dict[str, Any]:
        """Metadata for the dataset manifest; arrays are stored separately."""
        return {
            "sample_id": self.sample_id,
            "patient_id": self.patient_id,
            "label": self.label.value,
            "factors": self.factors.to_dict() if self.factors else None,
        }


@dataclass(frozen=True, eq=False)
class WbtRawGrid:
    """Absorbance over a device-native pressure x frequency grid."""

    pressures: np.ndarray
    frequencies: np.ndarray
    absorbance: np.ndarray

    def __post_init__(self) -> None:
        if self.pressures.ndim != 1 or np.any(np.diff(self.pressures) >= 0):
            raise ValueError("pressures must be a strictly descending 1-D axis")
        if self.frequencies.ndim != 1 or np.any(np.diff(self.frequencies) <= 0):
            raise ValueError("frequencies must be a strictly ascending 1-D axis")
        expected = (self.pressures.size, self.frequencies.size)
        if self.absorbance.shape != expected:
            raise ValueError(f"absorbance must be {expected}, got {self.absorbance.shape}")
        if self.absorbance.min() < 0.0 or self.absorbance.max() > 1.0:
            raise ValueError("absorbance values must lie in [0, 1]")


@dataclass(frozen=True)
class SplitManifest:
    """Patient-disjoint train/test partition of a dataset."""

    train_ids: List[str]
    test_ids: List[str]
    patient_split: Dict[str, str] = field(default_factory=dict)

    def ids_for(self, split: str) -> List[str]:
        if split == "train":
            return list(self.train_ids)
        if split == "test":
            return list(self.test_ids)
        raise ValueError(f"Unknown split: {split}")

    @property
    def test_fraction(self) -> float:
        total = len(self.train_ids) + len(self.test_ids)
        return len(self.test_ids) / total if total else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
            "patient_split": dict(self.patient_split),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SplitManifest":
        return cls(
            train_ids=list(data["train_ids"]),
            test_ids=list(data["test_ids"]),
            patient_split=dict(data.get("patient_split", {})),
        )


@dataclass(frozen=True)
class Triplet:
    """Batch indices of an anchor, a same-class positive and an other-class negative."""

    anchor: int
    positive: int
    negative: int
