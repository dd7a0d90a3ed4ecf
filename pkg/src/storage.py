"""
Binary tensor records and the files built from them.

Container layout (all integers little-endian):

    b"MMTV" | u32 version | u32 header length | JSON header | u32 record count | records

Each record is

    u16 name length | utf-8 name | u8 dtype | u8 rank | rank x u32 extents | raw data

with dtype 0 = float32 and 1 = float64. Records are written in sorted name
order and the header with sorted keys, so equal content gives equal bytes.
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.config import ModelConfig, TrainConfig, logger
from src.latent import ClassKdeSet, KdeModel
from src.models import Diagnosis, PairedSample, SplitManifest, SynthFactors
from src.optim import AdamState
from src.vae import MultiModalVae

MAGIC = b"MMTV"
FORMAT_VERSION = 1

DTYPE_F32 = 0
DTYPE_F64 = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}

MANIFEST_FILE = "manifest.json"
SAMPLES_DIR = "samples"
KDE_JSON = "kde.json"
KDE_BIN = "kde.bin"


class CheckpointFormatError(ValueError):
    """Raised when a container file is truncated, foreign or inconsistent."""


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write `data` to a temporary sibling, then rename it over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as file:
            file.write(data)
            file.flush()
            os.fsync(file.fileno())
        os.replace(tmp_name, path)
    except OSError:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def _dump_json(data: Dict[str, Any]) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_container(header: Dict[str, Any], records: Dict[str, np.ndarray], dtype: int) -> bytes:
    """Serialize a header and named arrays into one container."""
    if dtype not in _DTYPES:
        raise ValueError(f"Unsupported record dtype code: {dtype}")
    header_bytes = _dump_json(header)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header_bytes)), header_bytes]
    chunks.append(struct.pack("<I", len(records)))
    for name in sorted(records):
        array = np.asarray(records[name])
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<BB", dtype, array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.source = source
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.blob):
            raise CheckpointFormatError(f"{self.source}: truncated at byte {self.offset}")
        chunk = self.blob[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_container(blob: bytes, source: str = "<bytes>") -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Parse a container back into its header and float64 arrays.

    Raises:
        CheckpointFormatError: On a wrong magic, unknown version or dtype, or truncation
    """
    reader = _Reader(blob, source)
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{source}: not an mmtvae container (bad magic)")
    version, header_length = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{source}: unsupported format version {version}")
    try:
        header = json.loads(reader.take(header_length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{source}: corrupt header ({e})") from None

    (count,) = reader.unpack("<I")
    records: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.take(name_length).decode("utf-8")
        dtype_code, rank = reader.unpack("<BB")
        if dtype_code not in _DTYPES:
            raise CheckpointFormatError(f"{source}: record {name} has unknown dtype {dtype_code}")
        shape = reader.unpack(f"<{rank}I")
        dtype = _DTYPES[dtype_code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape)
        records[name] = data.astype(np.float64)
    if reader.offset != len(blob):
        raise CheckpointFormatError(f"{source}: {len(blob) - reader.offset} trailing bytes")
    return header, records


def _read_bytes(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        logger.error(f"File not found: {path}")
        raise


@dataclass
class Checkpoint:
    """A restored model with its optimizer state and run metadata."""

    model: MultiModalVae
    adam: AdamState
    epoch: int
    seed: int
    metrics: Dict[str, float] = field(default_factory=dict)
    train_config: Optional[TrainConfig] = None


class CheckpointStorage:
    """Saves and restores model, batch-norm statistics and Adam moments."""

    @staticmethod
    def to_bytes(
        model: MultiModalVae,
        adam: AdamState,
        epoch: int,
        seed: int,
        metrics: Optional[Dict[str, float]] = None,
        train_config: Optional[TrainConfig] = None,
    ) -> bytes:
        header = {
            "kind": "checkpoint",
            "model_config": model.config.to_dict(),
            "epoch": int(epoch),
            "seed": int(seed),
            "metrics": {k: float(v) for k, v in (metrics or {}).items()},
            "adam": {
                "lr": adam.lr,
                "beta1": adam.beta1,
                "beta2": adam.beta2,
                "eps": adam.eps,
                "step_count": adam.step_count,
            },
            "train_config": train_config.to_dict() if train_config else None,
        }
        records: Dict[str, np.ndarray] = {}
        for name, param in model.parameters().items():
            records[f"param/{name}"] = param.data
        for name, buffer in model.buffers().items():
            records[f"buffer/{name}"] = buffer
        for name, moment in adam.m.items():
            records[f"adam/m/{name}"] = moment
        for name, moment in adam.v.items():
            records[f"adam/v/{name}"] = moment
        return encode_container(header, records, DTYPE_F64)

    @staticmethod
    def save(path: Path, model: MultiModalVae, adam: AdamState, epoch: int, seed: int, **kwargs: Any) -> None:
        """
        Atomically write a checkpoint.

        Args:
            path: Target file
            model: Model whose parameters and running statistics are stored
            adam: Optimizer moments and step count
            epoch: Epochs completed
            seed: Run seed
            **kwargs: `metrics` and `train_config` for the header
        """
        try:
            atomic_write_bytes(Path(path), CheckpointStorage.to_bytes(model, adam, epoch, seed, **kwargs))
            logger.info(f"Saved checkpoint (epoch {epoch}) to {path}")
        except OSError as e:
            logger.error(f"Error saving checkpoint {path}: {e}")
            raise

    @staticmethod
    def from_bytes(blob: bytes, source: str = "<bytes>") -> Checkpoint:
        header, records = decode_container(blob, source)
        if header.get("kind") != "checkpoint":
            raise CheckpointFormatError(f"{source}: not a checkpoint (kind={header.get('kind')})")

        model = MultiModalVae(ModelConfig.from_dict(header["model_config"]), seed=None)
        params = model.parameters()
        buffers = model.buffers()
        expected = {f"param/{n}" for n in params} | {f"buffer/{n}" for n in buffers}
        stored = {n for n in records if not n.startswith("adam/")}
        if stored != expected:
            missing = sorted(expected - stored)[:3]
            extra = sorted(stored - expected)[:3]
            raise CheckpointFormatError(f"{source}: records do not match the model (missing {missing}, extra {extra})")

        for name, param in params.items():
            value = records[f"param/{name}"]
            if value.shape != param.shape:
                raise CheckpointFormatError(f"{source}: {name} has shape {value.shape}, expected {param.shape}")
            param.data[...] = value
        for name, buffer in buffers.items():
            buffer[...] = records[f"buffer/{name}"]

        adam_header = header["adam"]
        adam = AdamState(
            lr=adam_header["lr"],
            beta1=adam_header["beta1"],
            beta2=adam_header["beta2"],
            eps=adam_header["eps"],
            step_count=adam_header["step_count"],
            m={n[len("adam/m/") :]: a for n, a in records.items() if n.startswith("adam/m/")},
            v={n[len("adam/v/") :]: a for n, a in records.items() if n.startswith("adam/v/")},
        )
        train_config = header.get("train_config")
        model.eval()
        return Checkpoint(
            model=model,
            adam=adam,
            epoch=header["epoch"],
            seed=header["seed"],
            metrics=dict(header.get("metrics", {})),
            train_config=TrainConfig.from_dict(train_config) if train_config else None,
        )

    @staticmethod
    def load(path: Path) -> Checkpoint:
        """
        Restore a checkpoint written by `save`; the model comes back in eval mode.

        Raises:
            FileNotFoundError: If the file does not exist
            CheckpointFormatError: If the file is not a valid checkpoint
        """
        blob = _read_bytes(Path(path))
        try:
            checkpoint = CheckpointStorage.from_bytes(blob, str(path))
        except CheckpointFormatError as e:
            logger.error(f"Invalid checkpoint {path}: {e}")
            raise
        logger.info(f"Loaded checkpoint (epoch {checkpoint.epoch}) from {path}")
        return checkpoint


class DatasetStorage:
    """A dataset directory: `manifest.json` plus one record file per sample."""

    @staticmethod
    def save(directory: Path, samples: List[PairedSample], split: Optional[SplitManifest] = None) -> None:
        directory = Path(directory)
        (directory / SAMPLES_DIR).mkdir(parents=True, exist_ok=True)
        try:
            for sample in samples:
                blob = encode_container(
                    {"kind": "sample", "sample_id": sample.sample_id},
                    {"image": sample.image, "wbt": sample.wbt},
                    DTYPE_F64,
                )
                atomic_write_bytes(directory / SAMPLES_DIR / f"{sample.sample_id}.bin", blob)
            manifest = {
                "kind": "dataset",
                "samples": [sample.to_dict() for sample in samples],
                "split": split.to_dict() if split else None,
            }
            atomic_write_bytes(directory / MANIFEST_FILE, json.dumps(manifest, indent=2).encode("utf-8"))
            logger.info(f"Saved {len(samples)} samples to {directory}")
        except OSError as e:
            logger.error(f"Error saving dataset to {directory}: {e}")
            raise

    @staticmethod
    def load(directory: Path) -> Tuple[List[PairedSample], Optional[SplitManifest]]:
        """
        Load every sample of a dataset directory and its stored split, if any.

        Raises:
            FileNotFoundError: If the manifest or a sample file is missing
            ValueError: If the manifest is malformed
        """
        directory = Path(directory)
        manifest_path = directory / MANIFEST_FILE
        try:
            manifest = json.loads(_read_bytes(manifest_path).decode("utf-8"))
        except json.JSONDecodeError:
            logger.error(f"Invalid JSON in dataset manifest: {manifest_path}")
            raise
        if manifest.get("kind") != "dataset":
            raise ValueError(f"{manifest_path} is not a dataset manifest")

        samples = []
        for entry in manifest["samples"]:
            path = directory / SAMPLES_DIR / f"{entry['sample_id']}.bin"
            _, records = decode_container(_read_bytes(path), str(path))
            factors = entry.get("factors")
            samples.append(
                PairedSample(
                    image=records["image"],
                    wbt=records["wbt"],
                    label=Diagnosis.from_string(entry["label"]),
                    patient_id=entry["patient_id"],
                    sample_id=entry["sample_id"],
                    factors=SynthFactors.from_dict(factors) if factors else None,
                )
            )
        split = manifest.get("split")
        logger.info(f"Loaded {len(samples)} samples from {directory}")
        return samples, SplitManifest.from_dict(split) if split else None


class KdeStorage:
    """Class KDEs as `kde.json` (metadata) plus `kde.bin` (kernel centres)."""

    @staticmethod
    def save(directory: Path, kdes: ClassKdeSet) -> None:
        directory = Path(directory)
        classes = []
        records = {}
        for label, model in kdes.models.items():
            classes.append(
                {
                    "class": label.value,
                    "bandwidth": model.bandwidth,
                    "d": model.latent_dim,
                    "n": model.n_points,
                    "bandwidth_grid": None if model.bandwidth_grid is None else model.bandwidth_grid.tolist(),
                    "cv_scores": None if model.cv_scores is None else model.cv_scores.tolist(),
                }
            )
            records[f"points/{label.value}"] = model.points
        try:
            atomic_write_bytes(
                directory / KDE_JSON,
                json.dumps({"kind": "kde", "latent_dim": kdes.latent_dim, "classes": classes}, indent=2).encode(
                    "utf-8"
                ),
            )
            atomic_write_bytes(directory / KDE_BIN, encode_container({"kind": "kde-points"}, records, DTYPE_F64))
            logger.info(f"Saved {len(classes)} class KDEs to {directory}")
        except OSError as e:
            logger.error(f"Error saving KDEs to {directory}: {e}")
            raise

    @staticmethod
    def load(directory: Path) -> ClassKdeSet:
        directory = Path(directory)
        meta = json.loads(_read_bytes(directory / KDE_JSON).decode("utf-8"))
        _, records = decode_container(_read_bytes(directory / KDE_BIN), str(directory / KDE_BIN))
        models = {}
        for entry in meta["classes"]:
            label = Diagnosis.from_string(entry["class"])
            points = records[f"points/{label.value}"]
            if points.shape != (entry["n"], entry["d"]):
                raise CheckpointFormatError(f"KDE points for {label.value} do not match kde.json")
            grid, scores = entry.get("bandwidth_grid"), entry.get("cv_scores")
            models[label] = KdeModel(
                label=label,
                points=points,
                bandwidth=float(entry["bandwidth"]),
                cv_scores=None if scores is None else np.asarray(scores, dtype=float),
                bandwidth_grid=None if grid is None else np.asarray(grid, dtype=float),
            )
        logger.info(f"Loaded {len(models)} class KDEs from {directory}")
        return ClassKdeSet(models=models)
