"""
Readers and writers for the artifacts other tools consume: binary PPM/PGM
images and the embedding, projection, grid and metrics CSV files.

Every writer goes through a temporary sibling file and a rename, so readers
never see a partial artifact.
"""

import csv
import io
from pathlib import Path
from typing import Iterable, List, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np

from src.config import logger
from src.losses import LossReport
from src.models import Diagnosis, WbtRawGrid
from src.storage import atomic_write_bytes

METRICS_HEADER = ["epoch", "ssim", "bce", "kl", "triplet", "total"]


def to_bytes_255(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to bytes as round(255 * x), clipping out-of-range input."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def _write_file(path: Path, data: bytes) -> None:
    try:
        atomic_write_bytes(Path(path), data)
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise


def _csv_bytes(rows: Iterable[Sequence[object]]) -> bytes:
    buffer = io.StringIO(newline="")
    csv.writer(buffer).writerows(rows)
    return buffer.getvalue().encode("utf-8")


def _write_netpbm(path: Path, magic: str, width: int, height: int, payload: bytes) -> None:
    _write_file(path, f"{magic}\n{width} {height}\n255\n".encode("ascii") + payload)


def write_ppm(path: Path, image: np.ndarray) -> None:
    """Write a (3, H, W) image in [0, 1] as binary P6."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"PPM needs a (3, H, W) image, got {image.shape}")
    _, height, width = image.shape
    pixels = to_bytes_255(np.transpose(image, (1, 2, 0)))
    _write_netpbm(path, "P6", width, height, pixels.tobytes())


def write_pgm(path: Path, grid: np.ndarray) -> None:
    """Write an (H, W) or (1, H, W) grid in [0, 1] as binary P5."""
    if grid.ndim == 3 and grid.shape[0] == 1:
        grid = grid[0]
    if grid.ndim != 2:
        raise ValueError(f"PGM needs an (H, W) grid, got {grid.shape}")
    height, width = grid.shape
    _write_netpbm(path, "P5", width, height, to_bytes_255(grid).tobytes())


def read_netpbm(path: Path) -> np.ndarray:
    """
    Read a binary P5/P6 file with maxval 255.

    Returns:
        uint8 array of shape (H, W) for P5 or (H, W, 3) for P6
    """
    data = Path(path).read_bytes()
    tokens: List[bytes] = []
    offset = 0
    while len(tokens) < 4:
        while data[offset : offset + 1].isspace():
            offset += 1
        if data[offset : offset + 1] == b"#":
            offset = data.index(b"\n", offset) + 1
            continue
        end = offset
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[offset:end])
        offset = end
    offset += 1  # single whitespace before the raster

    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm header {magic!r} maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    raster = np.frombuffer(data[offset : offset + width * height * channels], dtype=np.uint8)
    return raster.reshape((height, width, 3) if channels == 3 else (height, width))


# *** CSV files ***


def write_embeddings(path: Path, sample_ids: Sequence[str], labels: Sequence[Diagnosis], mu: np.ndarray) -> None:
    """Write `sample_id,label,mu_0,...,mu_{d-1}` with full float precision."""
    rows: List[Sequence[object]] = [["sample_id", "label"] + [f"mu_{i}" for i in range(mu.shape[1])]]
    for sample_id, label, row in zip(sample_ids, labels, mu):
        rows.append([sample_id, label.value] + [repr(float(v)) for v in row])
    _write_file(path, _csv_bytes(rows))
    logger.info(f"Wrote {len(sample_ids)} embeddings to {path}")


def read_embeddings(path: Path) -> Tuple[List[str], List[Diagnosis], np.ndarray]:
    """Inverse of `write_embeddings`."""
    try:
        with Path(path).open("r", newline="") as file:
            rows = list(csv.reader(file))
    except FileNotFoundError:
        logger.error(f"Embedding file not found: {path}")
        raise
    header, body = rows[0], rows[1:]
    if header[:2] != ["sample_id", "label"]:
        raise ValueError(f"{path}: not an embedding CSV (header {header[:2]})")
    sample_ids = [row[0] for row in body]
    labels = [Diagnosis.from_string(row[1]) for row in body]
    mu = np.array([[float(v) for v in row[2:]] for row in body], dtype=float).reshape(len(body), len(header) - 2)
    return sample_ids, labels, mu


def write_projection(path: Path, sample_ids: Sequence[str], labels: Sequence[Diagnosis], coords: np.ndarray) -> None:
    """Write `sample_id,label,x,y`."""
    rows: List[Sequence[object]] = [["sample_id", "label", "x", "y"]]
    for sample_id, label, (x, y) in zip(sample_ids, labels, coords):
        rows.append([sample_id, label.value, repr(float(x)), repr(float(y))])
    _write_file(path, _csv_bytes(rows))
    logger.info(f"Wrote {len(sample_ids)} projected points to {path}")


def write_grids(path: Path, names: Sequence[str], grids: Sequence[np.ndarray]) -> None:
    """One row per grid: its name, then the flattened row-major values."""
    size = int(np.asarray(grids[0]).size) if grids else 0
    rows: List[Sequence[object]] = [["name"] + [f"v_{i}" for i in range(size)]]
    for name, grid in zip(names, grids):
        rows.append([name] + [repr(float(v)) for v in np.asarray(grid).reshape(-1)])
    _write_file(path, _csv_bytes(rows))


@runtime_checkable
class MetricsSink(Protocol):
    """Anything that accepts one row of epoch metrics."""

    def append(self, epoch: int, report: LossReport) -> None:
        ...


class _RewrittenCsvLog:
    """A CSV log held in memory and rewritten whole, through a rename, on every row."""

    def __init__(self, path: Path, header: Sequence[str]):
        self.path = Path(path)
        self._rows: List[Sequence[object]] = [list(header)]
        _write_file(self.path, _csv_bytes(self._rows))

    def _add_row(self, row: Sequence[object]) -> None:
        self._rows.append(row)
        _write_file(self.path, _csv_bytes(self._rows))


class MetricsCsvLog(_RewrittenCsvLog):
    """`epoch,ssim,bce,kl,triplet,total` log."""

    def __init__(self, path: Path):
        super().__init__(path, METRICS_HEADER)

    def append(self, epoch: int, report: LossReport) -> None:
        values = (report.ssim_loss, report.bce_loss, report.kl_loss, report.triplet_loss, report.total)
        self._add_row([str(epoch)] + [repr(float(v)) for v in values])


class ScalarCsvLog(_RewrittenCsvLog):
    """Two-column `epoch,<name>` log, e.g. the silhouette trend."""

    def __init__(self, path: Path, name: str):
        super().__init__(path, ["epoch", name])

    def append(self, epoch: int, value: float) -> None:
        self._add_row([str(epoch), repr(float(value))])


def read_metrics(path: Path) -> List[Tuple[int, LossReport]]:
    """Parse a metrics log back into (epoch, LossReport) rows."""
    with Path(path).open("r", newline="") as file:
        rows = list(csv.reader(file))
    if not rows or rows[0] != METRICS_HEADER:
        raise ValueError(f"{path}: not a metrics log")
    parsed = []
    for row in rows[1:]:
        ssim, bce, kl, triplet, total = (float(v) for v in row[1:])
        parsed.append((int(row[0]), LossReport(ssim, bce, kl, triplet, total)))
    return parsed


def read_wbt_csv(path: Path) -> WbtRawGrid:
    """
    Read a device-native WBT measurement.

    The first row holds a corner label followed by the frequencies (Hz); every
    following row holds a pressure (daPa) followed by its absorbances.
    """
    try:
        with Path(path).open("r", newline="") as file:
            rows = [row for row in csv.reader(file) if row]
    except FileNotFoundError:
        logger.error(f"WBT file not found: {path}")
        raise
    if len(rows) < 3:
        raise ValueError(f"{path}: a WBT table needs a header and at least two pressure rows")
    frequencies = np.array([float(v) for v in rows[0][1:]])
    pressures = np.array([float(row[0]) for row in rows[1:]])
    absorbance = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return WbtRawGrid(pressures=pressures, frequencies=frequencies, absorbance=absorbance)


def write_wbt_csv(path: Path, grid: WbtRawGrid) -> None:
    """Inverse of `read_wbt_csv`."""
    rows: List[Sequence[object]] = [["pressure_daPa"] + [repr(float(f)) for f in grid.frequencies]]
    for pressure, row in zip(grid.pressures, grid.absorbance):
        rows.append([repr(float(pressure))] + [repr(float(v)) for v in row])
    _write_file(path, _csv_bytes(rows))
