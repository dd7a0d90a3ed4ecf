from unittest.mock import patch

import numpy as np
import pytest

from src.io_adapters import (
    MetricsCsvLog,
    MetricsSink,
    ScalarCsvLog,
    read_embeddings,
    read_metrics,
    read_netpbm,
    read_wbt_csv,
    to_bytes_255,
    write_embeddings,
    write_grids,
    write_pgm,
    write_ppm,
    write_projection,
    write_wbt_csv,
)
from src.losses import LossReport
from src.models import Diagnosis, WbtRawGrid
from src.storage import atomic_write_bytes


class TestNetpbm:
    def test_byte_mapping(self):
        values = np.array([0.0, 0.5, 1.0, -0.2, 1.3, 0.25])
        np.testing.assert_array_equal(to_bytes_255(values), [0, 128, 255, 0, 255, 64])

    def test_ppm(self, rng, tmp_path):
        image = rng.uniform(size=(3, 4, 5))
        path = tmp_path / "img.ppm"
        write_ppm(path, image)
        assert path.read_bytes().startswith(b"P6\n5 4\n255\n")
        pixels = read_netpbm(path)
        assert pixels.shape == (4, 5, 3)
        np.testing.assert_array_equal(pixels, np.round(np.transpose(image, (1, 2, 0)) * 255).astype(np.uint8))

    def test_pgm(self, rng, tmp_path):
        grid = rng.uniform(size=(1, 6, 3))
        path = tmp_path / "wbt.pgm"
        write_pgm(path, grid)
        assert path.read_bytes().startswith(b"P5\n3 6\n255\n")
        assert len(path.read_bytes()) == len(b"P5\n3 6\n255\n") + 18
        np.testing.assert_array_equal(read_netpbm(path), np.round(grid[0] * 255).astype(np.uint8))

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# made elsewhere\n2 1\n255\n\x00\xff")
        np.testing.assert_array_equal(read_netpbm(path), [[0, 255]])

    def test_shape_checks(self, tmp_path):
        with pytest.raises(ValueError):
            write_ppm(tmp_path / "x.ppm", np.zeros((1, 4, 4)))
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "x.pgm", np.zeros((2, 4, 4)))


class TestEmbeddingCsv:
    def test_round_trip_is_exact(self, rng, tmp_path):
        mu = rng.normal(size=(4, 3))
        ids = ["a", "b", "c", "d"]
        labels = [Diagnosis.AOM, Diagnosis.OME, Diagnosis.NOE, Diagnosis.AOM]
        path = tmp_path / "mu.csv"
        write_embeddings(path, ids, labels, mu)
        assert path.read_text().splitlines()[0] == "sample_id,label,mu_0,mu_1,mu_2"
        read_ids, read_labels, read_mu = read_embeddings(path)
        assert read_ids == ids and read_labels == labels
        np.testing.assert_array_equal(read_mu, mu)

    def test_wrong_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,x\n1,2\n")
        with pytest.raises(ValueError):
            read_embeddings(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_embeddings(tmp_path / "none.csv")

    def test_projection_csv(self, tmp_path):
        path = tmp_path / "proj.csv"
        write_projection(path, ["s1"], [Diagnosis.OME], np.array([[0.5, -1.25]]))
        assert path.read_text().splitlines() == ["sample_id,label,x,y", "s1,OME,0.5,-1.25"]

    def test_grid_csv(self, tmp_path):
        path = tmp_path / "grids.csv"
        write_grids(path, ["g0", "g1"], [np.zeros((1, 2, 2)), np.full((1, 2, 2), 0.5)])
        lines = path.read_text().splitlines()
        assert lines[0] == "name,v_0,v_1,v_2,v_3"
        assert lines[2] == "g1,0.5,0.5,0.5,0.5"


class TestMetricsLogs:
    def test_metrics_log(self, tmp_path):
        log = MetricsCsvLog(tmp_path / "metrics.csv")
        assert isinstance(log, MetricsSink)
        log.append(1, LossReport(0.5, 0.6, 0.7, 0.8, 1.25))
        log.append(2, LossReport(0.4, 0.5, 0.6, 0.7, 1.03))
        rows = read_metrics(tmp_path / "metrics.csv")
        assert [epoch for epoch, _ in rows] == [1, 2]
        assert rows[0][1] == LossReport(0.5, 0.6, 0.7, 0.8, 1.25)
        assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == "epoch,ssim,bce,kl,triplet,total"

    def test_not_a_metrics_log(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a,b\n")
        with pytest.raises(ValueError):
            read_metrics(path)

    def test_scalar_log(self, tmp_path):
        log = ScalarCsvLog(tmp_path / "sil.csv", "silhouette")
        log.append(5, 0.25)
        assert (tmp_path / "sil.csv").read_text().splitlines() == ["epoch,silhouette", "5,0.25"]


class TestWbtCsv:
    def test_round_trip(self, tmp_path):
        grid = WbtRawGrid(
            pressures=np.array([200.0, 0.0, -300.0]),
            frequencies=np.array([226.0, 1000.0, 8000.0]),
            absorbance=np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]]),
        )
        path = tmp_path / "raw.csv"
        write_wbt_csv(path, grid)
        loaded = read_wbt_csv(path)
        np.testing.assert_array_equal(loaded.pressures, grid.pressures)
        np.testing.assert_array_equal(loaded.frequencies, grid.frequencies)
        np.testing.assert_array_equal(loaded.absorbance, grid.absorbance)

    def test_too_short(self, tmp_path):
        path = tmp_path / "short.csv"
        path.write_text("p,226,4000\n0,0.1,0.2\n")
        with pytest.raises(ValueError):
            read_wbt_csv(path)

    def test_ascending_pressures_rejected(self, tmp_path):
        path = tmp_path / "asc.csv"
        path.write_text("p,226,4000\n-100,0.1,0.2\n100,0.1,0.2\n")
        with pytest.raises(ValueError):
            read_wbt_csv(path)


class TestAtomicWrites:
    @pytest.mark.parametrize(
        "write",
        [
            lambda path: write_ppm(path, np.zeros((3, 2, 2))),
            lambda path: write_pgm(path, np.zeros((1, 2, 2))),
            lambda path: write_embeddings(path, ["a"], [Diagnosis.AOM], np.zeros((1, 2))),
            lambda path: write_grids(path, ["g"], [np.zeros((1, 2, 2))]),
        ],
    )
    def test_writers_go_through_rename(self, tmp_path, write):
        path = tmp_path / "out.bin"
        with patch("src.io_adapters.atomic_write_bytes", wraps=atomic_write_bytes) as atomic:
            write(path)
        atomic.assert_called_once()
        assert atomic.call_args.args[0] == path
        assert [p.name for p in tmp_path.iterdir()] == ["out.bin"]

    def test_failed_write_keeps_previous_file(self, tmp_path):
        path = tmp_path / "mu.csv"
        write_embeddings(path, ["a"], [Diagnosis.AOM], np.zeros((1, 2)))
        before = path.read_bytes()
        with patch("src.storage.os.replace", side_effect=OSError("disk full")):
            with pytest.raises(OSError):
                write_embeddings(path, ["b"], [Diagnosis.OME], np.ones((1, 2)))
        assert path.read_bytes() == before
        assert [p.name for p in tmp_path.iterdir()] == ["mu.csv"]

    def test_metrics_log_rewritten_whole(self, tmp_path):
        path = tmp_path / "metrics.csv"
        log = MetricsCsvLog(path)
        with patch("src.io_adapters.atomic_write_bytes", wraps=atomic_write_bytes) as atomic:
            for epoch in range(1, 4):
                log.append(epoch, LossReport(0.1, 0.2, 0.3, 0.4, 0.5))
        assert atomic.call_count == 3
        assert len(atomic.call_args.args[1].decode("utf-8").splitlines()) == 4
        assert [epoch for epoch, _ in read_metrics(path)] == [1, 2, 3]
