import numpy as np
import pytest

from htar.io import (
    ParseError,
    TransformRecord,
    invert,
    load_model,
    preprocess,
    read_series,
    save_model,
    write_series,
)
from htar.model import predict, random_model
from htar.tensor import DenseTensor, TensorSeries


class TestSeriesFormat:
    def test_minimal_file(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("dims: 1\nT: 2\n1.0\n2.0\n")
        series = read_series(str(path))
        assert series.dims == (1,)
        assert np.array_equal(series.values, [[1.0], [2.0]])

    def test_round_trip_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        series = TensorSeries((2, 3), rng.standard_normal((7, 6)))
        path = tmp_path / "s.txt"
        write_series(str(path), series)
        back = read_series(str(path))
        assert back.dims == series.dims
        assert np.array_equal(back.values, series.values)  # bit-exact

    def test_na_midpoint(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("dims: 1\nT: 3\n1.0\nNA\n3.0\n")
        series = read_series(str(path))
        assert series.values[1, 0] == 2.0

    def test_na_run_interpolated(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("dims: 1\nT: 4\n0.0\nNA\nNA\n3.0\n")
        series = read_series(str(path))
        assert np.allclose(series.values[:, 0], [0.0, 1.0, 2.0, 3.0])

    def test_leading_na_rejected(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("dims: 1\nT: 2\nNA\n3.0\n")
        with pytest.raises(ParseError):
            read_series(str(path))

    def test_trailing_na_rejected(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("dims: 1\nT: 2\n3.0\nNA\n")
        with pytest.raises(ParseError):
            read_series(str(path))

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("dims: 2\nT: 2\n1.0 2.0\n3.0\n")
        with pytest.raises(ParseError, match="line 4"):
            read_series(str(path))

    def test_non_numeric(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("dims: 1\nT: 1\nfoo\n")
        with pytest.raises(ParseError, match="foo"):
            read_series(str(path))

    def test_bad_header(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("shape: 1\nT: 1\n1.0\n")
        with pytest.raises(ParseError, match="line 1"):
            read_series(str(path))


class TestModelFile:
    def test_round_trip_predictions(self, tmp_path):
        model = random_model(
            (2, 3, 2), 2,
            y_structure=[((1, 2, 3), (1, 2, 2, 2))],
            x_structure=[((2, 1, 3), (1, 2, 2, 2))],
            seed=1,
        )
        path = tmp_path / "m.json"
        save_model(str(path), model)
        back = load_model(str(path))
        rng = np.random.default_rng(2)
        hist = [DenseTensor(rng.standard_normal(12), (2, 3, 2)) for _ in range(2)]
        a = predict(model, hist).data
        b = predict(back, hist).data
        assert np.max(np.abs(a - b)) <= 1e-15
        assert back.noise.kind == model.noise.kind

    def test_rejects_wrong_format(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            load_model(str(path))


class TestPreprocess:
    def test_constant_series_differences_to_zero(self):
        series = TensorSeries((2,), np.ones((5, 2)) * 3.0)
        out, record = preprocess(series, difference=True, center=False)
        assert np.array_equal(out.values, np.zeros((4, 2)))

    def test_invert_round_trip(self):
        rng = np.random.default_rng(3)
        series = TensorSeries((2, 2), rng.standard_normal((9, 4)))
        for difference in (True, False):
            for center in (True, False):
                out, record = preprocess(series, difference, center)
                back = invert(record, out)
                assert np.allclose(back.values, series.values, atol=1e-12)

    def test_center_only_zero_means(self):
        rng = np.random.default_rng(4)
        series = TensorSeries((3,), rng.standard_normal((20, 3)) + 5.0)
        out, record = preprocess(series, difference=False, center=True)
        assert np.max(np.abs(out.values.mean(axis=0))) <= 1e-12

    def test_restore_step(self):
        rng = np.random.default_rng(5)
        series = TensorSeries((2,), rng.standard_normal((6, 2)))
        out, record = preprocess(series, difference=True, center=True)
        # reconstruct observation t from level t-1 plus the transformed delta
        for t in range(1, 6):
            level = record.restore_step(series.values[t - 1], out.values[t - 1])
            assert np.allclose(level, series.values[t], atol=1e-12)

    def test_too_short_for_differencing(self):
        series = TensorSeries((2,), np.zeros((1, 2)))
        with pytest.raises(ValueError):
            preprocess(series, difference=True)
