import numpy as np
import pytest

from skihl.raster import (FeatureStack, LabelMap, RasterFormatError,
                          SparseLabels, load_f32, load_label_map, load_raster,
                          load_sparse_labels, probability_to_byte, save_f32,
                          save_label_map, save_pgm, save_raster,
                          save_sparse_labels, sidecar_path)
from util import make_stack


def test_round_trip_is_bit_exact(tmp_path):
    stack = make_stack(5, 7, bands=3, seed=11)
    # force values onto the f32 grid so equality is exact, not approximate
    stack = FeatureStack(rows=5, cols=7, bands=3,
                         values=stack.values.astype(np.float32).astype(np.float64),
                         elevation=stack.elevation.astype(np.float32).astype(np.float64))
    path = tmp_path / "a.raster"
    save_raster(stack, path)
    back = load_raster(path)
    assert back.rows == 5 and back.cols == 7 and back.bands == 3
    assert np.array_equal(back.values, stack.values)
    assert np.array_equal(back.elevation, stack.elevation)


def test_round_trip_tricky_f32_payload(tmp_path):
    vals = np.array([0.0, -0.0, 1e-38, 3.4e38, -3.4e38, 0.1],
                    dtype=np.float32).reshape(1, 2, 3).astype(np.float64)
    elev = np.zeros((2, 3))
    stack = FeatureStack(rows=2, cols=3, bands=1, values=vals, elevation=elev)
    save_raster(stack, tmp_path / "t.raster")
    back = load_raster(tmp_path / "t.raster")
    assert back.values.astype(np.float32).tobytes() == vals.astype(np.float32).tobytes()


def test_header_and_shape(tmp_path):
    stack = make_stack(2, 3, bands=1)
    path = tmp_path / "b.raster"
    save_raster(stack, path)
    first = path.read_bytes().split(b"\n", 1)[0]
    assert first == b"SKIHL-RASTER 1 2 3 1"
    assert load_raster(path).values.shape == (1, 2, 3)


def test_truncated_body_rejected(tmp_path):
    path = tmp_path / "trunc.raster"
    body = np.zeros(15, dtype="<f4").tobytes()  # header claims 4x4 = 16 + 16
    path.write_bytes(b"SKIHL-RASTER 1 4 4 1\n" + body)
    with pytest.raises(RasterFormatError):
        load_raster(path)


def test_nan_cites_float_index(tmp_path):
    payload = np.arange(12, dtype="<f4")
    payload[7] = np.nan
    path = tmp_path / "nan.raster"
    path.write_bytes(b"SKIHL-RASTER 1 2 3 1\n" + payload.tobytes())
    with pytest.raises(RasterFormatError, match="index 7"):
        load_raster(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.raster"
    path.write_bytes(b"NOT-A-RASTER 1 2 2 1\n" + np.zeros(8, dtype="<f4").tobytes())
    with pytest.raises(RasterFormatError):
        load_raster(path)


def test_stack_constructor_validation():
    with pytest.raises(ValueError):
        FeatureStack(rows=2, cols=2, bands=1, values=np.zeros((1, 2, 3)),
                     elevation=np.zeros((2, 2)))
    with pytest.raises(ValueError, match="non-finite"):
        FeatureStack(rows=2, cols=2, bands=1,
                     values=np.full((1, 2, 2), np.inf), elevation=np.zeros((2, 2)))


# -- PGM export --------------------------------------------------------------


def test_pgm_byte_values():
    assert probability_to_byte(np.array([1.0]))[0] == 255
    assert probability_to_byte(np.array([0.5]))[0] == 128  # round half-up
    assert probability_to_byte(np.array([0.0]))[0] == 0


def test_pgm_export_monotone(rng):
    p = np.sort(rng.uniform(0, 1, size=500))
    b = probability_to_byte(p)
    assert np.all(np.diff(b.astype(int)) >= 0)


def test_pgm_file_layout(tmp_path):
    values = np.array([[0.0, 0.5], [1.0, 0.25]])
    save_pgm(values, tmp_path / "m.pgm")
    raw = (tmp_path / "m.pgm").read_bytes()
    header, body = raw.split(b"255\n", 1)
    assert header == b"P5\n2 2\n"
    assert list(body) == [0, 128, 255, 64]


def test_label_map_round_trip_prefers_sidecar(tmp_path):
    values = np.array([[0.123456789, 0.0], [1.0, 0.75]])
    m = LabelMap(rows=2, cols=2, values=values)
    save_label_map(m, tmp_path / "p.pgm")
    back = load_label_map(tmp_path / "p.pgm")
    # f32 sidecar preserves more precision than the 8-bit PGM could
    assert abs(back.values[0, 0] - 0.123456789) < 1e-7
    (tmp_path / "p.f32").unlink()
    coarse = load_label_map(tmp_path / "p.pgm")
    assert abs(coarse.values[0, 0] - 0.123456789) < 1 / 255 + 1e-12


def test_f32_sidecar_helpers(tmp_path):
    assert sidecar_path("x/y.pgm") == "x/y.f32"
    arr = np.linspace(0, 1, 6).reshape(2, 3)
    save_f32(arr, tmp_path / "a.f32")
    back = load_f32(tmp_path / "a.f32", 2, 3)
    assert np.allclose(back, arr, atol=1e-7)
    with pytest.raises(RasterFormatError):
        load_f32(tmp_path / "a.f32", 3, 3)


def test_label_map_validation():
    with pytest.raises(ValueError):
        LabelMap(rows=1, cols=2, values=np.array([[-0.1, 0.5]]))
    with pytest.raises(ValueError):
        LabelMap(rows=1, cols=2, values=np.array([[0.1, 1.5]]))


# -- sparse labels CSV --------------------------------------------------------


def test_sparse_labels_round_trip(tmp_path):
    labels = SparseLabels(entries=((0, 0, 1), (3, 2, 0), (1, 1, 1)))
    save_sparse_labels(labels, tmp_path / "l.csv")
    text = (tmp_path / "l.csv").read_text()
    assert text.splitlines()[0] == "0,0,1"
    back = load_sparse_labels(tmp_path / "l.csv", 4, 4)
    assert back.entries == labels.entries


def test_sparse_duplicate_rejected(tmp_path):
    (tmp_path / "d.csv").write_text("0,0,1\n0,0,0\n")
    with pytest.raises(ValueError, match="duplicate"):
        load_sparse_labels(tmp_path / "d.csv", 4, 4)


def test_sparse_out_of_bounds_rejected(tmp_path):
    (tmp_path / "o.csv").write_text("5,5,1\n")
    with pytest.raises(ValueError):
        load_sparse_labels(tmp_path / "o.csv", 4, 4)


def test_sparse_bad_label_rejected(tmp_path):
    (tmp_path / "b.csv").write_text("1,1,2\n")
    with pytest.raises(ValueError):
        load_sparse_labels(tmp_path / "b.csv", 4, 4)


def test_sparse_error_names_line(tmp_path):
    (tmp_path / "l.csv").write_text("0,0,1\nnot,a,row\n")
    with pytest.raises(ValueError, match=":2"):
        load_sparse_labels(tmp_path / "l.csv", 4, 4)


def test_sparse_constructor_validation():
    with pytest.raises(ValueError):
        SparseLabels(entries=((0, 0, 1), (0, 0, 0)))
    with pytest.raises(ValueError):
        SparseLabels(entries=((0, 0, 7),))
    labels = SparseLabels(entries=((2, 2, 1),))
    with pytest.raises(ValueError):
        labels.check_bounds(2, 2)
    mask = labels.mask(4, 4)
    assert mask[2, 2] and mask.sum() == 1
