import numpy as np
import pytest
from numpy.testing import assert_allclose

from georisk.exceptions import DataError
from georisk.geometry import make_regular_grid
from georisk.io import (
    ingest_csv,
    render_heatmap_svg,
    synth_dataset,
    write_grid_csv,
    write_synth_csv,
)


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_ingest_sqrt_transform(tmp_path):
    path = write(tmp_path, "x,y,value\n0,0,1\n1,0,4\n0,1,9\n")
    sample = ingest_csv(path, transform="sqrt")
    assert sample.n == 3
    assert_allclose(sorted(sample.values), [1.0, 2.0, 3.0])


def test_ingest_header_case_and_order(tmp_path):
    path = write(tmp_path, "Value,X,Y\n5.5,1,2\n6.5,3,4\n")
    sample = ingest_csv(path)
    assert_allclose(sample.values, [5.5, 6.5])
    assert_allclose(sample.locations, [[1.0, 2.0], [3.0, 4.0]])


def test_ingest_crlf(tmp_path):
    path = tmp_path / "crlf.csv"
    path.write_bytes(b"x,y,value\r\n0,0,1\r\n1,1,2\r\n")
    assert ingest_csv(path).n == 2


def test_ingest_missing_column(tmp_path):
    path = write(tmp_path, "x,y\n0,0\n")
    with pytest.raises(DataError, match="value"):
        ingest_csv(path)


def test_ingest_bad_row_reports_line(tmp_path):
    path = write(tmp_path, "x,y,value\n0,0,1\n1,oops,2\n2,2,nan\n")
    with pytest.raises(DataError, match=r"line\(s\) 3, 4"):
        ingest_csv(path)


def test_ingest_duplicate_reports_lines(tmp_path):
    path = write(tmp_path, "x,y,value\n0,0,1\n5,5,2\n0,0,3\n")
    with pytest.raises(DataError, match="lines 2 and 4"):
        ingest_csv(path)


def test_ingest_line_numbers_skip_blank_rows(tmp_path):
    # blank rows must not shift reported line numbers
    path = write(tmp_path, "x,y,value\n0,0,1\n\n5,5,2\n0,0,3\n")
    with pytest.raises(DataError, match="lines 2 and 5"):
        ingest_csv(path)
    path2 = write(tmp_path, "x,y,value\n0,0,1\n\n1,1,-4\n", name="neg.csv")
    with pytest.raises(DataError, match="line 4"):
        ingest_csv(path2, transform="sqrt")


def test_ingest_sqrt_rejects_negative(tmp_path):
    path = write(tmp_path, "x,y,value\n0,0,1\n1,1,-2\n")
    with pytest.raises(DataError, match="line 3"):
        ingest_csv(path, transform="sqrt")


def test_ingest_synth_format_compatible(tmp_path):
    path = tmp_path / "synthetic.csv"
    write_synth_csv(path, n=1053, seed=3)
    sample = ingest_csv(path, transform="sqrt")
    assert sample.n == 1053
    assert np.all(sample.values >= 0.0)


def test_synth_deterministic(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    write_synth_csv(a, n=60, seed=9)
    write_synth_csv(b, n=60, seed=9)
    assert a.read_bytes() == b.read_bytes()
    locs, vals = synth_dataset(60, seed=9)
    locs2, vals2 = synth_dataset(60, seed=10)
    assert not np.array_equal(vals, vals2)


def test_write_grid_csv_na(tmp_path):
    pts = np.array([[0.0, 0.0], [1.0, 0.0]])
    path = tmp_path / "grid.csv"
    write_grid_csv(path, pts, {"probability": np.array([0.25, np.nan])})
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,probability"
    assert lines[1].endswith("0.25")
    assert lines[2].endswith("NA")


def test_svg_is_pure_function():
    grid = make_regular_grid([(0.0, 1.0), (0.0, 1.0)], (5, 4))
    vals = np.linspace(0.0, 1.0, 20)
    vals[3] = np.nan
    a = render_heatmap_svg(grid, vals, title="t", vmin=0, vmax=1)
    b = render_heatmap_svg(grid, vals, title="t", vmin=0, vmax=1)
    assert a == b
    c = render_heatmap_svg(grid, vals + 0.001, title="t", vmin=0, vmax=1)
    assert a != c
    assert a.startswith("<svg") and a.rstrip().endswith("</svg>")
    assert "#c8c8c8" in a  # masked cell color
