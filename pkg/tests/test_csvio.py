import numpy as np
import pytest

from cpawarp import csvio
from cpawarp.cluster import ClusterState
from cpawarp.errors import IoError, ParseError


def write_text(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestSeries:
    def test_round_trip(self, tmp_path, rng):
        series = {"a": rng.standard_normal((12, 2)), "b b": rng.standard_normal((12, 2))}
        path = tmp_path / "s.csv"
        csvio.write_series_csv(path, series)
        back = csvio.read_series_csv(path)
        assert list(back) == ["a", "b b"]
        for k in series:
            np.testing.assert_array_equal(back[k], series[k])

    def test_warped_column_ignored_on_read(self, tmp_path):
        path = tmp_path / "w.csv"
        csvio.write_series_csv(path, {"x": np.linspace(0, 1, 5)}, warped_flag=True)
        assert path.read_text().splitlines()[0] == "series_id,channel,t_index,value,warped"
        np.testing.assert_array_equal(csvio.read_series_csv(path)["x"][:, 0], np.linspace(0, 1, 5))

    def test_shortest_round_trip_text(self):
        assert csvio.fmt(0.1) == "0.1"
        assert float(csvio.fmt(1 / 3)) == 1 / 3
        assert csvio.fmt(True) == "1" and csvio.fmt(np.int64(7)) == "7"

    def test_missing_channel_names_series(self, tmp_path):
        path = write_text(tmp_path / "m.csv",
                          "series_id,channel,t_index,value\n"
                          "s1,0,0,1\ns1,0,1,2\ns1,1,0,1\ns1,1,1,2\n"
                          "s2,0,0,1\ns2,0,1,2\n")
        with pytest.raises(ParseError, match="s2"):
            csvio.read_series_csv(path)

    def test_bad_number_has_line(self, tmp_path):
        path = write_text(tmp_path / "b.csv",
                          "series_id,channel,t_index,value\ns,0,0,1\ns,0,1,abc\n")
        with pytest.raises(ParseError, match="line 3"):
            csvio.read_series_csv(path)

    def test_gap_and_duplicate(self, tmp_path):
        gap = write_text(tmp_path / "g.csv",
                         "series_id,channel,t_index,value\ns,0,0,1\ns,0,2,1\n")
        with pytest.raises(ParseError, match="time indices"):
            csvio.read_series_csv(gap)
        dup = write_text(tmp_path / "d.csv",
                         "series_id,channel,t_index,value\ns,0,0,1\ns,0,0,1\n")
        with pytest.raises(ParseError, match="duplicate"):
            csvio.read_series_csv(dup)

    def test_header_required(self, tmp_path):
        with pytest.raises(ParseError, match="missing columns"):
            csvio.read_series_csv(write_text(tmp_path / "h.csv", "id,value\na,1\n"))
        with pytest.raises(ParseError, match="empty"):
            csvio.read_series_csv(write_text(tmp_path / "e.csv", ""))

    def test_non_finite(self, tmp_path):
        path = write_text(tmp_path / "n.csv",
                          "series_id,channel,t_index,value\ns,0,0,nan\ns,0,1,1\n")
        with pytest.raises(ParseError, match="finite"):
            csvio.read_series_csv(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            csvio.read_series_csv(tmp_path / "absent.csv")


class TestStream:
    def test_round_trip(self, tmp_path, rng):
        stream = [(f"x{i}", rng.standard_normal((8, 1))) for i in range(5)]
        path = tmp_path / "stream.csv"
        csvio.write_stream_csv(path, stream)
        back = csvio.read_stream_csv(path)
        assert [s for s, _ in back] == [s for s, _ in stream]
        for (_, a), (_, b) in zip(stream, back):
            np.testing.assert_array_equal(a, b)

    def test_unsorted(self, tmp_path):
        path = write_text(tmp_path / "u.csv",
                          "arrival_order,series_id,channel,t_index,value\n"
                          "1,a,0,0,1\n1,a,0,1,1\n0,b,0,0,1\n0,b,0,1,1\n")
        with pytest.raises(ParseError, match="non-decreasing"):
            csvio.read_stream_csv(path)


class TestOtherFormats:
    def test_labels(self, tmp_path):
        path = tmp_path / "l.csv"
        csvio.write_labels_csv(path, {"a": 1, "b": "dip"})
        assert csvio.read_labels_csv(path) == {"a": "1", "b": "dip"}

    def test_assignments(self, tmp_path):
        rows = [("a", 0, False, 0.25), ("b", 3, True, 1e-17)]
        path = tmp_path / "as.csv"
        csvio.write_assignments_csv(path, rows)
        assert csvio.read_assignments_csv(path) == rows

    def test_snapshot(self, tmp_path, rng):
        c = ClusterState(4, rng.standard_normal((6, 2)), rng.uniform(0, 1, (6, 2)), 9)
        (path,) = csvio.write_snapshot(tmp_path / "snap", [c])
        ident, size, centroid, var = csvio.read_snapshot(path)
        assert (ident, size) == (4, 9)
        np.testing.assert_array_equal(centroid, c.centroid)
        np.testing.assert_array_equal(var, c.scaled_variance)
