import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from normvox.errors import MalformedFrame, NonFiniteValue
from normvox.pointcloud import (
    DEFAULT_RANGE,
    PointCloud,
    RangeBox,
    clip_to_range,
    read_kitti_bin,
    write_kitti_bin,
    write_ply,
)


class TestReadKittiBin:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        assert len(read_kitti_bin(path)) == 0

    def test_single_record(self, tmp_path):
        blob = struct.pack("<4f", 1.0, 2.0, 3.0, 0.5)
        # independent check of the wire layout before trusting the reader
        assert blob.hex() == "0000803f00000040000040400000003f"
        path = tmp_path / "one.bin"
        path.write_bytes(blob)
        pc = read_kitti_bin(path)
        assert len(pc) == 1
        assert pc.points[0].tolist() == [1.0, 2.0, 3.0, 0.5]

    def test_truncated_record_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 20)
        with pytest.raises(MalformedFrame):
            read_kitti_bin(path)

    def test_nan_rejected(self, tmp_path):
        path = tmp_path / "nan.bin"
        path.write_bytes(struct.pack("<4f", 1.0, float("nan"), 3.0, 0.5))
        with pytest.raises(NonFiniteValue):
            read_kitti_bin(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_kitti_bin(tmp_path / "nope.bin")

    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(7)
        pc = PointCloud(rng.uniform(-50, 50, (257, 4)).astype(np.float32), "rt")
        path = tmp_path / "rt.bin"
        write_kitti_bin(pc, path)
        again = read_kitti_bin(path)
        assert np.array_equal(pc.points, again.points)
        assert pc.points.tobytes() == again.points.tobytes()

    def test_file_order_preserved(self, tmp_path):
        pts = np.array([[3, 0, 0, 0], [1, 0, 0, 0], [2, 0, 0, 0]], dtype=np.float32)
        path = tmp_path / "ord.bin"
        pts.tofile(path)
        assert read_kitti_bin(path).points[:, 0].tolist() == [3.0, 1.0, 2.0]


class TestRangeBox:
    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            RangeBox(0.0, 0.0, -1.0, 1.0, -1.0, 1.0)

    def test_default_matches_standard_setup(self):
        assert DEFAULT_RANGE.mins.tolist() == [0.0, -40.0, -3.0]
        assert DEFAULT_RANGE.maxs.tolist() == [70.4, 40.0, 1.0]


class TestClipToRange:
    def test_interior_point_kept(self):
        pc = PointCloud(np.array([[0.0, 0.0, 0.0, 0.1]], dtype=np.float32))
        assert len(clip_to_range(pc, DEFAULT_RANGE)) == 1

    def test_upper_boundary_dropped(self):
        pc = PointCloud(np.array([[70.4, 0.0, 0.0, 0.1]], dtype=np.float32))
        assert len(clip_to_range(pc, DEFAULT_RANGE)) == 0

    def test_lower_boundary_kept(self):
        pc = PointCloud(np.array([[0.0, -40.0, -3.0, 0.1]], dtype=np.float32))
        assert len(clip_to_range(pc, DEFAULT_RANGE)) == 1

    def test_out_of_range_axes(self):
        pts = np.array(
            [[10, 0, 0, 0.5], [80, 0, 0, 0.5], [10, 50, 0, 0.5]], dtype=np.float32
        )
        kept = clip_to_range(PointCloud(pts), DEFAULT_RANGE)
        assert len(kept) == 1
        assert kept.points[0, 0] == 10.0

    @given(
        st.lists(
            st.tuples(
                st.floats(-100, 100, allow_nan=False),
                st.floats(-100, 100, allow_nan=False),
                st.floats(-10, 10, allow_nan=False),
            ),
            max_size=60,
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_idempotent_and_order_preserving(self, coords):
        pts = np.array(
            [[x, y, z, 0.5] for x, y, z in coords], dtype=np.float32
        ).reshape(-1, 4)
        pc = PointCloud(pts)
        once = clip_to_range(pc, DEFAULT_RANGE)
        twice = clip_to_range(once, DEFAULT_RANGE)
        assert np.array_equal(once.points, twice.points)
        assert len(once) <= len(pc)
        # survivors appear in original relative order
        kept_mask = DEFAULT_RANGE.contains(pc.xyz)
        assert np.array_equal(once.points, pc.points[kept_mask])


def _parse_ply(path):
    lines = path.read_text().splitlines()
    assert lines[0] == "ply"
    assert lines[1] == "format ascii 1.0"
    header_end = lines.index("end_header")
    count = next(
        int(line.split()[-1]) for line in lines if line.startswith("element vertex")
    )
    rows = [line.split() for line in lines[header_end + 1 :] if line]
    return count, rows


class TestWritePly:
    def test_empty(self, tmp_path):
        path = tmp_path / "empty.ply"
        write_ply(np.empty((0, 3)), path)
        count, rows = _parse_ply(path)
        assert count == 0 and rows == []

    def test_single_white_vertex(self, tmp_path):
        path = tmp_path / "one.ply"
        write_ply(np.array([[1.0, 2.0, 3.0]]), path)
        count, rows = _parse_ply(path)
        assert count == 1
        assert rows[0][3:] == ["255", "255", "255"]

    def test_scalar_ramp_monotone(self, tmp_path):
        path = tmp_path / "ramp.ply"
        write_ply(np.zeros((3, 3)), path, colors=[0.0, 0.5, 1.0])
        count, rows = _parse_ply(path)
        assert count == 3
        rgb = np.array([[int(v) for v in row[3:]] for row in rows])
        assert rgb[0].tolist() == [255, 0, 255]  # low end: magenta
        assert rgb[2].tolist() == [0, 255, 0]  # high end: green
        assert rgb[0, 1] < rgb[1, 1] < rgb[2, 1]  # green channel increases
        assert rgb[0, 0] > rgb[1, 0] > rgb[2, 0]

    def test_accepts_pointcloud(self, tmp_path):
        pc = PointCloud(np.array([[1, 2, 3, 0.5]], dtype=np.float32))
        path = tmp_path / "pc.ply"
        write_ply(pc, path)
        count, _ = _parse_ply(path)
        assert count == 1

    def test_color_length_mismatch(self, tmp_path):
        with pytest.raises(ValueError):
            write_ply(np.zeros((3, 3)), tmp_path / "x.ply", colors=[1.0])


def test_pointcloud_rejects_nan():
    pts = np.array([[0, 0, 0, 0], [np.nan, 0, 0, 0]], dtype=np.float32)
    with pytest.raises(NonFiniteValue):
        PointCloud(pts)
