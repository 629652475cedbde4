"""
Tests for PLY reading/writing, unit-sphere normalization and manifests
"""

import numpy as np
import pytest

from freqpcqa.errors import DegenerateCloudError, ManifestError, PlyFormatError
from freqpcqa.pc_io import (
    DatasetManifest,
    ManifestEntry,
    PointCloud,
    load_manifest,
    load_ply,
    normalize_unit_sphere,
    write_manifest,
    write_ply,
)

TRIANGLE_ASCII = """ply
format ascii 1.0
comment three red points
element vertex 3
property float x
property float y
property float z
property float nx
property uchar red
property uchar green
property uchar blue
end_header
0 0 0 0.5 255 0 0
1 0 0 0.5 255 0 0
0 1 0 0.5 255 0 0
"""


def _header(count: int, fmt: str = "ascii") -> str:
    return (
        f"ply\nformat {fmt} 1.0\nelement vertex {count}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
    )


# ==============================================================================
# PLY
# ==============================================================================

def test_load_ascii_triangle(tmp_path):
    """Coordinates and colors come back in file order; extra properties are ignored"""
    path = tmp_path / "triangle.ply"
    path.write_text(TRIANGLE_ASCII)

    cloud = load_ply(path)

    assert len(cloud) == 3
    np.testing.assert_array_equal(cloud.points, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    np.testing.assert_array_equal(cloud.colors, [[255, 0, 0]] * 3)
    assert cloud.colors.dtype == np.uint8
    assert cloud.name == "triangle"


def test_binary_matches_ascii(tmp_path):
    """The same geometry written binary little-endian parses to identical data"""
    ascii_path = tmp_path / "a.ply"
    ascii_path.write_text(TRIANGLE_ASCII)
    reference = load_ply(ascii_path)

    binary_path = tmp_path / "b.ply"
    write_ply(reference, binary_path, binary=True)
    again = load_ply(binary_path)

    np.testing.assert_array_equal(again.points, reference.points)
    np.testing.assert_array_equal(again.colors, reference.colors)


def test_binary_round_trip_is_bit_exact(tmp_path, make_cloud):
    cloud = make_cloud(500, seed=3)
    path = tmp_path / "cloud.ply"
    write_ply(cloud, path, binary=True)

    loaded = load_ply(path)

    assert np.array_equal(loaded.points, cloud.points), "binary f8 round trip must be exact"
    assert np.array_equal(loaded.colors, cloud.colors)


def test_ascii_round_trip_within_tolerance(tmp_path, make_cloud):
    cloud = make_cloud(200, seed=4)
    path = tmp_path / "cloud.ply"
    write_ply(cloud, path, binary=False)

    loaded = load_ply(path)

    np.testing.assert_allclose(loaded.points, cloud.points, atol=1e-6)
    np.testing.assert_array_equal(loaded.colors, cloud.colors)


def test_truncated_ascii_payload(tmp_path):
    """Ten vertices declared, nine present"""
    rows = "".join(f"{i} 0 0 1 2 3\n" for i in range(9))
    path = tmp_path / "short.ply"
    path.write_text(_header(10) + rows)

    with pytest.raises(PlyFormatError) as info:
        load_ply(path)
    assert info.value.line is not None or info.value.offset is not None


def test_truncated_binary_payload(tmp_path, make_cloud):
    path = tmp_path / "cut.ply"
    write_ply(make_cloud(10, seed=1), path, binary=True)
    raw = path.read_bytes()
    path.write_bytes(raw[:-27])  # one whole vertex: 3 doubles + 3 bytes

    with pytest.raises(PlyFormatError):
        load_ply(path)


def test_big_endian_rejected_with_line(tmp_path):
    path = tmp_path / "be.ply"
    path.write_bytes(_header(1, fmt="binary_big_endian").encode("ascii") + bytes(27))

    with pytest.raises(PlyFormatError) as info:
        load_ply(path)
    assert "binary_big_endian" in str(info.value)
    assert info.value.line == 2


def test_missing_color_property(tmp_path):
    text = (
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n"
    )
    path = tmp_path / "nocolor.ply"
    path.write_text(text)

    with pytest.raises(PlyFormatError, match="red"):
        load_ply(path)


def test_empty_vertex_element_is_data_error(tmp_path):
    path = tmp_path / "empty.ply"
    path.write_text(_header(0))

    with pytest.raises(PlyFormatError) as info:
        load_ply(path)
    assert info.value.line == 3


def test_empty_cloud_rejected():
    with pytest.raises(DegenerateCloudError, match="no points"):
        PointCloud(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8), name="void")


def test_missing_end_header(tmp_path):
    path = tmp_path / "broken.ply"
    path.write_text("ply\nformat ascii 1.0\nelement vertex 1\n")

    with pytest.raises(PlyFormatError, match="end_header"):
        load_ply(path)


# ==============================================================================
# Normalization
# ==============================================================================

def test_normalize_two_points():
    cloud = PointCloud([[0, 0, 0], [2, 0, 0]], [[1, 2, 3], [4, 5, 6]])

    out = normalize_unit_sphere(cloud)

    np.testing.assert_allclose(out.points, [[-1, 0, 0], [1, 0, 0]], atol=1e-12)
    np.testing.assert_array_equal(out.colors, cloud.colors)


def test_normalize_postconditions(make_cloud):
    out = normalize_unit_sphere(make_cloud(50, seed=9))

    norms = np.linalg.norm(out.points, axis=1)
    assert abs(norms.max() - 1.0) < 1e-9
    assert np.all(np.abs(out.points.mean(axis=0)) < 1e-9)


def test_normalize_idempotent(make_cloud):
    once = normalize_unit_sphere(make_cloud(64, seed=2))
    twice = normalize_unit_sphere(once)

    np.testing.assert_allclose(twice.points, once.points, atol=1e-9)


def test_normalize_similarity_invariant(make_cloud):
    cloud = make_cloud(80, seed=5)
    moved = cloud.with_points(3.7 * cloud.points + np.array([10.0, -4.0, 0.25]))

    np.testing.assert_allclose(
        normalize_unit_sphere(moved).points, normalize_unit_sphere(cloud).points, atol=1e-9
    )


def test_normalize_degenerate():
    cloud = PointCloud([[1, 1, 1]] * 4, [[0, 0, 0]] * 4)

    with pytest.raises(DegenerateCloudError):
        normalize_unit_sphere(cloud)


# ==============================================================================
# Manifests
# ==============================================================================

def _touch_clouds(root, names):
    for name in names:
        (root / name).write_text("ply\n")


def test_load_manifest(tmp_path):
    _touch_clouds(tmp_path, ["a.ply", "b.ply", "c.ply"])
    path = tmp_path / "manifest.csv"
    path.write_text("path,mos,ref_id\na.ply,3.5,r1\nb.ply,2.0,r1\nc.ply,4.25,r2\n")

    manifest = load_manifest(path)

    assert len(manifest) == 3
    assert manifest.entries[0].path == tmp_path / "a.ply"
    assert [e.mos for e in manifest] == [3.5, 2.0, 4.25]
    assert manifest.reference_ids() == ["r1", "r2"]
    assert len(manifest.by_reference()["r1"]) == 2


def test_manifest_non_numeric_mos_names_record(tmp_path):
    _touch_clouds(tmp_path, ["a.ply", "b.ply"])
    path = tmp_path / "manifest.csv"
    path.write_text("path,mos,ref_id\na.ply,3.0,r1\nb.ply,abc,r1\n")

    with pytest.raises(ManifestError, match="record 2"):
        load_manifest(path)


def test_manifest_duplicate_path(tmp_path):
    _touch_clouds(tmp_path, ["a.ply"])
    path = tmp_path / "manifest.csv"
    path.write_text("path,mos,ref_id\na.ply,3.0,r1\na.ply,2.0,r2\n")

    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(path)


def test_manifest_missing_file(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "nope.csv")


def test_manifest_missing_cloud(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("path,mos,ref_id\nghost.ply,3.0,r1\n")

    with pytest.raises(ManifestError, match="not found"):
        load_manifest(path)
    assert len(load_manifest(path, check_paths=False)) == 1


def test_manifest_non_finite_mos(tmp_path):
    _touch_clouds(tmp_path, ["a.ply"])
    path = tmp_path / "manifest.csv"
    path.write_text("path,mos,ref_id\na.ply,nan,r1\n")

    with pytest.raises(ManifestError):
        load_manifest(path)


def test_write_manifest_relative_paths(tmp_path):
    _touch_clouds(tmp_path, ["x.ply", "y.ply"])
    manifest = DatasetManifest(entries=(
        ManifestEntry(path=tmp_path / "x.ply", mos=1.5, ref_id="a"),
        ManifestEntry(path=tmp_path / "y.ply", mos=4.0, ref_id="b"),
    ))
    out = tmp_path / "out.csv"

    write_manifest(manifest, out)

    assert out.read_text().splitlines()[1] == "x.ply,1.5,a"
    assert load_manifest(out) == manifest
