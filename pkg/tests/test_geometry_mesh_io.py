import numpy as np
import pytest

from shapecorr.errors import DataError, MeshParseError
from shapecorr.geometry import check_mesh, load_mesh, save_obj


def test_single_triangle_obj(tmp_path):
    path = tmp_path / "tri.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n", encoding="utf-8")

    mesh = load_mesh(str(path))

    assert mesh.vertices.shape == (3, 3)
    assert mesh.faces.tolist() == [[0, 1, 2]]


def test_quad_cube_obj_is_fan_triangulated(tmp_path):
    lines = [f"v {x} {y} {z}" for z in (0, 1) for y in (0, 1) for x in (0, 1)]
    quads = [(1, 5, 7, 3), (2, 4, 8, 6), (1, 2, 6, 5), (3, 7, 8, 4), (1, 3, 4, 2), (5, 6, 8, 7)]
    lines += ["f " + " ".join(f"{i}/{i}/{i}" for i in q) for q in quads]
    path = tmp_path / "cube.obj"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    mesh = load_mesh(str(path))

    assert len(mesh.vertices) == 8
    assert len(mesh.faces) == 12
    assert check_mesh(mesh) is None


def test_obj_negative_indices_and_comments(tmp_path):
    path = tmp_path / "neg.obj"
    path.write_text("# header\nv 0 0 0\nv 1 0 0\nv 0 1 0  # trailing\nf -3 -2 -1\n", encoding="utf-8")

    mesh = load_mesh(str(path))

    assert mesh.faces.tolist() == [[0, 1, 2]]


def test_off_with_counts_on_separate_line(tmp_path):
    path = tmp_path / "tri.off"
    path.write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n", encoding="utf-8")

    mesh = load_mesh(str(path))

    assert len(mesh.vertices) == 4
    assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_off_with_counts_on_header_line(tmp_path):
    path = tmp_path / "tri.off"
    path.write_text("OFF 3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n", encoding="utf-8")

    assert len(load_mesh(str(path)).faces) == 1


def test_truncated_off_reports_line_number(tmp_path):
    path = tmp_path / "cut.off"
    path.write_text("OFF\n4 2 0\n0 0 0\n1 0 0\n", encoding="utf-8")

    with pytest.raises(MeshParseError) as info:
        load_mesh(str(path))

    assert info.value.line == 5
    assert "unexpected end of file" in str(info.value)


def test_bad_obj_coordinate_names_line(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 zero 0\n", encoding="utf-8")

    with pytest.raises(MeshParseError) as info:
        load_mesh(str(path))

    assert info.value.line == 2


def test_obj_face_index_out_of_range(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nf 1 2 3\n", encoding="utf-8")

    with pytest.raises(MeshParseError):
        load_mesh(str(path))


def test_degenerate_faces_are_dropped(tmp_path):
    path = tmp_path / "degen.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\nf 1 1 2\n", encoding="utf-8")

    assert len(load_mesh(str(path)).faces) == 1


def test_missing_file_is_a_data_error(tmp_path):
    with pytest.raises(DataError):
        load_mesh(str(tmp_path / "nope.obj"))


def test_save_obj_round_trips(tmp_path, cube):
    path = tmp_path / "out" / "cube.obj"
    save_obj(cube, str(path))

    back = load_mesh(str(path))

    assert np.allclose(back.vertices, cube.vertices, atol=1e-9)
    assert np.array_equal(back.faces, cube.faces)
