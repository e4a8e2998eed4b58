import math

import numpy as np
import pytest

from umiformer.autodiff import ContractError
from umiformer.data import (
    camera_frame,
    gen_shape,
    generate_dataset,
    load_dataset,
    read_manifest,
    render_view,
    view_directions,
    voxelize,
)
from umiformer.formats import (
    FormatError,
    decode_imgf,
    decode_voxg,
    encode_imgf,
    encode_voxg,
    read_binvox,
    write_binvox,
)


class TestShapes:
    def test_seed_is_deterministic(self):
        a, b = gen_shape(42, 16), gen_shape(42, 16)
        assert a.recipe == b.recipe
        assert np.array_equal(a.voxel, b.voxel)

    def test_occupancy_bounds(self):
        for seed in range(30):
            assert 0.01 <= gen_shape(seed, 8).occupancy <= 0.9

    def test_centered_box_occupancy_is_exact(self):
        # half-extent 0.25 covers voxel centers 4.5/16 .. 11.5/16: 8 per axis
        v = voxelize("box(0.5,0.5,0.5,0.25,0.25,0.25)", 16)
        assert v.sum() == 8**3
        assert v.mean() == (8 / 16) ** 3

    @pytest.mark.parametrize("side", [8, 16, 32])
    def test_sphere_volume_within_ten_percent(self, side):
        v = voxelize("sphere(0.5,0.5,0.5,0.25)", side)
        analytic = 4 / 3 * math.pi * (side / 4) ** 3 / side**3
        assert abs(v.mean() - analytic) / analytic < 0.10

    def test_cylinder_axis(self):
        v = voxelize("cyl(z,0.5,0.5,0.5,0.2,0.45)", 16)
        assert v[8, 8, 1] == 1 and v[8, 8, 0] == 0
        assert v.sum(axis=2).max() == 14

    def test_bad_side(self):
        with pytest.raises(ContractError, match="side"):
            gen_shape(0, 12)

    def test_bad_recipe(self):
        with pytest.raises(ContractError, match="bad recipe"):
            voxelize("cone(0.5)", 8)


class TestRendering:
    def test_directions(self):
        d = view_directions()
        assert d.shape == (24, 3)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
        for u in d:
            assert np.isclose(d, -u).all(axis=1).any()

    def test_frame_is_rotation_to_direction(self):
        for u in view_directions():
            rot = camera_frame(u)
            np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
            np.testing.assert_allclose(rot @ [0, 0, 1], u, atol=1e-12)
            assert np.linalg.det(rot) == pytest.approx(1.0)

    def test_full_cube_along_z(self):
        img = render_view(np.ones((8, 8, 8), dtype=np.uint8), [0, 0, 1], 16)
        assert (img == 1).all()

    def test_empty_grid(self):
        assert not render_view(np.zeros((8, 8, 8), dtype=np.uint8), view_directions()[0], 16).any()

    def test_single_voxel_along_z(self):
        v = np.zeros((4, 4, 4), dtype=np.uint8)
        v[1, 2, 3] = 1
        img = render_view(v, [0, 0, 1], 8)
        assert np.argwhere(img).tolist() == [[2, 4], [2, 5], [3, 4], [3, 5]]

    def test_single_voxel_along_x(self):
        # right = -z, up = +y: voxel (x, y, z) lands on pixel (S-1-z, y)
        v = np.zeros((4, 4, 4), dtype=np.uint8)
        v[1, 2, 0] = 1
        assert np.argwhere(render_view(v, [1, 0, 0], 4)).tolist() == [[3, 2]]

    def test_opposite_directions_mirror(self):
        voxel = gen_shape(3, 16).voxel
        dirs = view_directions()
        for u in dirs:
            opposite = next(w for w in dirs if np.allclose(w, -u))
            np.testing.assert_array_equal(render_view(voxel, u, 32), render_view(voxel, opposite, 32)[::-1])

    def test_axis_silhouette_is_exact_projection(self):
        voxel = gen_shape(11, 16).voxel
        np.testing.assert_array_equal(render_view(voxel, [0, 0, 1], 16), voxel.max(axis=2))

    def test_non_unit_direction(self):
        with pytest.raises(ContractError, match="unit length"):
            render_view(np.zeros((8, 8, 8)), [0, 0, 2], 8)


class TestDataset:
    def test_byte_identical_for_same_seed(self, tmp_path):
        generate_dataset(tmp_path / "a", 3, 8, 16, master_seed=5)
        generate_dataset(tmp_path / "b", 3, 8, 16, master_seed=5)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 1 + 3 + 3 * 24
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_manifest_and_split(self, tmp_path):
        generate_dataset(tmp_path, 4, 8, 16, master_seed=0)
        samples = read_manifest(tmp_path)
        assert [s.seed for s in samples] == [0, 1, 2, 3]
        assert len(samples[0].view_paths) == 24
        data = load_dataset(tmp_path)
        assert data.views.shape == (4, 24, 16, 16)
        train, held = data.split()
        assert train.seeds.tolist() == [0, 2] and held.seeds.tolist() == [1, 3]

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)


BINVOX_ALL_ONES = b"#binvox 1\ndim 2 2 2\ntranslate 0 0 0\nscale 1\ndata\n\x01\x08"


class TestFormats:
    def test_binvox_fixture(self):
        grid = read_binvox(BINVOX_ALL_ONES)
        assert grid.shape == (2, 2, 2) and grid.all()

    def test_binvox_axis_order(self):
        # y fastest, then z, then x: the second stored voxel is (0, 1, 0)
        blob = b"#binvox 1\ndim 2 2 2\ndata\n\x00\x01\x01\x01\x00\x06"
        grid = read_binvox(blob)
        assert np.argwhere(grid).tolist() == [[0, 1, 0]]

    def test_binvox_odd_pair_count(self):
        with pytest.raises(FormatError, match="odd RLE"):
            read_binvox(BINVOX_ALL_ONES + b"\x01")

    def test_binvox_bad_magic(self):
        with pytest.raises(FormatError, match="byte 0"):
            read_binvox(b"#voxbin 1\n")

    def test_binvox_count_mismatch(self):
        with pytest.raises(FormatError, match="need 8"):
            read_binvox(BINVOX_ALL_ONES[:-1] + b"\x07")

    def test_binvox_round_trip(self):
        grid = gen_shape(7, 16).voxel
        blob = write_binvox(grid)
        assert np.array_equal(read_binvox(blob), grid)
        assert write_binvox(read_binvox(blob)) == blob

    def test_binvox_long_runs_split_at_255(self):
        grid = np.ones((8, 8, 8), dtype=np.uint8)
        body = write_binvox(grid).split(b"data\n", 1)[1]
        assert body == b"\x01\xff\x01\xff\x01\x02"  # 512 = 255 + 255 + 2

    def test_voxg_round_trip(self, rng):
        grid = rng.random((4, 4, 4)).astype(np.float32)
        blob = encode_voxg(grid)
        assert blob[:8] == b"VOXG\x04\x00\x00\x00" and len(blob) == 8 + 4 * 64
        assert np.array_equal(decode_voxg(blob), grid)
        assert encode_voxg(decode_voxg(blob)) == blob

    def test_imgf_round_trip(self, rng):
        image = rng.random((3, 5)).astype(np.float32)
        blob = encode_imgf(image)
        assert blob[:12] == b"IMGF\x03\x00\x00\x00\x05\x00\x00\x00"
        assert encode_imgf(decode_imgf(blob)) == blob

    def test_truncated_voxg(self):
        with pytest.raises(FormatError, match="size mismatch"):
            decode_voxg(encode_voxg(np.zeros((2, 2, 2)))[:-1])

    def test_non_cubic_voxg(self):
        with pytest.raises(FormatError, match="cubic"):
            encode_voxg(np.zeros((2, 3, 2)))
