import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import assignment_bruteforce
from pixpro.viewgen import (
    AugConfig,
    CropRecord,
    DistanceMatrix,
    apply_photometric,
    assign,
    assignment_for_pair,
    bin_diagonal,
    distance_matrix,
    load_image,
    make_views,
    overlap_check,
    read_assignment,
    resized_crop,
    rng_stream,
    sample_crop,
    sample_view,
    sample_view_pair,
    save_image,
    solarize,
    warp_grid,
    write_assignment,
)
from pixpro.viewgen.augment import gaussian_blur


@st.composite
def crop_pairs(draw):
    W = draw(st.integers(8, 96))
    H = draw(st.integers(8, 96))

    def one():
        w = draw(st.integers(1, W))
        h = draw(st.integers(1, H))
        x0 = draw(st.integers(0, W - w))
        y0 = draw(st.integers(0, H - h))
        return CropRecord(x0, y0, w, h, 32, draw(st.booleans()))
    return one(), one(), draw(st.sampled_from([1, 2, 3, 4, 7, 8]))


class TestCropRecord:
    def test_validate_bounds(self):
        CropRecord(0, 0, 16, 16, 32).validate(16, 16)
        with pytest.raises(ValueError):
            CropRecord(1, 0, 16, 16, 32).validate(16, 16)
        with pytest.raises(ValueError):
            CropRecord(0, 0, 0.5, 4, 32).validate(16, 16)

    @settings(max_examples=50, deadline=None)
    @given(x0=st.floats(0, 50), y0=st.floats(0, 50), w=st.floats(1, 50), h=st.floats(1, 50),
           flip=st.booleans(), u=st.floats(0, 32), v=st.floats(0, 32))
    def test_warp_is_exactly_invertible(self, x0, y0, w, h, flip, u, v):
        rec = CropRecord(x0, y0, w, h, 32, flip)
        x, y = rec.to_source(np.array(u), np.array(v))
        uu, vv = rec.from_source(x, y)
        assert uu == pytest.approx(u, abs=1e-9) and vv == pytest.approx(v, abs=1e-9)


class TestWarpGrid:
    def test_hand_computed_centres(self):
        g = warp_grid(CropRecord(0, 0, 16, 16, 32, False), 4)
        assert sorted(set(g[:, 0])) == [2, 6, 10, 14]
        assert sorted(set(g[:, 1])) == [2, 6, 10, 14]

    def test_flip_mirrors_x(self):
        rec = CropRecord(3, 5, 12, 9, 32, False)
        a = warp_grid(rec, 4).reshape(4, 4, 2)
        b = warp_grid(CropRecord(3, 5, 12, 9, 32, True), 4).reshape(4, 4, 2)
        np.testing.assert_allclose(b[:, :, 0], a[:, ::-1, 0])
        np.testing.assert_allclose(b[:, :, 1], a[:, :, 1])

    def test_single_cell_is_crop_midpoint(self):
        g = warp_grid(CropRecord(2, 4, 10, 6, 32, True), 1)
        np.testing.assert_allclose(g, [[7.0, 7.0]])

    def test_grid_matches_image_path(self):
        # a view's pixel (r, c) samples the source at the same place warp_grid puts cell (r, c)
        rng = np.random.default_rng(0)
        image = np.zeros((1, 20, 30))
        yy, xx = np.mgrid[0:20, 0:30]
        image[0] = xx + 0.5                 # value encodes the x pixel-centre coordinate
        rec = CropRecord(4, 3, 20, 14, 10, bool(rng.integers(2)))
        view = resized_crop(image, rec)
        centres = warp_grid(rec, 10).reshape(10, 10, 2)
        inside = (centres[:, :, 0] >= 0.5) & (centres[:, :, 0] <= 29.5)
        np.testing.assert_allclose(view[0][inside], centres[:, :, 0][inside], atol=1e-9)


class TestDistanceAndAssignment:
    def test_worked_example(self):
        ra, rb = CropRecord(0, 0, 16, 16, 4), CropRecord(8, 8, 16, 16, 4)
        d = distance_matrix(warp_grid(ra, 4), warp_grid(rb, 4), ra, rb, 4)
        ia = 3 * 4 + 3              # A cell centred at (14, 14)
        ib_same = 1 * 4 + 1         # B cell centred at (14, 14)
        ib_diag = 0                 # B cell centred at (10, 10)
        assert d.values[ia, ib_same] == 0.0
        assert d.values[ia, ib_diag] == pytest.approx(1.0)
        assert d.bin_diag_a == pytest.approx(4 * math.sqrt(2))

    def test_boundary_is_positive(self):
        dm = DistanceMatrix(np.array([[0.7, 0.7000001, 0.0]]), 1.0, 1.0)
        np.testing.assert_array_equal(assign(dm, 0.7).positives, [[True, False, True]])

    def test_threshold_must_be_positive(self):
        with pytest.raises(ValueError):
            assign(DistanceMatrix(np.zeros((1, 1)), 1.0, 1.0), 0.0)

    def test_bin_diagonal_uses_geometric_mean_side(self):
        assert bin_diagonal(CropRecord(0, 0, 8, 32, 32), 4) == pytest.approx(math.sqrt(8 * 32) / 4 * math.sqrt(2))

    @pytest.mark.parametrize("mode", ["max", "mean", "first"])
    def test_diag_modes_match_bruteforce(self, mode):
        ra, rb = CropRecord(0, 0, 20, 12, 32), CropRecord(5, 3, 9, 9, 32, True)
        dist, pos = assignment_bruteforce(ra, rb, 4, 0.7, mode)
        got = distance_matrix(warp_grid(ra, 4), warp_grid(rb, 4), ra, rb, 4, mode)
        np.testing.assert_allclose(got.values, dist, rtol=1e-12)

    def test_unknown_diag_mode(self):
        r = CropRecord(0, 0, 4, 4, 4)
        with pytest.raises(ValueError):
            distance_matrix(warp_grid(r, 2), warp_grid(r, 2), r, r, 2, "min")

    @settings(max_examples=200, deadline=None)
    @given(crop_pairs())
    def test_matches_bruteforce_transpose_and_flip(self, drawn):
        ra, rb, fr = drawn
        dist, pos = assignment_bruteforce(ra, rb, fr, 0.7)
        got = assignment_for_pair(ra, rb, fr, 0.7)
        np.testing.assert_array_equal(got.positives, pos)
        back = assignment_for_pair(rb, ra, fr, 0.7)
        np.testing.assert_array_equal(back.positives, got.positives.T)
        flipped = CropRecord(ra.x0, ra.y0, ra.w, ra.h, ra.out_res, not ra.flip)
        perm = np.arange(fr * fr).reshape(fr, fr)[:, ::-1].ravel()
        np.testing.assert_array_equal(assignment_for_pair(flipped, rb, fr, 0.7).positives, got.positives[perm])
        assert np.all(distance_matrix(warp_grid(ra, fr), warp_grid(rb, fr), ra, rb, fr).values >= 0)

    @settings(max_examples=50, deadline=None)
    @given(crop_pairs(), st.integers(2, 5))
    def test_uniform_rescale_invariance(self, drawn, k):
        ra, rb, fr = drawn

        def scaled(r):
            return CropRecord(r.x0 * k, r.y0 * k, r.w * k, r.h * k, r.out_res, r.flip)
        a = distance_matrix(warp_grid(ra, fr), warp_grid(rb, fr), ra, rb, fr).values
        b = distance_matrix(warp_grid(scaled(ra), fr), warp_grid(scaled(rb), fr), scaled(ra), scaled(rb), fr).values
        np.testing.assert_allclose(a, b, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(crop_pairs())
    def test_identical_views_contain_identity(self, drawn):
        ra, _, fr = drawn
        assert np.all(np.diag(assignment_for_pair(ra, ra, fr).positives))

    def test_set_accessors(self):
        a = assignment_for_pair(CropRecord(0, 0, 16, 16, 4), CropRecord(8, 8, 16, 16, 4), 4)
        i = 15
        assert set(a.positive_set(i)) | set(a.negative_set(i)) == set(range(16))
        assert not set(a.positive_set(i)) & set(a.negative_set(i))
        assert a.n_pairs == a.positives.sum()
        np.testing.assert_array_equal(a.transpose().positives, a.positives.T)


class TestOverlap:
    def test_identical(self):
        r = CropRecord(2, 2, 5, 5, 8)
        assert overlap_check(r, r)

    def test_disjoint(self):
        assert not overlap_check(CropRecord(0, 0, 8, 8, 8), CropRecord(16, 16, 8, 8, 8))

    def test_edge_touching(self):
        assert not overlap_check(CropRecord(0, 0, 8, 8, 8), CropRecord(8, 0, 8, 8, 8))


class TestAssignmentFile:
    def test_roundtrip_and_layout(self, tmp_path):
        pos = np.random.default_rng(0).random((5, 7)) < 0.4
        path = tmp_path / "a.bin"
        write_assignment(path, pos)
        blob = path.read_bytes()
        assert blob[:6] == b"PXASN1" and len(blob) == 6 + 8 + 35
        assert int.from_bytes(blob[6:10], "little") == 5 and int.from_bytes(blob[10:14], "little") == 7
        np.testing.assert_array_equal(read_assignment(path), pos)

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "a.bin"
        path.write_bytes(b"XXXXXX" + bytes(8))
        with pytest.raises(ValueError):
            read_assignment(path)


class TestSampling:
    def test_full_image_crop_without_flip(self):
        cfg = AugConfig(out_res=8, scale=(1.0, 1.0), ratio=(1.0, 1.0), flip_p=0.0)
        img = np.random.default_rng(0).random((3, 16, 16))
        view, rec = sample_view(img, cfg, np.random.default_rng(1))
        assert rec.as_tuple() == (0, 0, 16, 16, 8, False)
        # half-pixel aligned 2x downsample of a 16px image averages pixel pairs
        want = 0.25 * (img[:, ::2, ::2] + img[:, 1::2, ::2] + img[:, ::2, 1::2] + img[:, 1::2, 1::2])
        np.testing.assert_allclose(view, want, atol=1e-12)

    def test_identity_resize(self):
        img = np.random.default_rng(0).random((3, 8, 8))
        np.testing.assert_allclose(resized_crop(img, CropRecord(0, 0, 8, 8, 8)), img, atol=1e-12)

    def test_same_seed_bit_identical(self):
        img = np.random.default_rng(0).random((3, 32, 32))
        cfg = AugConfig()
        a = make_views(img, cfg, rng_stream(5, 2, 17))
        b = make_views(img, cfg, rng_stream(5, 2, 17))
        for (va, ra), (vb, rb) in zip(a, b):
            assert ra == rb
            assert va.tobytes() == vb.tobytes()

    def test_streams_differ_by_key(self):
        assert rng_stream(0, 0, 1).random() != rng_stream(0, 0, 2).random()
        assert rng_stream(0, 1, 1).random() != rng_stream(0, 0, 1).random()

    def test_area_fraction_distribution(self):
        cfg = AugConfig()
        rng = np.random.default_rng(0)
        W = H = 64
        fracs = []
        for _ in range(10_000):
            x0, y0, w, h = sample_crop(W, H, cfg, rng)
            assert 0 <= x0 and 0 <= y0 and x0 + w <= W and y0 + h <= H
            fracs.append(w * h / (W * H))
        fracs = np.array(fracs)
        assert fracs.min() >= 0.08 and fracs.max() <= 1.0
        # below 3/4 every aspect ratio in [3/4, 4/3] fits, so no rejection
        # bias: there the accepted areas are uniform. Above it, wide or tall
        # boxes overflow and the density thins out.
        hist, _ = np.histogram(fracs, bins=3, range=(0.08, 0.74))
        assert hist.max() / hist.min() < 1.15, hist
        upper = np.histogram(fracs, bins=1, range=(0.8, 1.0))[0][0]
        assert 0 < upper < hist.mean() * (0.2 / 0.22)

    def test_small_image_rejected(self):
        with pytest.raises(ValueError):
            sample_view(np.zeros((3, 2, 2)), AugConfig(), np.random.default_rng(0))

    def test_pair_records_are_in_bounds(self):
        img = np.zeros((3, 24, 40))
        rng = np.random.default_rng(3)
        for _ in range(50):
            (va, ra), (vb, rb) = sample_view_pair(img, AugConfig(out_res=16), rng)
            ra.validate(40, 24)
            rb.validate(40, 24)
            assert va.shape == vb.shape == (3, 16, 16)


class TestPhotometric:
    def test_all_probabilities_zero_is_identity(self):
        v = np.random.default_rng(0).random((3, 8, 8))
        out = apply_photometric(v, np.random.default_rng(1), AugConfig().photometric_off())
        np.testing.assert_array_equal(out, v)

    def test_solarize_definition(self):
        v = np.array([0.0, 0.2, 0.49, 0.5, 0.8, 1.0])
        np.testing.assert_allclose(solarize(v, 0.5), [0.0, 0.2, 0.49, 0.5, 0.2, 0.0])

    def test_blur_fixes_constants(self):
        v = np.full((3, 8, 8), 0.37)
        np.testing.assert_allclose(gaussian_blur(v, 50.0), v, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**16), which=st.sampled_from([0, 1]))
    def test_range_preserved(self, seed, which):
        rng = np.random.default_rng(seed)
        v = rng.random((3, 8, 8))
        out = apply_photometric(v, rng, AugConfig(out_res=8), which)
        assert out.shape == v.shape and out.min() >= 0.0 and out.max() <= 1.0

    def test_geometry_untouched(self):
        img = np.random.default_rng(0).random((3, 32, 32))
        on = make_views(img, AugConfig(), rng_stream(1, 0, 0))
        # the records come from the geometric draws, which precede any photometric draw
        cfg_off = AugConfig().photometric_off()
        off = make_views(img, cfg_off, rng_stream(1, 0, 0))
        assert on[0][1] == off[0][1] and on[1][1] == off[1][1]


class TestImageIO:
    def test_png_and_ppm_roundtrip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (3, 5, 7)) / 255.0
        for suffix in (".png", ".ppm"):
            path = tmp_path / ("x" + suffix)
            save_image(path, img)
            back = load_image(path)
            assert back.shape == (3, 5, 7)
            np.testing.assert_allclose(back, img, atol=1e-12)
        assert (tmp_path / "x.ppm").read_bytes()[:2] == b"P6"
