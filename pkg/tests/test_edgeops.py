import numpy as np
import pytest

from edgeleak import edgeops
from edgeleak.edgeops import (
    EdgeSimilarityRow,
    canny_edges,
    edge_similarity_report,
    fallback_edge_model,
    gaussian_kernel,
    learned_edges,
    load_edge_model,
    mean_l1,
    save_edge_model,
    ssim,
)
from oracles import ssim_ref


def step_image(h=48, w=48, at=None):
    at = at if at is not None else w // 2
    img = np.zeros((h, w))
    img[:, at:] = 1.0
    return img


class TestCanny:
    def test_constant_image_has_no_edges(self, kernel_backend):
        out = canny_edges(np.full((32, 32), 0.5))
        assert out.pixels.sum() == 0.0

    def test_binary_output(self, kernel_backend, rng):
        out = canny_edges(rng.random((40, 40)))
        assert set(np.unique(out.pixels)).issubset({0.0, 1.0})

    def test_step_edge_band_and_reference_agreement(self, kernel_backend):
        cv2 = pytest.importorskip("cv2")
        img = step_image(48, 48, at=24)
        ours = canny_edges(img, low=100, high=200).pixels

        blurred = cv2.GaussianBlur((img * 255).astype(np.uint8), (5, 5), 0)
        theirs = cv2.Canny(blurred, 100, 200).astype(float) / 255.0

        for edges in (ours, theirs):
            cols = np.nonzero(edges.any(axis=0))[0]
            assert cols.size > 0
            assert cols.min() >= 21 and cols.max() <= 26
        ours_cols = set(np.nonzero(ours.any(axis=0))[0])
        theirs_cols = set(np.nonzero(theirs.any(axis=0))[0])
        assert ours_cols & theirs_cols

    def test_deterministic(self, kernel_backend, rng):
        img = rng.random((40, 40))
        a = canny_edges(img).pixels
        b = canny_edges(img).pixels
        np.testing.assert_array_equal(a, b)

    def test_rgb_converted_with_note(self):
        img = np.stack([step_image()] * 3, axis=-1)
        out = canny_edges(img)
        assert any("luma" in n for n in out.notes)

    def test_threshold_validation(self):
        img = step_image()
        with pytest.raises(ValueError):
            canny_edges(img, low=200, high=100)
        with pytest.raises(ValueError):
            canny_edges(img, low=0, high=10)

    def test_empty_image_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            canny_edges(np.zeros((0, 0)))

    def test_blur_after_is_soft_but_bounded(self):
        out = canny_edges(step_image(), blur="after")
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0
        assert not set(np.unique(out.pixels)).issubset({0.0, 1.0})

    def test_higher_thresholds_never_add_edges(self, rng):
        img = rng.random((40, 40))
        loose = canny_edges(img, low=40, high=80).pixels
        tight = canny_edges(img, low=120, high=240).pixels
        assert np.all(loose >= tight)

    def test_gaussian_kernel_default_sigma(self):
        k = gaussian_kernel(5)
        assert k.sum() == pytest.approx(1.0, abs=1e-12)
        # sigma = 0.3*((5-1)*0.5 - 1) + 0.8 = 1.1
        x = np.arange(5) - 2.0
        want = np.exp(-x * x / (2 * 1.1 ** 2))
        want /= want.sum()
        np.testing.assert_allclose(k, want, atol=1e-12)


class TestLearnedEdges:
    def test_fallback_constant_image_is_zero(self):
        out = learned_edges(np.full((20, 20), 0.3), fallback_edge_model())
        assert out.detector == "fallback_gradient"
        np.testing.assert_array_equal(out.pixels, 0.0)

    def test_output_shape_matches_input(self, rng):
        img = rng.random((23, 31))
        out = learned_edges(img, fallback_edge_model())
        assert out.pixels.shape == img.shape

    def test_fallback_range(self, rng):
        out = learned_edges(rng.random((20, 20)), fallback_edge_model())
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_saved_net_roundtrip_and_range(self, tmp_path, rng, kernel_backend):
        layers = [
            (rng.normal(0, 0.5, size=(4, 1, 3, 3)).astype(np.float32),
             np.zeros(4, dtype=np.float32)),
            (rng.normal(0, 0.5, size=(1, 4, 3, 3)).astype(np.float32),
             np.zeros(1, dtype=np.float32)),
        ]
        path = tmp_path / "edgenet.zip"
        save_edge_model(path, layers)
        model = load_edge_model(path)
        assert model.detector == "hed"
        img = rng.random((24, 24))
        out = learned_edges(img, model)
        assert out.pixels.shape == img.shape
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0
        again = load_edge_model(path)
        np.testing.assert_array_equal(
            learned_edges(img, again).pixels, out.pixels
        )

    def test_corrupt_weights_name_the_file(self, tmp_path):
        bad = tmp_path / "broken.zip"
        bad.write_bytes(b"this is not a weights archive")
        with pytest.raises(ValueError, match="broken.zip"):
            load_edge_model(bad)

    def test_none_selects_fallback(self):
        assert load_edge_model(None).detector == "fallback_gradient"


class TestSsim:
    def test_identity(self, kernel_backend, rng):
        x = rng.random((32, 32))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_symmetry(self, rng):
        a, b = rng.random((24, 24)), rng.random((24, 24))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)

    def test_constant_images_closed_form(self):
        a = np.full((24, 24), 0.2)
        b = np.full((24, 24), 0.8)
        c1 = 1e-4
        want = (2 * 0.2 * 0.8 + c1) / (0.2 ** 2 + 0.8 ** 2 + c1)
        assert ssim(a, b) == pytest.approx(want, abs=1e-6)
        assert want == pytest.approx(0.4707, abs=1e-4)

    def test_matches_bruteforce_reference(self, kernel_backend, rng):
        a = rng.random((16, 18))
        b = np.clip(a + rng.normal(0, 0.2, size=a.shape), 0, 1)
        k = gaussian_kernel(11, 1.5)
        assert ssim(a, b) == pytest.approx(ssim_ref(a, b, k), abs=1e-10)

    def test_bounds(self, rng):
        for _ in range(10):
            a, b = rng.random((16, 16)), rng.random((16, 16))
            assert -1.0 <= ssim(a, b) <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))

    def test_too_small_image(self):
        with pytest.raises(ValueError, match="at least"):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestMeanL1:
    def test_identity_zero(self, rng):
        x = rng.random((10, 10))
        assert mean_l1(x, x) == 0.0

    def test_zeros_vs_ones(self):
        assert mean_l1(np.zeros((5, 5)), np.ones((5, 5))) == 1.0

    def test_inverted_checkerboard(self):
        idx = np.indices((8, 8)).sum(axis=0) % 2
        a = idx.astype(float)
        assert mean_l1(a, 1.0 - a) == 1.0

    def test_bounds_and_zero_iff_identical(self, rng):
        a, b = rng.random((12, 12)), rng.random((12, 12))
        v = mean_l1(a, b)
        assert 0.0 <= v <= 1.0
        assert v > 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            mean_l1(np.zeros((4, 4)), np.zeros((5, 4)))


class TestEdgeSimilarityReport:
    def test_identical_pairs_are_perfect(self, rng):
        img1, img2 = rng.random((24, 24)), rng.random((24, 24))
        groups = {
            frozenset({"edges", "segmentation"}): [(img1, img1.copy())],
            frozenset({"segmentation"}): [(img2, img2.copy())],
        }
        rows = edge_similarity_report(groups, lambda im: im)
        assert len(rows) == 2
        for r in rows:
            assert r.ssim == pytest.approx(1.0, abs=1e-9)
            assert r.l1 == 0.0

    def test_empty_group_skipped_with_warning(self, rng):
        img = rng.random((24, 24))
        groups = {frozenset({"segmentation"}): [], frozenset({"edges"}): [(img, img)]}
        with pytest.warns(UserWarning, match="empty"):
            rows = edge_similarity_report(groups, lambda im: im)
        assert len(rows) == 1

    def test_row_validation(self):
        with pytest.raises(ValueError):
            EdgeSimilarityRow(frozenset(), 0.5, 0.1, 0)

    def test_csv_output(self, tmp_path, rng):
        img = rng.random((24, 24))
        rows = edge_similarity_report(
            {frozenset({"depth", "edges"}): [(img, img.copy())]}, lambda im: im
        )
        out = tmp_path / "report.csv"
        edgeops.report_to_csv(rows, out)
        text = out.read_text().strip().splitlines()
        assert text[0] == "conditioning,ssim,l1,n_pairs"
        assert text[1].startswith("depth+edges,1.000000,0.000000,1")
