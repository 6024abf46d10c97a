"""Detector, descriptor, matcher, and feature-file tests."""

import numpy as np
import pytest

from meshtie.bench.oracles import nearest_two_oracle
from meshtie.features import (
    FeatureFormatError,
    FeatureParams,
    ImageTooSmallError,
    Keypoint,
    PutativeMatch,
    detect_and_describe,
    export_features,
    import_features,
    match_ratio,
    to_grayscale,
)


def blobby_image(rng, w=320, h=240, n_blobs=60):
    """Test image with randomly placed Gaussian spots plus mild noise."""
    from scipy.ndimage import gaussian_filter

    img = 0.5 + 0.1 * gaussian_filter(rng.standard_normal((h, w)), 3.0)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    for _ in range(n_blobs):
        x, y = rng.uniform(15, w - 15), rng.uniform(15, h - 15)
        sigma = rng.uniform(1.5, 4.0)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        img += sign * 0.4 * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma**2))
    return np.clip(img, 0, 1)


class TestDetect:
    def test_uniform_image_no_keypoints(self):
        kps, descs = detect_and_describe(np.full((128, 128), 0.5))
        assert kps == []
        assert descs.shape == (0, 128)

    def test_too_small_image_rejected(self):
        with pytest.raises(ImageTooSmallError):
            detect_and_describe(np.zeros((63, 100)))

    def test_finds_blobs(self):
        rng = np.random.default_rng(0)
        img = blobby_image(rng)
        kps, descs = detect_and_describe(img)
        assert len(kps) >= 40
        assert descs.shape == (len(kps), 128)
        for kp in kps[:20]:
            assert 0 <= kp.position[0] < img.shape[1]
            assert 0 <= kp.position[1] < img.shape[0]
            assert kp.scale > 0

    def test_descriptors_normalized_and_clipped(self):
        rng = np.random.default_rng(1)
        _, descs = detect_and_describe(blobby_image(rng))
        norms = np.linalg.norm(descs, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)
        # clipping happened before the final renormalization
        assert descs.max() <= 0.2 / descs[np.argmax(descs.max(axis=1))].min(initial=1.0) + 1.0

    def test_rotation_repeatability(self):
        rng = np.random.default_rng(2)
        img = blobby_image(rng, w=256, h=256)
        kps, _ = detect_and_describe(img)
        rot = np.rot90(img).copy()
        kps_r, _ = detect_and_describe(rot)
        # np.rot90 maps array (r, c) -> (C-1-c, r) for WxH -> rotated coords:
        # continuous (x, y) -> (y, W - x)
        w = img.shape[1]
        mapped = np.array([[kp.position[1], w - kp.position[0]] for kp in kps])
        positions_r = np.array([kp.position for kp in kps_r])
        hits = 0
        for p in mapped:
            if len(positions_r) and np.linalg.norm(positions_r - p, axis=1).min() < 1.5:
                hits += 1
        assert hits / len(mapped) >= 0.8

    def test_intensity_offset_leaves_descriptors(self):
        rng = np.random.default_rng(3)
        img = np.clip(blobby_image(rng) * 0.7, 0, 1)
        kps1, d1 = detect_and_describe(img)
        kps2, d2 = detect_and_describe(np.clip(img + 0.08, 0, 1))
        # compare descriptors of keypoints at matching positions
        pos1 = np.array([kp.position for kp in kps1])
        pos2 = np.array([kp.position for kp in kps2])
        compared = 0
        for i, p in enumerate(pos1):
            d = np.linalg.norm(pos2 - p, axis=1)
            j = int(np.argmin(d))
            if d[j] < 0.25:
                np.testing.assert_allclose(d1[i], d2[j], atol=1e-3)
                compared += 1
        assert compared >= 0.7 * len(pos1)

    def test_max_features_keeps_strongest(self):
        rng = np.random.default_rng(4)
        img = blobby_image(rng)
        kps_all, _ = detect_and_describe(img)
        kps_cap, _ = detect_and_describe(img, FeatureParams(max_features=10))
        assert len(kps_cap) == 10 < len(kps_all)

    def test_grayscale_conversion_luma(self):
        rgb = np.zeros((2, 2, 3), dtype=np.uint8)
        rgb[..., 0] = 255
        gray = to_grayscale(rgb)
        np.testing.assert_allclose(gray, 0.299, atol=1e-9)


class TestSelfMatch:
    def test_every_keypoint_matches_itself_at_zero_distance(self):
        rng = np.random.default_rng(5)
        _, descs = detect_and_describe(blobby_image(rng))
        d2 = ((descs[:, None, :] - descs[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argmin(d2 + np.where(np.eye(len(descs), dtype=bool), 0, 0), axis=1)
        # self-distance is exactly zero and is the minimum
        assert np.allclose(np.diag(d2), 0.0)
        assert (d2.min(axis=1) == 0.0).all()
        assert (nearest == np.arange(len(descs))).mean() > 0.99


class TestMatchRatio:
    def test_clear_winner_kept(self):
        a = np.array([[1.0, 0.0]])
        b = np.array([[1.0, 1.0], [1.0, 10.0]])
        matches = match_ratio(a, b, ratio_max=0.8)
        assert len(matches) == 1
        m = matches[0]
        assert (m.index_a, m.index_b) == (0, 0)
        assert abs(m.ratio - 0.1) < 1e-12

    def test_duplicate_descriptors_rejected(self):
        a = np.array([[1.0, 0.0]])
        b = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert match_ratio(a, b, ratio_max=0.8) == []

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            match_ratio(np.zeros((0, 4)), np.ones((2, 4)))

    def test_one_to_one(self):
        rng = np.random.default_rng(6)
        a = rng.normal(0, 1, (200, 16))
        b = rng.normal(0, 1, (50, 16))
        matches = match_ratio(a, b, ratio_max=0.97)
        used_b = [m.index_b for m in matches]
        assert len(used_b) == len(set(used_b))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.normal(0, 1, (500, 32))
        b = rng.normal(0, 1, (500, 32))
        got = {(m.index_a, m.index_b, round(m.ratio, 12)) for m in match_ratio(a, b, 0.9)}

        j1, j2, d1, d2 = nearest_two_oracle(a, b)
        candidates = []
        for i in range(len(a)):
            ratio = 1.0 if d2[i] == 0 else min(d1[i] / d2[i], 1.0)
            if ratio < 0.9:
                candidates.append((i, int(j1[i]), ratio))
        best = {}
        for i, j, r in candidates:
            if j not in best or (r, i) < best[j]:
                best[j] = (r, i)
        expected = {(i, j, round(r, 12)) for j, (r, i) in best.items()
                    for i2, j2_, r2 in candidates if (i2, j2_) == (i, j)}
        assert got == expected

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        a = rng.normal(0, 1, (100, 8))
        b = rng.normal(0, 1, (100, 8))
        m1 = match_ratio(a, b, 0.9)
        m2 = match_ratio(a, b, 0.9)
        assert [(m.index_a, m.index_b) for m in m1] == [(m.index_a, m.index_b) for m in m2]

    def test_ratio_invariant(self):
        with pytest.raises(ValueError):
            PutativeMatch(0, 0, 1.5)


class TestFeatureFiles:
    def _sample(self, rng, n=20):
        kps = [
            Keypoint(position=rng.uniform(0, 100, 2), scale=rng.uniform(1, 4),
                     orientation=rng.uniform(-3, 3))
            for _ in range(n)
        ]
        descs = rng.uniform(0, 0.2, (n, 128)).astype(np.float32)
        descs /= np.linalg.norm(descs, axis=1, keepdims=True)
        return kps, descs

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        kps, descs = self._sample(rng)
        path = tmp_path / "f.feat"
        export_features(path, kps, descs)
        kps2, descs2 = import_features(path)
        assert len(kps2) == len(kps)
        for a, b in zip(kps, kps2):
            np.testing.assert_array_equal(np.float32(a.position), b.position)
            assert np.float32(a.scale) == np.float32(b.scale)
        np.testing.assert_array_equal(descs, descs2)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.feat"
        export_features(path, [], np.zeros((0, 128), dtype=np.float32))
        kps, descs = import_features(path)
        assert kps == [] and descs.shape == (0, 128)

    def test_renormalizes_descriptors(self, tmp_path):
        rng = np.random.default_rng(10)
        kps, descs = self._sample(rng, 5)
        export_features(tmp_path / "f.feat", kps, descs * 3.0)
        _, descs2 = import_features(tmp_path / "f.feat")
        np.testing.assert_allclose(np.linalg.norm(descs2, axis=1), 1.0, atol=1e-6)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.feat"
        path.write_bytes(b"NOTFEAT" + b"\0" * 100)
        with pytest.raises(FeatureFormatError):
            import_features(path)

    def test_truncated_file(self, tmp_path):
        rng = np.random.default_rng(11)
        kps, descs = self._sample(rng, 3)
        path = tmp_path / "t.feat"
        export_features(path, kps, descs)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FeatureFormatError):
            import_features(path)

    def test_out_of_bounds_dropped_with_image_size(self, tmp_path):
        kps = [
            Keypoint(position=np.array([10.0, 10.0]), scale=2.0, orientation=0.0),
            Keypoint(position=np.array([500.0, 10.0]), scale=2.0, orientation=0.0),
        ]
        descs = np.ones((2, 128), dtype=np.float32)
        path = tmp_path / "b.feat"
        export_features(path, kps, descs)
        kps2, _ = import_features(path, image_size=(100, 100))
        assert len(kps2) == 1
        np.testing.assert_allclose(kps2[0].position, [10, 10])
