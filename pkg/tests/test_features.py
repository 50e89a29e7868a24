import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import random_window
from evpr.errors import (
    BadArchiveHeader,
    ConfigError,
    MissingFrameId,
    NonFiniteInput,
    ProviderFailure,
    ZeroVector,
)
from evpr.features import (
    KIND_DEPTH,
    KIND_GLOBAL,
    KIND_KEYPOINTS,
    ArchiveProvider,
    BuiltinCornerProvider,
    BuiltinDensityDepthProvider,
    BuiltinGridProvider,
    GlobalDescriptor,
    GlobalFeatureMap,
    KeypointSet,
    ProviderSpec,
    SubprocessProvider,
    embed_global,
    gem_pool,
    l2_normalize,
    load_feature_archive,
    make_provider,
    provider_fingerprint,
    write_feature_archive,
)
from evpr.representations import build_histogram, build_mcts, build_tencode
from evpr.tensorio import encode_tensor, read_tensor, write_tensor

GEOMETRY = (32, 24)


class TestGemPool:
    def test_gamma_one_is_arithmetic_mean(self, rng):
        data = rng.uniform(0, 10, size=(7, 9, 4)).astype(np.float32)
        pooled = gem_pool(GlobalFeatureMap(data), gamma=1.0)
        expected = data.astype(np.float64).mean(axis=(0, 1))
        assert np.allclose(pooled.vector, expected, atol=1e-12)

    def test_constant_map_is_identity(self):
        data = np.full((5, 5, 3), 2.5, dtype=np.float32)
        pooled = gem_pool(GlobalFeatureMap(data), gamma=7.0)
        assert np.allclose(pooled.vector, 2.5, atol=1e-12)

    def test_hand_computed_2x2_case(self):
        data = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)[:, :, None]
        pooled = gem_pool(GlobalFeatureMap(data), gamma=5.0)
        expected = ((1.0 + 2.0 ** 5 + 3.0 ** 5 + 4.0 ** 5) / 4.0) ** (1.0 / 5.0)
        assert pooled.vector[0] == pytest.approx(expected, abs=1e-9)

    def test_monotone_in_gamma_bounded_by_mean_and_max(self, rng):
        data = rng.uniform(0, 5, size=(14, 14, 3)).astype(np.float32)
        fmap = GlobalFeatureMap(data)
        gammas = [1.0, 2.0, 5.0, 10.0, 50.0, 100.0]
        previous = None
        mean = data.astype(np.float64).mean(axis=(0, 1))
        peak = data.astype(np.float64).max(axis=(0, 1))
        for gamma in gammas:
            pooled = gem_pool(fmap, gamma).vector
            assert np.all(pooled >= mean - 1e-9)
            assert np.all(pooled <= peak + 1e-9)
            if previous is not None:
                assert np.all(pooled >= previous - 1e-9)
            previous = pooled

    def test_large_gamma_approaches_channel_max(self, rng):
        data = rng.uniform(0, 1, size=(14, 14, 6)).astype(np.float32)
        pooled = gem_pool(GlobalFeatureMap(data), gamma=100.0).vector
        peak = data.astype(np.float64).max(axis=(0, 1))
        assert np.all(pooled >= 0.95 * peak)

    def test_negative_activations_clamped(self):
        data = np.array([[-1.0, 4.0]], dtype=np.float32)[:, :, None]
        pooled = gem_pool(GlobalFeatureMap(data), gamma=1.0)
        assert pooled.vector[0] == pytest.approx(2.0, abs=1e-12)

    def test_rejects_nan_and_bad_gamma(self):
        bad = np.full((2, 2, 1), np.nan, dtype=np.float32)
        with pytest.raises(NonFiniteInput):
            gem_pool(GlobalFeatureMap(bad))
        with pytest.raises(ConfigError):
            gem_pool(GlobalFeatureMap(np.ones((2, 2, 1), np.float32)), gamma=0.5)


class TestL2Normalize:
    def test_three_four_five(self):
        unit = l2_normalize(GlobalDescriptor(np.array([3.0, 4.0])))
        assert np.allclose(unit.vector, [0.6, 0.8])
        assert unit.normalized

    def test_idempotent(self):
        unit = l2_normalize(GlobalDescriptor(np.array([3.0, 4.0])))
        again = l2_normalize(unit)
        assert np.array_equal(unit.vector, again.vector)

    def test_zero_vector_rejected(self):
        with pytest.raises(ZeroVector):
            l2_normalize(GlobalDescriptor(np.zeros(4)))

    def test_unit_norm_within_tolerance(self, rng):
        for _ in range(20):
            v = rng.standard_normal(32)
            unit = l2_normalize(GlobalDescriptor(v))
            assert abs(np.linalg.norm(unit.vector) - 1.0) < 1e-6


class TestBuiltinGrid:
    def test_all_zero_input_gives_all_zero_map(self):
        provider = BuiltinGridProvider()
        out = provider.embed(np.zeros((28, 28, 2), dtype=np.float32))
        assert out.shape == (14, 14, 6)
        assert np.all(out == 0)

    def test_single_nonzero_patch_lights_one_cell(self):
        provider = BuiltinGridProvider(grid=4)
        data = np.zeros((16, 16, 1), dtype=np.float32)
        data[1, 2, 0] = 3.0  # inside cell (0, 0)
        out = provider.embed(data)
        nonzero_cells = {(i, j) for i, j, _ in zip(*np.nonzero(out))}
        assert nonzero_cells == {(0, 0)}

    def test_hand_computed_4x4_toy(self):
        provider = BuiltinGridProvider(grid=2)
        data = np.array([[1.0, 2.0, 0.0, 0.0],
                         [3.0, 4.0, 0.0, 0.0],
                         [0.0, 0.0, 5.0, 0.0],
                         [0.0, 0.0, 0.0, 0.0]], dtype=np.float32)[:, :, None]
        out = provider.embed(data)
        assert out.shape == (2, 2, 3)
        assert out[0, 0] == pytest.approx([2.5, 4.0, 4.0])   # mean, max, nnz
        assert out[0, 1] == pytest.approx([0.0, 0.0, 0.0])
        assert out[1, 1] == pytest.approx([1.25, 5.0, 1.0])

    def test_deterministic(self, rng):
        w = random_window(rng, 500, GEOMETRY)
        hist = build_histogram(w, GEOMETRY)
        provider = BuiltinGridProvider()
        assert np.array_equal(provider.embed(hist), provider.embed(hist))

    def test_input_smaller_than_grid(self):
        provider = BuiltinGridProvider(grid=14)
        out = provider.embed(np.ones((4, 4, 1), dtype=np.float32))
        assert out.shape == (14, 14, 3)
        assert np.isfinite(out).all()


class TestBuiltinCorner:
    def test_flat_input_gives_empty_set(self):
        provider = BuiltinCornerProvider()
        w = random_window(np.random.default_rng(0), 0, GEOMETRY)
        mcts = build_mcts(w, GEOMETRY)
        assert len(provider.detect(mcts)) == 0

    def test_isolated_blob_yields_keypoint_near_center(self):
        provider = BuiltinCornerProvider()
        plane = np.zeros((40, 40), dtype=np.float64)
        plane[18:21, 22:25] = 1.0  # 3x3 blob centered at (19, 23)
        kp = provider.detect(plane)
        assert len(kp) >= 1
        dist = np.hypot(kp.points[:, 0] - 23.0, kp.points[:, 1] - 19.0)
        assert dist.min() <= 2.0

    def test_descriptors_are_normalized_patches(self):
        provider = BuiltinCornerProvider()
        rng = np.random.default_rng(3)
        plane = rng.uniform(0, 1, size=(48, 48))
        kp = provider.detect(plane)
        assert kp.descriptors.shape[1] == 64
        norms = np.linalg.norm(kp.descriptors, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-5)

    def test_deterministic(self, rng):
        w = random_window(rng, 800, GEOMETRY)
        mcts = build_mcts(w, GEOMETRY)
        provider = BuiltinCornerProvider()
        a, b = provider.detect(mcts), provider.detect(mcts)
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.descriptors, b.descriptors)


class TestBuiltinDensityDepth:
    def test_uniform_input_gives_constant_map(self):
        provider = BuiltinDensityDepthProvider()
        w = random_window(np.random.default_rng(0), 0, GEOMETRY)
        tencode = build_tencode(w, GEOMETRY)
        depth = provider.estimate(tencode)
        assert depth.data.shape == (24, 32)
        assert np.allclose(depth.data, depth.data[0, 0])

    def test_dense_regions_are_nearer(self, rng):
        provider = BuiltinDensityDepthProvider()
        w = random_window(rng, 2_000, GEOMETRY)
        tencode = build_tencode(w, GEOMETRY)
        depth = provider.estimate(tencode)
        assert np.all(depth.data > 0)
        assert depth.data.min() < depth.data.max()

    def test_deterministic(self, rng):
        w = random_window(rng, 500, GEOMETRY)
        tencode = build_tencode(w, GEOMETRY)
        provider = BuiltinDensityDepthProvider()
        assert np.array_equal(provider.estimate(tencode).data,
                              provider.estimate(tencode).data)


class TestArchive:
    def make_keypoints(self, rng, n=5, dim=8):
        return KeypointSet(points=rng.uniform(0, 30, (n, 2)).astype(np.float32),
                           descriptors=rng.standard_normal((n, dim)).astype(np.float32),
                           scores=rng.uniform(0, 1, n).astype(np.float32))

    def test_lookup_and_missing_id(self, tmp_path, rng):
        path = str(tmp_path / "f.evpa")
        maps = {i: rng.uniform(0, 1, (4, 4, 2)).astype(np.float32) for i in range(3)}
        write_feature_archive(path, [(i, KIND_GLOBAL, m) for i, m in maps.items()])
        archive = load_feature_archive(path)
        assert np.array_equal(archive.global_map(1), maps[1])
        with pytest.raises(MissingFrameId):
            archive.global_map(5)

    def test_round_trip_random_tensors_bit_exact(self, tmp_path, rng):
        path = str(tmp_path / "mix.evpa")
        entries = []
        expected = {}
        for i in range(4):
            fmap = rng.standard_normal((6, 5, 3)).astype(np.float32)
            depth = rng.uniform(0, 2, (9, 7)).astype(np.float32)
            kp = self.make_keypoints(rng)
            entries += [(i, KIND_GLOBAL, fmap), (i, KIND_DEPTH, depth),
                        (i, KIND_KEYPOINTS, kp)]
            expected[i] = (fmap, depth, kp)
        write_feature_archive(path, entries)
        archive = load_feature_archive(path)
        for i, (fmap, depth, kp) in expected.items():
            assert archive.global_map(i).tobytes() == fmap.tobytes()
            assert archive.depth(i).tobytes() == depth.tobytes()
            got = archive.keypoints(i)
            assert got.points.tobytes() == kp.points.tobytes()
            assert got.descriptors.tobytes() == kp.descriptors.tobytes()
            assert got.scores.tobytes() == kp.scores.tobytes()

    def test_empty_archive(self, tmp_path):
        path = str(tmp_path / "empty.evpa")
        write_feature_archive(path, [])
        archive = load_feature_archive(path)
        assert len(archive) == 0
        with pytest.raises(MissingFrameId):
            archive.keypoints(0)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.evpa"
        path.write_bytes(b"WRONGDATA")
        with pytest.raises(BadArchiveHeader):
            load_feature_archive(str(path))

    def test_archive_provider_requires_frame_id(self, tmp_path, rng):
        path = str(tmp_path / "p.evpa")
        write_feature_archive(path, [(7, KIND_GLOBAL,
                                      rng.uniform(0, 1, (3, 3, 1)).astype(np.float32))])
        provider = ArchiveProvider(path)
        assert provider.embed(None, frame_id=7).shape == (3, 3, 1)
        with pytest.raises(ProviderFailure):
            provider.embed(None)


class TestSubprocessProvider:
    def command(self) -> str:
        helper = Path(__file__).parent / "subprocess_double.py"
        return f"{sys.executable} {helper}"

    def test_round_trip_doubles(self):
        provider = SubprocessProvider(self.command())
        out = provider.embed(np.ones((4, 4, 2), dtype=np.float32))
        assert out.shape == (4, 4, 2)
        assert np.all(out == 2.0)

    def test_failure_surfaces_as_provider_error(self):
        provider = SubprocessProvider(f"{sys.executable} -c 'import sys; sys.exit(3)'")
        with pytest.raises(ProviderFailure):
            provider.embed(np.ones((2, 2, 1), dtype=np.float32))

    def test_single_threaded_flag(self):
        assert SubprocessProvider(self.command()).single_threaded


class TestSpecsAndFingerprints:
    def test_parse_variants(self):
        assert ProviderSpec.parse("builtin-grid").kind == "builtin-grid"
        spec = ProviderSpec.parse("builtin-grid:grid=7")
        assert spec.params == {"grid": "7"}
        spec = ProviderSpec.parse("archive:/data/feats.evpa")
        assert spec.params == {"path": "/data/feats.evpa"}
        spec = ProviderSpec.parse("subprocess:python run.py --flag")
        assert spec.params == {"command": "python run.py --flag"}
        with pytest.raises(ConfigError):
            ProviderSpec.parse("nonsense")

    def test_fingerprint_ignores_archive_path(self, tmp_path, rng):
        tensor = rng.uniform(0, 1, (2, 2, 1)).astype(np.float32)
        a, b = str(tmp_path / "a.evpa"), str(tmp_path / "b.evpa")
        write_feature_archive(a, [(0, KIND_GLOBAL, tensor)])
        write_feature_archive(b, [(0, KIND_GLOBAL, tensor)])
        fp_a = provider_fingerprint(make_provider(ProviderSpec.parse(f"archive:{a}")))
        fp_b = provider_fingerprint(make_provider(ProviderSpec.parse(f"archive:{b}")))
        assert fp_a == fp_b
        fp_model = provider_fingerprint(
            make_provider(ProviderSpec.parse(f"archive:path={a},model=vits16")))
        assert fp_model != fp_a

    def test_fingerprint_resolves_defaults(self):
        explicit = make_provider(ProviderSpec.parse("builtin-grid:grid=14"))
        implicit = make_provider(ProviderSpec.parse("builtin-grid"))
        assert provider_fingerprint(explicit) == provider_fingerprint(implicit)
        other = make_provider(ProviderSpec.parse("builtin-grid:grid=7"))
        assert provider_fingerprint(other) != provider_fingerprint(implicit)


class TestTensorDump:
    def test_round_trip(self, tmp_path, rng):
        path = str(tmp_path / "t.npt")
        tensor = rng.standard_normal((3, 4, 2)).astype(np.float32)
        write_tensor(path, tensor)
        back = read_tensor(path)
        assert back.shape == (3, 4, 2, 1)
        assert back[:, :, :, 0].tobytes() == tensor.tobytes()

    def test_golden_bytes(self):
        tensor = np.array([[1.0, 2.0]], dtype=np.float32)
        blob = encode_tensor(tensor)
        assert blob.hex() == ("01000000" "02000000" "01000000" "01000000"
                              "0000803f" "00000040")


def test_embed_global_validates_output(rng):
    class BadProvider:
        def embed(self, rep, frame_id=None):
            return np.full((2, 2, 1), np.inf, dtype=np.float32)

    with pytest.raises(ProviderFailure):
        embed_global(BadProvider(), np.zeros((4, 4, 1), np.float32))
