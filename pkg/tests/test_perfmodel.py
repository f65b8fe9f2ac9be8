import numpy as np
import pytest

from edgegen.perfmodel import (
    DeviceProfile,
    FitError,
    PerformancePredictor,
    ProfileFormatError,
    ProfilingSample,
    fit_predictor,
    profile_subnets,
    sample_random_gates,
)
from edgegen.supernet import (
    GateShapeError,
    SupernetSpec,
    build_supernet,
    count_resources,
)

TINY_SPEC = SupernetSpec(stem_channels=8, block_channels=(8, 8, 16, 16))
LAYOUT = TINY_SPEC.gate_layout()


def _synthetic_profile(coefs, bias, n=120, seed=0, spec=TINY_SPEC):
    """Noise-free profile whose latency follows a known linear model."""
    layout = spec.gate_layout()
    gates = sample_random_gates(layout, n, (0.1, 1.0), seed=seed)
    samples = []
    for i, g in enumerate(gates):
        counts = np.asarray(g.active_counts(), dtype=np.float64)
        r = count_resources(spec, g)
        samples.append(
            ProfilingSample(
                config_id=f"s{i}",
                active_counts=g.active_counts(),
                latency_ms=float(np.dot(coefs, counts) + bias),
                memory_bytes=r.parameter_bytes + r.peak_activation_bytes,
            )
        )
    return DeviceProfile(
        device_label="synthetic",
        layout_hash=layout.hash(),
        checkpoint_hash="",
        spec=spec,
        warmup=0,
        repeats=1,
        samples=samples,
    )


class TestSampleRandomGates:
    def test_deterministic(self):
        a = sample_random_gates(LAYOUT, 20, (0.1, 0.9), seed=5)
        b = sample_random_gates(LAYOUT, 20, (0.1, 0.9), seed=5)
        assert all(x == y for x, y in zip(a, b))

    def test_no_dead_layers(self):
        for g in sample_random_gates(LAYOUT, 50, (0.05, 1.0), seed=1):
            assert all(c >= 1 for c in g.active_counts())

    def test_ratios_roughly_uniform(self):
        lo, hi = 0.2, 0.8
        ratios = [g.activation_ratio() for g in sample_random_gates(LAYOUT, 300, (lo, hi), seed=2)]
        assert min(ratios) >= 0.05  # floor from one-per-layer guarantee
        thirds = np.histogram(ratios, bins=3, range=(lo, hi))[0]
        # coarse uniformity: each third holds a reasonable share
        assert all(t > 300 / 6 for t in thirds)

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            sample_random_gates(LAYOUT, 0, (0.1, 0.9), seed=0)
        with pytest.raises(ValueError):
            sample_random_gates(LAYOUT, 5, (0.0, 0.9), seed=0)
        with pytest.raises(ValueError):
            sample_random_gates(LAYOUT, 5, (0.9, 0.1), seed=0)


class TestFitPredictor:
    def test_recovers_exact_linear_model(self):
        coefs = np.array([0.05, 0.01, 0.2, 0.003])
        bias = 1.5
        profile = _synthetic_profile(coefs, bias)
        predictor = fit_predictor(profile)
        np.testing.assert_allclose(predictor.latency_coef, coefs, rtol=1e-6)
        assert predictor.latency_bias == pytest.approx(bias, rel=1e-6)
        assert predictor.latency_holdout_accuracy > 1 - 1e-6
        assert predictor.memory_holdout_accuracy > 1 - 1e-9

    def test_identical_gates_rank_deficient(self):
        profile = _synthetic_profile(np.array([0.1, 0.1, 0.1, 0.1]), 1.0)
        fixed = profile.samples[0]
        for s in profile.samples:
            s.active_counts = fixed.active_counts
        with pytest.raises(FitError, match="varied"):
            fit_predictor(profile)

    def test_too_few_samples(self):
        profile = _synthetic_profile(np.array([0.1, 0.1, 0.1, 0.1]), 1.0, n=20)
        with pytest.raises(FitError, match="50"):
            fit_predictor(profile)


class TestPredict:
    @pytest.fixture()
    def predictor(self):
        return fit_predictor(_synthetic_profile(np.array([0.05, 0.01, 0.2, 0.003]), 1.5))

    def test_depends_only_on_counts(self, predictor):
        gates = sample_random_gates(LAYOUT, 2, (0.5, 0.5), seed=3)
        a, b = gates
        if a.active_counts() == b.active_counts():
            assert predictor.predict(a) == predictor.predict(b)
        assert predictor.predict(a) == predictor.predict(np.asarray(a.active_counts()))

    def test_permuting_active_modules_is_invisible(self, predictor):
        g = sample_random_gates(LAYOUT, 1, (0.4, 0.4), seed=4)[0]
        permuted = {lid: np.sort(vec)[::-1] if vec.sum() else vec for lid, vec in g.vectors.items()}
        from edgegen.supernet import GateConfiguration

        g2 = GateConfiguration(LAYOUT, permuted)
        assert g.active_counts() == g2.active_counts()
        assert predictor.predict(g) == predictor.predict(g2)

    def test_monotone_for_positive_coefficients(self, predictor):
        assert (predictor.latency_coef > 0).all()
        counts = np.array([2, 2, 2, 2])
        base_lat, base_mem = predictor.predict(counts)
        more_lat, more_mem = predictor.predict(counts + np.array([1, 0, 0, 0]))
        assert more_lat >= base_lat
        assert more_mem >= base_mem

    def test_bias_clamped_at_zero(self):
        predictor = PerformancePredictor(
            spec=TINY_SPEC,
            layout_hash=LAYOUT.hash(),
            checkpoint_hash="",
            latency_coef=np.array([0.01, 0.01, 0.01, 0.01]),
            latency_bias=-5.0,
            memory_coef=np.array([1.0, 1.0]),
            memory_bias=0.0,
            latency_holdout_accuracy=1.0,
            memory_holdout_accuracy=1.0,
        )
        lat, _ = predictor.predict(np.array([1, 1, 1, 1]))
        assert lat == 0.0

    def test_layout_mismatch(self, predictor):
        other = SupernetSpec().gate_layout()
        from edgegen.supernet import GateConfiguration

        with pytest.raises(GateShapeError):
            predictor.predict(GateConfiguration.all_ones(other))
        with pytest.raises(GateShapeError):
            predictor.predict(np.array([1, 2, 3]))


class TestProfileRealSubnets:
    def test_small_profile_on_host(self):
        net = build_supernet(TINY_SPEC, seed=0).eval()
        gates = sample_random_gates(LAYOUT, 5, (0.2, 1.0), seed=0)
        profile = profile_subnets(net, gates, warmup=2, repeats=5, checkpoint_hash="abc")
        assert len(profile.samples) == 5
        for s in profile.samples:
            assert s.latency_ms > 0
            counts = np.asarray(s.active_counts, dtype=np.int64)
            assert s.memory_bytes >= count_resources(TINY_SPEC, counts).parameter_bytes
        assert profile.checkpoint_hash == "abc"
        assert profile.layout_hash == LAYOUT.hash()


class TestProfileIO:
    def test_round_trip(self, tmp_path):
        profile = _synthetic_profile(np.array([0.05, 0.01, 0.2, 0.003]), 1.5, n=60)
        path = tmp_path / "profile.jsonl"
        profile.save(path)
        loaded = DeviceProfile.load(path)
        assert loaded.device_label == profile.device_label
        assert loaded.layout_hash == profile.layout_hash
        assert loaded.spec == profile.spec
        assert len(loaded.samples) == 60
        assert loaded.samples[0] == profile.samples[0]
        # fitting from the loaded profile gives the same predictor
        a = fit_predictor(profile)
        b = fit_predictor(loaded)
        np.testing.assert_array_equal(a.latency_coef, b.latency_coef)

    def test_rejects_bad_files(self, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        with pytest.raises(ProfileFormatError):
            DeviceProfile.load(empty)
        bad_version = tmp_path / "bad.jsonl"
        profile = _synthetic_profile(np.array([0.1, 0.1, 0.1, 0.1]), 1.0, n=60)
        profile.save(bad_version)
        text = bad_version.read_text().replace('"format_version": 1', '"format_version": 7')
        bad_version.write_text(text)
        with pytest.raises(ProfileFormatError):
            DeviceProfile.load(bad_version)


class TestPredictorIO:
    def test_round_trip(self, tmp_path):
        predictor = fit_predictor(_synthetic_profile(np.array([0.05, 0.01, 0.2, 0.003]), 1.5))
        path = tmp_path / "predictor.json"
        predictor.save(path)
        loaded = PerformancePredictor.load(path)
        np.testing.assert_array_equal(loaded.latency_coef, predictor.latency_coef)
        assert loaded.latency_bias == predictor.latency_bias
        assert loaded.spec == predictor.spec
        g = sample_random_gates(LAYOUT, 1, (0.5, 0.5), seed=9)[0]
        assert loaded.predict(g) == predictor.predict(g)
