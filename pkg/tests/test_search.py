import numpy as np
import pytest

from edgegen.assembler import GenerationRequest, build_assembler, generate_gate_logits
from edgegen.perfmodel import PerformancePredictor
from edgegen.search import (
    BudgetInfeasibleError,
    SearchConfig,
    enforce_limit,
    generate_model,
    search,
)
from edgegen.supernet import SupernetSpec, build_supernet
from edgegen.tasks import EdgeScenario, TaskDescriptor
from edgegen.training import JointCheckpoint, TrainingConfig

SPEC = SupernetSpec(stem_channels=8, block_channels=(8, 8, 16, 16))
LAYOUT = SPEC.gate_layout()
HAS0 = TaskDescriptor.parse("has:digit0")


def _checkpoint(seed=0):
    supernet = build_supernet(SPEC, seed=seed)
    assembler = build_assembler(LAYOUT, d_sel=32, num_gaters=2, seed=seed)
    supernet.eval()
    assembler.eval()
    return JointCheckpoint(
        spec=SPEC,
        layout=LAYOUT,
        supernet=supernet,
        assembler=assembler,
        task_vocabulary=(HAS0.canonical(),),
        config=TrainingConfig(),
    )


def _monotone_predictor(seed=1):
    rng = np.random.default_rng(seed)
    return PerformancePredictor(
        spec=SPEC,
        layout_hash=LAYOUT.hash(),
        checkpoint_hash="",
        latency_coef=rng.uniform(0.05, 0.2, LAYOUT.layer_count),
        latency_bias=0.5,
        memory_coef=np.array([1.0, 1.0]),
        memory_bias=0.0,
        latency_holdout_accuracy=1.0,
        memory_holdout_accuracy=1.0,
    )


def _exhaustive_sweep_oracle(scenario, checkpoint, predictor, config):
    """Independent replay of the sweep semantics: evaluate every round,
    stop at the first violation, return the last passing round."""
    chosen = None
    for limit in config.sweep():
        logits = generate_gate_logits(GenerationRequest(scenario.task, limit), checkpoint.assembler)
        gates = enforce_limit(logits, checkpoint.layout, limit)
        lat, mem = predictor.predict(gates)
        lat_bad = scenario.latency_budget_ms is not None and lat > scenario.latency_budget_ms
        mem_bad = scenario.memory_budget_bytes is not None and mem > scenario.memory_budget_bytes
        if lat_bad or mem_bad:
            break
        chosen = (limit, gates)
    return chosen


class TestEnforceLimit:
    def _logits(self, values):
        offsets = np.cumsum([0] + list(LAYOUT.widths))
        return {
            lid: np.asarray(values[offsets[i] : offsets[i + 1]], dtype=np.float64)
            for i, lid in enumerate(LAYOUT.layer_ids)
        }

    def test_compliant_configuration_unchanged(self):
        rng = np.random.default_rng(0)
        values = rng.normal(-2.0, 0.1, LAYOUT.total_modules)
        for i in range(0, LAYOUT.total_modules, LAYOUT.total_modules // 4):
            values[i] = 1.0  # a few active entries, one per region
        logits = self._logits(values)
        raw_active = int((values > 0).sum())
        assert raw_active / LAYOUT.total_modules <= 0.2
        gates = enforce_limit(logits, LAYOUT, 0.2)
        assert np.array_equal(gates.to_flat(), (values > 0).astype(np.int8))

    def test_topk_matches_brute_force_sort(self):
        rng = np.random.default_rng(1)
        values = rng.normal(1.0, 1.0, LAYOUT.total_modules)  # mostly positive
        limit = 0.25
        gates = enforce_limit(self._logits(values), LAYOUT, limit)
        cap = int(limit * LAYOUT.total_modules)
        # independent oracle: lexicographic-tie-broken top-k, then dead-layer fixes
        order = sorted(range(len(values)), key=lambda i: (-values[i], i))
        expected = np.zeros(len(values), dtype=np.int8)
        expected[order[:cap]] = 1
        offsets = np.cumsum([0] + list(LAYOUT.widths))
        for i in range(LAYOUT.layer_count):
            lo, hi = offsets[i], offsets[i + 1]
            if expected[lo:hi].sum() == 0:
                expected[lo + int(np.argmax(values[lo:hi]))] = 1
        assert np.array_equal(gates.to_flat(), expected)

    def test_tie_break_is_lexicographic(self):
        values = np.full(LAYOUT.total_modules, 3.14)
        limit = 0.25
        cap = int(limit * LAYOUT.total_modules)
        gates = enforce_limit(self._logits(values), LAYOUT, limit)
        flat = gates.to_flat()
        # equal logits: the first cap positions win, then dead layers get one each
        assert flat[:cap].all()
        for lid in LAYOUT.layer_ids[1:]:
            assert gates.vectors[lid].sum() >= 1

    def test_ratio_bound_with_dead_layer_forcing(self):
        rng = np.random.default_rng(2)
        for limit in (0.05, 0.1, 0.3):
            values = rng.normal(0.5, 1.0, LAYOUT.total_modules)
            gates = enforce_limit(self._logits(values), LAYOUT, limit)
            bound = limit + LAYOUT.layer_count / LAYOUT.total_modules
            assert gates.activation_ratio() <= bound + 1e-12
            assert all(c >= 1 for c in gates.active_counts())

    def test_tiny_limit_falls_back_to_one_module_per_layer(self):
        # cap below the layer count: forcing alone decides the configuration
        values = np.arange(LAYOUT.total_modules, dtype=np.float64)
        gates = enforce_limit(self._logits(values), LAYOUT, 1 / LAYOUT.total_modules / 2)
        assert gates.active_counts() == (1,) * LAYOUT.layer_count
        for lid in LAYOUT.layer_ids:
            # the forced survivor is the layer's max-logit module (last index here)
            assert gates.vectors[lid][-1] == 1


class TestSearch:
    def test_matches_exhaustive_oracle(self):
        checkpoint = _checkpoint()
        predictor = _monotone_predictor()
        config = SearchConfig()
        rng = np.random.default_rng(7)
        lat_all, _ = predictor.predict(np.asarray(LAYOUT.widths))
        for _ in range(10):
            budget = float(rng.uniform(0.6, 1.2) * lat_all)
            scenario = EdgeScenario(task=HAS0, latency_budget_ms=budget)
            try:
                result = search(scenario, checkpoint, predictor, config)
            except BudgetInfeasibleError:
                assert _exhaustive_sweep_oracle(scenario, checkpoint, predictor, config) is None
                continue
            oracle = _exhaustive_sweep_oracle(scenario, checkpoint, predictor, config)
            assert oracle is not None
            assert result.limit == oracle[0]
            assert result.gates == oracle[1]
            assert result.predicted_latency_ms <= budget
            assert all(c >= 1 for c in result.gates.active_counts())

    def test_generous_budget_returns_max_limit(self):
        checkpoint = _checkpoint()
        predictor = _monotone_predictor()
        lat_all, _ = predictor.predict(np.asarray(LAYOUT.widths))
        scenario = EdgeScenario(task=HAS0, latency_budget_ms=lat_all * 10)
        config = SearchConfig()
        result = search(scenario, checkpoint, predictor, config)
        assert result.limit == config.sweep()[-1]
        assert result.rounds == len(config.sweep())
        assert all(t.verdict == "pass" for t in result.trace)

    def test_infeasible_budget_raises_with_first_round(self):
        checkpoint = _checkpoint()
        predictor = _monotone_predictor()
        scenario = EdgeScenario(task=HAS0, latency_budget_ms=1e-6)
        with pytest.raises(BudgetInfeasibleError) as err:
            search(scenario, checkpoint, predictor)
        assert err.value.latency_ms > 0

    def test_memory_budget_respected(self):
        checkpoint = _checkpoint()
        predictor = _monotone_predictor()
        _, mem_all = predictor.predict(np.asarray(LAYOUT.widths))
        scenario = EdgeScenario(task=HAS0, memory_budget_bytes=int(mem_all * 0.8))
        result = search(scenario, checkpoint, predictor)
        assert result.predicted_memory_bytes <= scenario.memory_budget_bytes
        failing = [t for t in result.trace if t.verdict == "fail"]
        assert len(failing) == 1  # stopped at the first violation

    def test_deterministic(self):
        checkpoint = _checkpoint()
        predictor = _monotone_predictor()
        scenario = EdgeScenario(task=HAS0, latency_budget_ms=5.0)
        a = search(scenario, checkpoint, predictor)
        b = search(scenario, checkpoint, predictor)
        assert a.gates == b.gates and a.limit == b.limit
        assert [t.format_line() for t in a.trace] == [t.format_line() for t in b.trace]

    def test_layout_mismatch_rejected(self):
        checkpoint = _checkpoint()
        predictor = _monotone_predictor()
        object.__setattr__(predictor, "layout_hash", "deadbeef")
        with pytest.raises(ValueError, match="layout"):
            search(EdgeScenario(task=HAS0, latency_budget_ms=5.0), checkpoint, predictor)

    def test_sweep_grid(self):
        grid = SearchConfig(start_limit=0.01, step=0.01, max_limit=1.0).sweep()
        assert len(grid) == 100
        assert grid[0] == pytest.approx(0.01)
        assert grid[-1] == pytest.approx(1.0)
        coarse = SearchConfig(start_limit=0.05, step=0.1, max_limit=0.3).sweep()
        assert coarse == pytest.approx([0.05, 0.15, 0.25])


class TestGenerateModel:
    def test_artifact_provenance_and_budget(self):
        checkpoint = _checkpoint()
        predictor = _monotone_predictor()
        lat_all, _ = predictor.predict(np.asarray(LAYOUT.widths))
        scenario = EdgeScenario(task=HAS0, latency_budget_ms=float(lat_all * 0.7))
        artifact, result = generate_model(scenario, checkpoint, predictor, checkpoint_id="c0ffee")
        prov = artifact.provenance
        assert prov["task"] == HAS0.canonical()
        assert prov["checkpoint_hash"] == "c0ffee"
        assert prov["limit"] == result.limit
        assert prov["predicted_latency_ms"] <= scenario.latency_budget_ms
        assert prov["search_rounds"] == result.rounds
        assert prov["generation_seconds"] > 0
        expected_bits = {
            lid: "".join(str(int(b)) for b in result.gates.vectors[lid]) for lid in LAYOUT.layer_ids
        }
        assert prov["gates"] == expected_bits
        # the artifact is runnable without gates
        import torch

        model = artifact.build_module()
        out = model(torch.randn(2, 1, 56, 56))
        assert out.shape == (2, 2)
