import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgegen.tasks import (
    LIMIT_ENCODING_DIM,
    QUANTIFIERS,
    SUBJECTS,
    EdgeScenario,
    Quantifier,
    Subject,
    TaskDescriptor,
    TaskParseError,
    all_tasks,
    encode_limit,
    encode_task,
    enumerate_task_space,
    evaluate_predicate,
    select_covering_tasks,
    subject_matches,
)

task_strategy = st.builds(TaskDescriptor, st.sampled_from(QUANTIFIERS), st.sampled_from(SUBJECTS))
digits_strategy = st.lists(st.integers(0, 9), min_size=4, max_size=4)


def brute_force_label(task, digits):
    count = len([d for d in digits if subject_matches(task.subject, d)])
    if task.quantifier is Quantifier.HAS:
        return 1 if count >= 1 else 0
    wanted = int(task.quantifier.value.split("-")[1])
    return 1 if count == wanted else 0


class TestPredicate:
    def test_has_membership(self):
        assert evaluate_predicate(TaskDescriptor.parse("has:digit0"), [0, 3, 5, 7]) == 1

    def test_exactly_two_odd(self):
        assert evaluate_predicate(TaskDescriptor.parse("exactly-2:odd"), [1, 3, 2, 4]) == 1

    def test_exactly_three_overcount(self):
        # brute force: four 2s, so "exactly three 2s" fails
        assert brute_force_label(TaskDescriptor.parse("exactly-3:digit2"), [2, 2, 2, 2]) == 0
        assert evaluate_predicate(TaskDescriptor.parse("exactly-3:digit2"), [2, 2, 2, 2]) == 0

    @given(task_strategy, digits_strategy)
    def test_matches_brute_force(self, task, digits):
        assert evaluate_predicate(task, digits) == brute_force_label(task, digits)

    def test_rejects_bad_digits(self):
        with pytest.raises(ValueError):
            evaluate_predicate(TaskDescriptor.parse("has:digit0"), [0, 1, 2])
        with pytest.raises(ValueError):
            evaluate_predicate(TaskDescriptor.parse("has:digit0"), [0, 1, 2, 10])


class TestCanonicalForm:
    @given(task_strategy)
    def test_round_trip(self, task):
        assert TaskDescriptor.parse(task.canonical()) == task

    def test_examples(self):
        assert TaskDescriptor.parse("has:digit0").canonical() == "has:digit0"
        assert TaskDescriptor.parse("exactly-2:odd").canonical() == "exactly-2:odd"

    @pytest.mark.parametrize("bad", ["", "has", "has:", "has:digit10", "always:odd", "has:odd:extra"])
    def test_parse_errors(self, bad):
        with pytest.raises(TaskParseError):
            TaskDescriptor.parse(bad)


class TestTaskEncoding:
    def test_has_digit0_bits(self):
        bits = encode_task(TaskDescriptor.parse("has:digit0"))
        assert bits[0] == 1.0 and bits[5] == 1.0
        assert bits.sum() == 2.0

    def test_exactly2_odd_bits(self):
        bits = encode_task(TaskDescriptor.parse("exactly-2:odd"))
        assert bits[2] == 1.0  # exactly-2 quantifier slot
        assert bits[5 + 10] == 1.0  # odd subject slot

    @given(task_strategy)
    def test_two_hot(self, task):
        bits = encode_task(task)
        assert bits.shape == (17,)
        assert set(np.unique(bits)) <= {0.0, 1.0}
        assert bits.sum() == 2.0

    def test_injective_over_space(self):
        encodings = {tuple(encode_task(t)) for t in all_tasks()}
        assert len(encodings) == 60


class TestLimitEncoding:
    def test_position_zero(self):
        values = encode_limit(0.004)  # rounds to p=0
        assert np.array_equal(values[0::2], np.zeros(LIMIT_ENCODING_DIM // 2))
        assert np.array_equal(values[1::2], np.ones(LIMIT_ENCODING_DIM // 2))

    def test_formula(self):
        # independent elementwise oracle
        limit, dim = 0.37, LIMIT_ENCODING_DIM
        p = round(limit * 100)
        values = encode_limit(limit)
        for i in range(dim // 2):
            angle = p / 10000 ** (2 * i / dim)
            assert values[2 * i] == pytest.approx(np.sin(angle), abs=1e-6)
            assert values[2 * i + 1] == pytest.approx(np.cos(angle), abs=1e-6)

    def test_determinism_and_distinctness(self):
        assert np.array_equal(encode_limit(0.03), encode_limit(0.03))
        assert not np.array_equal(encode_limit(0.03), encode_limit(0.05))

    def test_injective_over_percent_positions(self):
        seen = {encode_limit(p / 100).tobytes() for p in range(1, 101)}
        assert len(seen) == 100

    @given(st.floats(min_value=0.001, max_value=1.0, allow_nan=False))
    def test_range(self, limit):
        values = encode_limit(limit)
        assert values.shape == (LIMIT_ENCODING_DIM,)
        assert np.all(values >= -1.0) and np.all(values <= 1.0)

    @pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
    def test_rejects_out_of_range(self, bad):
        with pytest.raises(ValueError):
            encode_limit(bad)


class TestTaskSpace:
    def test_full_space_size(self):
        train, unseen = enumerate_task_space(hold_out=0.0, seed=0)
        assert len(train) == 60 and len(unseen) == 0

    def test_deterministic_split(self):
        a = enumerate_task_space(hold_out=0.1, seed=7)
        b = enumerate_task_space(hold_out=0.1, seed=7)
        assert a == b
        c = enumerate_task_space(hold_out=0.1, seed=8)
        assert a != c

    @given(st.floats(min_value=0.0, max_value=0.9), st.integers(0, 1000))
    def test_partition(self, hold_out, seed):
        train, unseen = enumerate_task_space(hold_out, seed)
        assert sorted(train + unseen, key=str) == sorted(all_tasks(), key=str)
        assert not set(train) & set(unseen)
        assert len(unseen) == round(hold_out * 60)

    def test_covering_selection(self):
        train, _ = enumerate_task_space(hold_out=0.1, seed=0)
        chosen = select_covering_tasks(train, 20, seed=0)
        assert len(chosen) == 20
        assert len(set(chosen)) == 20
        assert {t.subject for t in chosen} == {t.subject for t in train}
        assert {t.quantifier for t in chosen} == {t.quantifier for t in train}
        assert chosen == select_covering_tasks(train, 20, seed=0)


class TestEdgeScenario:
    def test_requires_a_budget(self):
        with pytest.raises(ValueError):
            EdgeScenario(task=TaskDescriptor.parse("has:digit0"))

    def test_positive_budgets(self):
        task = TaskDescriptor.parse("has:digit0")
        with pytest.raises(ValueError):
            EdgeScenario(task=task, latency_budget_ms=-1.0)
        with pytest.raises(ValueError):
            EdgeScenario(task=task, memory_budget_bytes=0)
        EdgeScenario(task=task, latency_budget_ms=5.0)
        EdgeScenario(task=task, memory_budget_bytes=1 << 20)
