import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from exitembed.encoder import EncoderConfig, init_encoder
from exitembed.exit_oracle import exit_histogram, label_array
from exitembed.healing import (
    HealConfig,
    HealingDivergence,
    PerExitSuiteStack,
    ProgressiveLoRAHealer,
    alignment_by_exit,
    gradient_check,
    heal,
    lower_median,
    make_schedule,
    verify_prefix_reuse,
    write_heal_csvs,
)


@pytest.fixture(scope="module")
def healed(stack, corpus, labels):
    sched = make_schedule(exit_histogram(labels), stack.num_layers)
    return heal(stack, corpus, labels, sched, HealConfig(epochs=20))


def test_schedule_frozen_example():
    sched = make_schedule({2: 3, 4: 1, 9: 2}, 12)
    assert sched.pivot == 2
    assert sched.steps == [
        (1, (1,)), (2, (2,)), (4, (3, 4)), (8, (5, 6, 7, 8)), (12, (9, 10, 11, 12)),
    ]
    assert sched.exits == [1, 2, 4, 8, 12]


def test_lower_median():
    assert lower_median({3: 1, 7: 1}) == 3
    assert lower_median({5: 4}) == 5
    assert lower_median({1: 1, 2: 1, 9: 1}) == 2
    with pytest.raises(ValueError):
        lower_median({})


@given(st.dictionaries(st.integers(1, 12), st.integers(1, 20), min_size=1), st.integers(12, 24))
def test_schedule_covers_every_layer_once(hist, L):
    sched = make_schedule(hist, L)
    layers = [i for _, w in sched.steps for i in w]
    assert layers == list(range(1, L + 1))
    for e, w in sched.steps:
        assert e == w[-1] and list(w) == list(range(w[0], w[-1] + 1))
    sizes = [len(w) for e, w in sched.steps if e > sched.pivot]
    assert all(b <= 2 * a for a, b in zip(sizes, sizes[1:]))


def test_heal_leaves_base_weights_and_input_untouched(stack, healed):
    new, report = healed
    assert new.weights_equal(stack, include_lora=False)
    assert not new.weights_equal(stack)
    assert stack.weights_equal(init_encoder())
    assert not report.noop


def test_loss_curves_non_increasing(healed):
    _, report = healed
    for curve in report.loss_curves.values():
        assert all(b <= a + 1e-4 for a, b in zip(curve, curve[1:]))
        assert curve[-1] < curve[0]


def test_pool_falls_back_when_bucket_is_small(stack, corpus, labels, healed):
    _, report = healed
    y = label_array(labels)
    for e, size in report.pool_sizes.items():
        n = int(np.sum(y == e))
        assert size == (n if n >= 8 else len(corpus))


def test_alignment_improves_at_early_exits(healed):
    _, report = healed
    for e in (1, 2, 3):
        assert report.post_alignment[e] > report.pre_alignment[e]


def test_prefix_reuse_after_heal_and_negative_control(stack, healed):
    new, _ = healed
    ok = verify_prefix_reuse(new, n_inputs=20)
    assert ok.passed and ok.checked == 20 * (stack.num_layers - 1)
    bad = verify_prefix_reuse(PerExitSuiteStack(stack), n_inputs=20)
    assert not bad.passed and bad.mismatched_layers


def test_gradient_check(stack, corpus):
    errs = gradient_check(stack, corpus.raw["A"][:16], stack.fine_embed("A", corpus.raw["A"][:16]), (4, 5, 6))
    assert len(errs) == 10 and max(errs) < 1e-3


def test_zero_rank_and_zero_epochs_are_noops(corpus, labels):
    s = init_encoder(EncoderConfig(lora_rank=0))
    sched = make_schedule(exit_histogram(labels), s.num_layers)
    new, report = heal(s, corpus, labels, sched)
    assert report.noop and new.weights_equal(s)
    s2 = init_encoder()
    new, report = heal(s2, corpus, labels, sched, HealConfig(epochs=0))
    assert report.noop and new.weights_equal(s2)


def test_divergence_is_raised(stack, corpus, labels):
    sched = make_schedule(exit_histogram(labels), stack.num_layers)
    with pytest.raises(HealingDivergence):
        heal(stack, corpus, labels, sched, HealConfig(epochs=10, learning_rate=1e4))


def test_alignment_last_exit_is_one_for_own_targets(stack, corpus):
    raw = corpus.raw["A"][:10]
    al = alignment_by_exit(stack, "A", raw, stack.fine_embed("A", raw))
    assert al[stack.num_layers] == pytest.approx(1.0, abs=1e-6)
    assert set(al) == set(range(1, stack.num_layers + 1))


def test_estimator_wrapper(stack, corpus, labels):
    est = ProgressiveLoRAHealer(stack, epochs=3)
    assert clone(est).get_params()["epochs"] == 3
    est.fit(corpus.raw["A"], label_array(labels))
    assert est.stack_.weights_equal(stack, include_lora=False)
    assert est.schedule_.exits[-1] == stack.num_layers
    with pytest.raises(ValueError):
        ProgressiveLoRAHealer(None).fit(corpus.raw["A"], label_array(labels))


def test_csv_writers(tmp_path, healed):
    _, report = healed
    write_heal_csvs(report, tmp_path / "a.csv", tmp_path / "l.csv", echo="cfg")
    a = (tmp_path / "a.csv").read_text().splitlines()
    assert a[0] == "# config: cfg" and a[1] == "exit,pre_cosine,post_cosine" and len(a) == 2 + 12
    rows = (tmp_path / "l.csv").read_text().splitlines()[2:]
    assert len(rows) == sum(len(c) for c in report.loss_curves.values())
