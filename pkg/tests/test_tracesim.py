import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitembed.tracesim import (
    DeviceProfile,
    Policy,
    TraceError,
    TraceEvent,
    compare,
    default_policies,
    default_scenario,
    draw_exits,
    load_profile,
    load_trace,
    mean_exit,
    save_profile,
    save_trace,
    simulate,
    synthetic_trace,
    write_csv,
    write_jsonl,
)

HAND = DeviceProfile(layer_compute_s=1.0, layer_load_s=2.0, layer_compute_j=1.0, layer_load_j=10.0,
                     battery_j=20.0, idle_w=0.5)


def burst(n, t=0.0):
    return [TraceEvent(t, i, "A") for i in range(n)]


def test_hand_computed_full_batch():
    # loads [2, 2], computes [3, 3]: compute ends at 5 then max(5, 4) + 3 = 8
    r = simulate("full", burst(3), HAND, num_layers=2)
    assert (r.batches, r.layer_loads, r.layer_computes) == (1, 2, 6)
    assert r.busy_seconds == 8.0 and r.end_seconds == 8.0
    assert r.total_energy_j == 6 * 1.0 + 2 * 10.0
    assert r.charges == 2  # ceil(26 / 20)
    assert r.mean_backlog == 0.0 and r.throughput == pytest.approx(3 / 8)


def test_hand_computed_pre_exit_depth():
    r = simulate("pre-exit:1", burst(3), HAND, {1: 1}, num_layers=4)
    assert (r.layer_loads, r.layer_computes) == (1, 3)
    assert r.busy_seconds == 2.0 + 3.0
    # N above the exit still costs N layers
    r2 = simulate("pre-exit:3", burst(3), HAND, {1: 1}, num_layers=4)
    assert r2.layer_computes == 9


def test_batching_and_backlog():
    trace = [TraceEvent(0.0, 0, "A"), TraceEvent(1.0, 1, "A"), TraceEvent(1.5, 2, "A")]
    r = simulate("full", trace, HAND, num_layers=1, max_batch=16)
    # batch {0} runs 0..3, then {1, 2} starts at 3 having waited 2 and 1.5
    assert r.batches == 2
    assert r.busy_seconds == 3.0 + 4.0
    assert r.mean_backlog == pytest.approx((2.0 + 1.5) / 7.0)
    r1 = simulate("full", trace, HAND, num_layers=1, max_batch=1)
    assert r1.batches == 3


def test_horizon_drops_unfinished_work():
    r = simulate("full", burst(40), HAND, num_layers=2, max_batch=4, horizon=20.0)
    assert r.embedded + r.dropped == 40 and r.dropped > 0
    assert r.end_seconds == 20.0 and r.busy_seconds <= 20.0
    with pytest.raises(ValueError):
        simulate("full", [TraceEvent(5.0, 0, "A")], HAND, horizon=1.0)


def test_idle_energy_is_separate():
    trace = [TraceEvent(0.0, 0, "A"), TraceEvent(100.0, 1, "A")]
    r = simulate("full", trace, HAND, num_layers=1)
    assert r.idle_energy_j == pytest.approx(0.5 * (r.end_seconds - r.busy_seconds))
    assert r.total_energy_j == r.compute_energy_j + r.load_energy_j


def test_quarter_depth_closed_form():
    prof = DeviceProfile(layer_load_j=0.0)
    tr = synthetic_trace(300, 2.0, seed=4)
    pre = simulate("pre-exit:2", tr, prof, {3: 1}, 12)
    full = simulate("full", tr, prof, {3: 1}, 12)
    assert pre.total_energy_j / full.total_energy_j == pytest.approx(0.25, rel=1e-9)


def test_fixed_l_equals_full():
    tr = synthetic_trace(100, 5.0, seed=2)
    dist = {2: 3, 7: 1}
    assert simulate("fixed:12", tr, DeviceProfile(), dist) == simulate("full", tr, DeviceProfile(), dist)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 60), st.floats(0.5, 20), st.integers(1, 16), st.integers(0, 1000))
def test_conservation_and_monotonicity(n, rate, max_batch, seed):
    tr = synthetic_trace(n, rate, seed)
    dist = {2: 1, 5: 2, 9: 1}
    full = simulate("full", tr, DeviceProfile(), dist, max_batch=max_batch, seed=seed)
    pre = simulate("pre-exit:1", tr, DeviceProfile(), dist, max_batch=max_batch, seed=seed)
    for r in (full, pre):
        assert r.embedded + r.dropped == n and r.dropped == 0
        assert r.layer_computes <= 12 * n
    assert pre.layer_computes <= full.layer_computes
    assert pre.compute_energy_j <= full.compute_energy_j


def test_draw_exits_matches_distribution():
    ex = draw_exits({2: 1, 6: 3}, 4000, seed=1, num_layers=12)
    assert set(np.unique(ex)) == {2, 6}
    assert np.mean(ex == 6) == pytest.approx(0.75, abs=0.03)
    assert mean_exit({2: 1, 6: 3}) == 5.0
    with pytest.raises(ValueError):
        draw_exits({13: 1}, 3, 0, 12)
    with pytest.raises(ValueError):
        draw_exits({2: 0}, 3, 0, 12)


def test_policy_parsing():
    assert Policy.parse("full") == Policy("full")
    assert Policy.parse("fixed:5").exit == 5
    assert Policy.parse("pre-exit:2").label == "pre-exit:2"
    for bad in ("fixed", "fixed:x", "early:3", "full:2"):
        with pytest.raises(ValueError):
            Policy.parse(bad)
    with pytest.raises(ValueError):
        Policy.parse("fixed:13").validate(12)
    with pytest.raises(ValueError):
        simulate("pre-exit:2", burst(2), HAND, None)


def test_default_policies_use_rounded_up_mean():
    pols = default_policies({2: 1, 5: 1}, 2, 12)
    assert [p.label for p in pols] == ["full", "fixed:4", "pre-exit:2"]
    assert default_policies({4: 1}, 2, 12)[1].exit == 4


def test_compare_ratios():
    rows = compare(["full", "fixed:6"], burst(5), HAND, None, num_layers=12)
    assert rows[0]["ratios"]["total_energy_j"] == 1.0
    assert rows[1]["ratios"]["layer_computes"] == 0.5
    with pytest.raises(ValueError):
        compare(["full"], burst(2), HAND)


def test_default_scenario_shape():
    trace, prof, pols = default_scenario({3: 1, 6: 1})
    assert len(trace) == 1000 and prof == DeviceProfile()
    assert [p.kind for p in pols] == ["full", "fixed", "pre-exit"]


def test_trace_round_trip_and_errors(tmp_path):
    tr = synthetic_trace(20, 3.0, seed=1)
    save_trace(tr, tmp_path / "t.csv", echo="cfg")
    assert load_trace(tmp_path / "t.csv") == tr
    cases = {
        "fields.csv": "0.1,1\n",
        "ts.csv": "abc,1,A\n",
        "neg.csv": "-1,1,A\n",
        "back.csv": "2.0,1,A\n1.0,2,A\n",
        "mod.csv": "1.0,1, \n",
    }
    for name, text in cases.items():
        (tmp_path / name).write_text(text)
        with pytest.raises(TraceError, match=r":\d+:"):
            load_trace(tmp_path / name)


def test_profile_round_trip_and_errors(tmp_path):
    prof = DeviceProfile(layer_load_s=0.5, battery_j=100.0)
    save_profile(prof, tmp_path / "p.txt")
    assert load_profile(tmp_path / "p.txt") == prof
    (tmp_path / "bad.txt").write_text("warp_speed=9\n")
    with pytest.raises(ValueError, match="unknown"):
        load_profile(tmp_path / "bad.txt")
    with pytest.raises(ValueError):
        DeviceProfile(layer_load_s=-1)
    with pytest.raises(ValueError):
        DeviceProfile(battery_j=0)
    assert prof.scaled_energy(2).layer_compute_j == 2 * prof.layer_compute_j


def test_writers(tmp_path):
    rows = compare(["full", "fixed:3"], burst(4), HAND, None, num_layers=6)
    write_csv(rows, tmp_path / "s.csv", echo="cfg")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "# config: cfg" and lines[1].startswith("policy,items,") and len(lines) == 4
    write_jsonl(rows, tmp_path / "s.jsonl", echo={"config": {}})
    assert len((tmp_path / "s.jsonl").read_text().splitlines()) == 3


def test_synthetic_trace_rate():
    tr = synthetic_trace(5000, 4.0, seed=3)
    assert tr[-1].timestamp / 5000 == pytest.approx(0.25, rel=0.05)
    assert all(math.isfinite(e.timestamp) for e in tr)
    with pytest.raises(ValueError):
        synthetic_trace(3, 0.0)
