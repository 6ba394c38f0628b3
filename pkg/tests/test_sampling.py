import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twophase import data as D
from twophase import sampling as S
from twophase.data import ClassDistribution
from twophase.sampling import (CAP, TIER_MULTIPLIER, UNDERSAMPLE, UNTOUCHED, PlanError, RosTierTable, RusRule,
                               apply_plan, compose, identity_plan, plan_ros, plan_rus, regime_plan)


@pytest.fixture(scope="module")
def ss9():
    return D.ss9_distribution("train")


@pytest.mark.parametrize("name,target,rule", [
    ("aardvark", 880, TIER_MULTIPLIER), ("cheetah", 3760, TIER_MULTIPLIER),
    ("hippopotamus", 3648, TIER_MULTIPLIER), ("topi", 4816, TIER_MULTIPLIER),
    ("hyenaSpotted", 5000, CAP), ("wildebeest", 48377, UNTOUCHED), ("rodents", 10, TIER_MULTIPLIER),
])
def test_ros_examples(ss9, name, target, rule):
    e = plan_ros(ss9)[name]
    assert (e.target, e.rule) == (target, rule)


def test_ros_and_rus_totals(ss9):
    assert plan_ros(ss9).target_total() == 231437
    assert plan_rus(ss9).target_total() == 85029
    assert plan_ros(ss9).original_total() == 155254


def test_rus_examples(ss9):
    plan = plan_rus(ss9, RusRule(15000))
    assert (plan["wildebeest"].target, plan["wildebeest"].rule) == (15000, UNDERSAMPLE)
    assert (plan["elephant"].target, plan["elephant"].rule) == (4761, UNTOUCHED)
    assert plan_rus(ss9, RusRule(math.inf)).is_identity()


def test_composed_regimes(ss9):
    p3 = regime_plan("ros_rus_15k", ss9)
    assert p3.target_total() == 161212
    assert abs(p3.target_total() - p3.original_total() - 6000) < 500
    p4 = regime_plan("ros_rus_5k", ss9)
    assert max(p4.targets().values()) <= 5000
    assert p4.target_total() == 131212
    ident = identity_plan(ss9)
    assert compose(ident, ident).is_identity()


def test_compose_rejects_overlap():
    dist = ClassDistribution({"a": 20, "b": 20000})
    ros = plan_ros(dist)
    rus = plan_rus(dist, RusRule(10))
    with pytest.raises(PlanError, match="both plans"):
        compose(ros, rus)


def test_tier_boundaries_half_open():
    table = RosTierTable()
    assert table.tier_for(99).multiplier == 10 and table.tier_for(100).multiplier == 8
    assert table.tier_for(499).multiplier == 8 and table.tier_for(500).multiplier == 6
    assert table.tier_for(999).multiplier == 6 and table.tier_for(1000).multiplier == 4
    assert plan_ros(ClassDistribution({"x": 5000}))["x"].rule == UNTOUCHED


def test_tier_table_validation():
    with pytest.raises(ValueError):
        RosTierTable((S.Tier(1, 100, 10), S.Tier(200, 5000, 4)))
    with pytest.raises(ValueError):
        RusRule(0)


def test_ros_monotone_brute_force():
    # Targets are non-decreasing inside each tier. Stepping into a lower-multiplier
    # tier lowers the target (99 -> 990, 100 -> 800), so drops occur only at the
    # tier boundaries of the default table.
    counts = range(1, 6001)
    targets = [plan_ros(ClassDistribution({"x": n}))["x"].target for n in counts]
    drops = [n + 1 for n, a, b in zip(counts, targets, targets[1:]) if b < a]
    assert drops == [100, 500, 1000]
    assert (targets[98], targets[99]) == (990, 800)
    assert all(t >= n for n, t in zip(counts, targets))
    assert max(targets[:4999]) == 5000


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 60000), min_size=1, max_size=20), st.integers(1, 60000))
def test_rus_never_increases_ros_never_decreases(counts, threshold):
    dist = ClassDistribution({f"c{i}": n for i, n in enumerate(counts)})
    for e in plan_rus(dist, RusRule(threshold)).entries:
        assert e.target <= e.original and e.target == min(e.original, threshold)
        assert e.target >= 1 or e.original == 0
    for e in plan_ros(dist).entries:
        assert e.target >= e.original
        if e.original >= 1:
            assert e.target >= 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 3000), min_size=1, max_size=8), st.integers(0, 2**32 - 1),
       st.sampled_from(["ros", "rus"]))
def test_apply_plan_exact_and_fair(counts, seed, kind):
    dist = ClassDistribution({f"c{i}": n for i, n in enumerate(counts)})
    manifest = D.manifest_from_distribution(dist)
    plan = plan_ros(dist) if kind == "ros" else plan_rus(dist, RusRule(40))
    out = apply_plan(manifest, plan, seed)
    assert out.distribution().counts == plan.targets()
    assert len(set(out.ids)) == len(out)
    base_ids = [i.split("#dup")[0] for i in out.ids]
    for ci, e in enumerate(plan.entries):
        if e.target > e.original and e.original:
            mult = np.unique([b for b, lab in zip(base_ids, out.labels) if lab == ci], return_counts=True)[1]
            assert len(mult) == e.original
            assert mult.max() - mult.min() <= 1
        if e.target < e.original:
            picked = [b for b, lab in zip(base_ids, out.labels) if lab == ci]
            assert len(set(picked)) == len(picked) == e.target


def test_apply_plan_on_fixture_totals(ss9):
    manifest = D.manifest_from_distribution(ss9)
    assert len(apply_plan(manifest, plan_rus(ss9), 0)) == 85029
    assert len(apply_plan(manifest, plan_ros(ss9), 0)) == 231437


def test_rodents_single_sample_duplicated_ten_times():
    dist = ClassDistribution({"rodents": 1, "zebra": 20000})
    out = apply_plan(D.manifest_from_distribution(dist), plan_ros(dist), 3)
    rod = [i for i, lab in zip(out.ids, out.labels) if lab == 0]
    assert len(rod) == 10 and {i.split("#dup")[0] for i in rod} == {"srodents-0"}


def test_apply_plan_deterministic_and_errors():
    dist = ClassDistribution({"a": 7, "b": 300})
    m = D.manifest_from_distribution(dist)
    plan = plan_rus(dist, RusRule(50))
    assert apply_plan(m, plan, 1).ids == apply_plan(m, plan, 1).ids
    assert apply_plan(m, plan, 1).ids != apply_plan(m, plan, 2).ids
    bad = S.ResamplePlan([S.PlanEntry("a", 0, 5, TIER_MULTIPLIER, 10), S.PlanEntry("b", 300, 300, UNTOUCHED)])
    with pytest.raises(PlanError):
        apply_plan(D.manifest_from_distribution(ClassDistribution({"a": 0, "b": 300})), bad, 0)


def test_replanning_balanced_output_under_rus_is_identity(ss9):
    plan = plan_rus(ss9)
    out = apply_plan(D.manifest_from_distribution(ss9), plan, 0)
    assert plan_rus(out.distribution()).is_identity()


def test_regime_names_and_unknown(ss9):
    for r in S.REGIMES:
        regime_plan(r, ss9)
    assert regime_plan("baseline", ss9).is_identity()
    with pytest.raises(PlanError):
        regime_plan("smote", ss9)


def test_plan_json_round_trip(tmp_path, ss9):
    plan = regime_plan("ros_rus_15k", ss9)
    path = plan.save(tmp_path / "plan.json")
    raw = json.loads(path.read_text())
    assert raw["regime"] == "ros_rus_15k"
    back = S.load_plan(path)
    assert back.targets() == plan.targets()
    assert [e.rule for e in back.entries] == [e.rule for e in plan.entries]


def test_custom_tiers_parse_and_scale():
    table = RosTierTable.parse("1:10:5,10:50:2", cap=60, exempt=50)
    assert table.tier_for(9).multiplier == 5 and table.tier_for(10).multiplier == 2
    assert plan_ros(ClassDistribution({"x": 9}), table)["x"].target == 45
    assert plan_ros(ClassDistribution({"x": 40}), table)["x"].target == 60
    small = RosTierTable().scaled(500)
    assert small.cap == 500 and small.exempt == 500
