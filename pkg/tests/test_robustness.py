import math

import numpy as np
import pytest

from privatree.mechanisms import RandomStream
from privatree.preprocess import Dataset
from privatree.robustness import (PoisonGuaranteeQuery, RobustnessReport,
                                  TriggerSpec, accuracy_lower_bound,
                                  asr_upper_bound, attack_cost_lower_bound,
                                  attack_success_rate, poison_backdoor,
                                  run_poisoning_campaign)
from privatree.tree import (Internal, Leaf, ModelParams, NumericalSplit, TreeModel,
                            trainer_params_for)

from conftest import make_backdoor_fixture, make_separable


def _query(eps, x, clean):
    return PoisonGuaranteeQuery(eps, x, clean)


# --- bounds ---------------------------------------------------------------------

def test_accuracy_bound_x_zero_is_identity():
    assert accuracy_lower_bound(_query(0.1, 0, 0.83)) == 0.83
    assert accuracy_lower_bound(_query(math.inf, 0, 0.83)) == 0.83


def test_accuracy_bound_diabetes_row():
    # clean accuracy .568 at eps = .01 with 57 poisoned rows (0.1% of the
    # 5-fold train split of 71,090 rows) -> .324 within .005
    bound = accuracy_lower_bound(_query(0.01, 57, 0.568))
    assert abs(bound - 0.324) <= 0.005


def test_accuracy_bound_direct_value():
    assert accuracy_lower_bound(_query(0.1, 10, 1.0)) == pytest.approx(math.exp(-1.0))


def test_asr_bound_x_zero_is_identity():
    assert asr_upper_bound(_query(0.5, 0, 0.07)) == 0.07


def test_asr_bound_direct_value():
    assert asr_upper_bound(_query(0.01, 100, 0.0)) == pytest.approx(1 - math.exp(-1.0))


def test_asr_bound_tighter_at_smaller_epsilon():
    for x in (10, 100, 1000):
        assert asr_upper_bound(_query(0.01, x, 0.05)) < asr_upper_bound(_query(0.1, x, 0.05))


def test_bounds_monotone_in_x_and_clipped():
    acc = [accuracy_lower_bound(_query(0.05, x, 0.9)) for x in range(0, 200, 10)]
    assert all(b <= a for a, b in zip(acc, acc[1:]))
    assert all(0.0 <= v <= 1.0 for v in acc)
    asr = [asr_upper_bound(_query(0.05, x, 0.1)) for x in range(0, 200, 10)]
    assert all(b >= a for a, b in zip(asr, asr[1:]))
    assert all(0.0 <= v <= 1.0 for v in asr)


def test_query_validation():
    with pytest.raises(ValueError):
        _query(0.0, 1, 0.5)
    with pytest.raises(ValueError):
        _query(1.0, -1, 0.5)
    with pytest.raises(ValueError):
        _query(1.0, 1, 1.5)


def test_general_cost_bound_both_branches():
    assert attack_cost_lower_bound(0.6, 0, 0.1) == 0.6
    assert attack_cost_lower_bound(0.6, 5, 0.1) == pytest.approx(0.6 * math.exp(-0.5))
    # non-positive costs contract the other way
    assert attack_cost_lower_bound(-0.6, 5, 0.1, cost_is_nonpositive=True) == \
        pytest.approx(-0.6 * math.exp(0.5))
    with pytest.raises(ValueError):
        attack_cost_lower_bound(0.6, 5, 0.1, cost_is_nonpositive=True)
    with pytest.raises(ValueError):
        attack_cost_lower_bound(-0.6, 5, 0.1)


# --- trigger / poisoning -----------------------------------------------------------

def test_trigger_validation(backdoor_dataset):
    schema = backdoor_dataset.schema
    trig = TriggerSpec({schema.n_features - 1: 1.0}, 0, 1)
    trig.validate_against(schema)
    with pytest.raises(ValueError):
        TriggerSpec({}, 0, 1)
    with pytest.raises(ValueError):
        TriggerSpec({0: 0.5}, 1, 1)
    with pytest.raises(ValueError):
        TriggerSpec({0: 5.0}, 0, 1).validate_against(schema)  # outside range
    with pytest.raises(ValueError):
        TriggerSpec({99: 0.5}, 0, 1).validate_against(schema)
    with pytest.raises(ValueError):
        TriggerSpec({0: 0.5}, 0, 9).validate_against(schema)


def test_poison_x_zero_returns_dataset_unchanged(backdoor_dataset):
    trig = TriggerSpec({backdoor_dataset.schema.n_features - 1: 1.0}, 0, 1)
    out = poison_backdoor(backdoor_dataset, trig, 0, RandomStream(0))
    assert out is backdoor_dataset


def test_poison_appends_trigger_stamped_target_rows(backdoor_dataset):
    j = backdoor_dataset.schema.n_features - 1
    trig = TriggerSpec({j: 1.0}, 0, 1)
    out = poison_backdoor(backdoor_dataset, trig, 25, RandomStream(1))
    assert out.n == backdoor_dataset.n + 25
    assert np.array_equal(out.rows[:backdoor_dataset.n], backdoor_dataset.rows)
    appended_rows = out.rows[backdoor_dataset.n:]
    appended_labels = out.labels[backdoor_dataset.n:]
    assert np.all(appended_rows[:, j] == 1.0)
    assert np.all(appended_labels == 1)
    assert isinstance(out, Dataset)  # constructor re-validated the invariants


def test_poison_requires_source_rows():
    ds = make_separable(n=40, seed=1)
    all_pos = Dataset(ds.schema, ds.rows, np.ones(ds.n, dtype=np.int64))
    trig = TriggerSpec({0: 1.0}, 0, 1)
    with pytest.raises(ValueError, match="source class"):
        poison_backdoor(all_pos, trig, 3, RandomStream(0))


def test_poison_deterministic(backdoor_dataset):
    trig = TriggerSpec({backdoor_dataset.schema.n_features - 1: 1.0}, 0, 1)
    a = poison_backdoor(backdoor_dataset, trig, 10, RandomStream(5))
    b = poison_backdoor(backdoor_dataset, trig, 10, RandomStream(5))
    assert np.array_equal(a.rows, b.rows)


# --- attack success rate ------------------------------------------------------------

def _constant_model(class_index):
    return TreeModel(Leaf(class_index), ModelParams(1.0, 0, 0.01, 0), "h", {})


def test_asr_constant_models(backdoor_dataset):
    trig = TriggerSpec({backdoor_dataset.schema.n_features - 1: 1.0}, 0, 1)
    assert attack_success_rate(_constant_model(1), backdoor_dataset, trig) == 1.0
    assert attack_success_rate(_constant_model(0), backdoor_dataset, trig) == 0.0


def test_asr_tree_splitting_on_trigger_feature(backdoor_dataset):
    j = backdoor_dataset.schema.n_features - 1
    trig = TriggerSpec({j: 1.0}, 0, 1)
    root = Internal(NumericalSplit(j, 0.5), Leaf(0), Leaf(1))
    model = TreeModel(root, ModelParams(1.0, 1, 0.01, 0), "h", {})
    assert attack_success_rate(model, backdoor_dataset, trig) == 1.0


def test_asr_requires_source_rows():
    ds = make_separable(n=20, seed=0)
    all_pos = Dataset(ds.schema, ds.rows, np.ones(ds.n, dtype=np.int64))
    with pytest.raises(ValueError, match="source class"):
        attack_success_rate(_constant_model(1), all_pos, TriggerSpec({0: 1.0}, 0, 1))


# --- campaign ------------------------------------------------------------------------

def _small_fixture():
    return make_backdoor_fixture(n=300, n_informative=3, seed=4)


def test_campaign_x_zero_only_echoes_clean_estimate():
    ds = _small_fixture()
    trig = TriggerSpec({3: 1.0}, 0, 1)
    params = trainer_params_for(ds, 0.5, 2)
    report = run_poisoning_campaign(ds, params, trig, [0], n_trials=5, seed=1)
    assert report.n_trials == 5
    assert len(report.empirical_curve) == 1
    x, mean, stderr = report.empirical_curve[0]
    assert x == 0
    assert mean == report.clean_metric_mean
    assert stderr == report.clean_metric_stderr
    assert report.guarantee_curve == [(0, pytest.approx(report.clean_metric_mean))]


def test_campaign_guarantee_monotonicity():
    ds = _small_fixture()
    params = trainer_params_for(ds, 0.5, 2)
    asr_report = run_poisoning_campaign(ds, params, TriggerSpec({3: 1.0}, 0, 1),
                                        [0, 2, 5, 9], n_trials=3, seed=2)
    bounds = [b for _, b in asr_report.guarantee_curve]
    assert all(b2 >= b1 for b1, b2 in zip(bounds, bounds[1:]))
    acc_report = run_poisoning_campaign(ds, params, None, [0, 2, 5, 9],
                                        n_trials=3, seed=2)
    bounds = [b for _, b in acc_report.guarantee_curve]
    assert all(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:]))
    assert acc_report.empirical_curve is None
    assert acc_report.metric == "accuracy"


def test_campaign_deterministic_and_pool_invariant():
    ds = _small_fixture()
    params = trainer_params_for(ds, 0.3, 2)
    trig = TriggerSpec({3: 1.0}, 0, 1)
    r1 = run_poisoning_campaign(ds, params, trig, [0, 3], n_trials=4, seed=7)
    r2 = run_poisoning_campaign(ds, params, trig, [0, 3], n_trials=4, seed=7)
    assert r1 == r2
    r3 = run_poisoning_campaign(ds, params, trig, [0, 3], n_trials=4, seed=7,
                                n_workers=2)
    assert r1 == r3


def test_campaign_measured_asr_respects_bound():
    ds = make_backdoor_fixture(n=600, n_informative=4, seed=6)
    trig = TriggerSpec({4: 1.0}, 0, 1)
    params = trainer_params_for(ds, 0.1, 3)
    report = run_poisoning_campaign(ds, params, trig, [0, 3, 6], n_trials=10, seed=3)
    bound = dict(report.guarantee_curve)
    for x, mean, stderr in report.empirical_curve:
        assert mean <= bound[x] + 2 * stderr + 1e-12


def test_campaign_validation():
    ds = _small_fixture()
    params = trainer_params_for(ds, 0.5, 2)
    trig = TriggerSpec({3: 1.0}, 0, 1)
    with pytest.raises(ValueError):
        run_poisoning_campaign(ds, params, trig, [0], n_trials=1, seed=0)
    with pytest.raises(ValueError):
        run_poisoning_campaign(ds, params, trig, [], n_trials=3, seed=0)
    with pytest.raises(ValueError):
        run_poisoning_campaign(ds, params, trig, [-1], n_trials=3, seed=0)


def test_report_csv_schema():
    report = RobustnessReport(metric="asr", clean_metric_mean=0.1,
                              clean_metric_stderr=0.01,
                              guarantee_curve=[(0, 0.1), (5, 0.4)],
                              empirical_curve=[(0, 0.1, 0.01), (5, 0.12, 0.02)],
                              n_trials=4)
    text = report.to_csv_text()
    lines = text.strip().split("\n")
    assert lines[0] == "x,bound,empirical_mean,empirical_stderr"
    assert len(lines) == 3
    xs = [int(line.split(",")[0]) for line in lines[1:]]
    assert xs == sorted(xs)
    as_dict = report.to_dict()
    assert as_dict["metric"] == "asr"
    assert len(as_dict["guarantee_curve"]) == 2
