import numpy as np
import pytest
from hypothesis import given, strategies as st

from safelang.constraints import load_corpus, make_condenser
from safelang.costpred import (
    ConfusionCounts, CostPredictorConfig, SemanticCostPredictor, collect_eval_steps,
    constant_predictor, evaluate_steps, f1_score, metrics, metrics_csv, oracle_predictor,
    predict_cost,
)
from safelang.embedding import LocalEmbedder, finetune
from safelang.gridworld import Event, GridConfig


def _vec(cos):
    return np.array([1.0, 0.0]), np.array([cos, np.sqrt(1 - cos * cos)])


@pytest.mark.parametrize("cos,expected", [(0.9, 1), (0.41, 1), (0.4, 0), (0.1, 0), (-0.5, 0)])
def test_predict_cost_threshold_is_strict(cos, expected):
    assert predict_cost(*_vec(cos), CostPredictorConfig(0.4)) == expected


def test_threshold_range_validated():
    for bad in (1.5, -1.01, float("nan")):
        with pytest.raises(ValueError):
            CostPredictorConfig(bad)


def test_metrics_examples():
    assert f1_score(0.898, 0.980) == pytest.approx(0.937, abs=1e-3)
    p, r, f = metrics(ConfusionCounts(tp=490, fp=56, fn=10, tn=1000))
    assert p == pytest.approx(0.8974, abs=1e-4) and r == pytest.approx(0.98)
    assert f == pytest.approx(0.937, abs=1e-3)
    assert metrics(ConfusionCounts(tp=0, fp=0, fn=5, tn=10)) == (None, 0.0, None)
    assert metrics(ConfusionCounts(tp=0, fp=3, fn=0, tn=10)) == (0.0, None, None)
    assert metrics(ConfusionCounts(tp=4, fp=0, fn=0, tn=1)) == (1.0, 1.0, 1.0)
    assert metrics(ConfusionCounts(tp=0, fp=2, fn=3, tn=1))[2] == 0.0


def test_confusion_counts_record_and_add():
    c = ConfusionCounts()
    for pred, act in [(1, 1), (1, 0), (0, 1), (0, 0), (0, 0)]:
        c = c.record(pred, act)
    assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 2)
    assert (c + c).total == 10
    with pytest.raises(ValueError):
        ConfusionCounts(tp=-1)


@given(st.integers(0, 200), st.integers(0, 200), st.integers(0, 200))
def test_f1_between_precision_and_recall(tp, fp, fn):
    p, r, f = metrics(ConfusionCounts(tp, fp, fn, 0))
    if f is not None and p + r > 0:
        assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12


@pytest.fixture(scope="module")
def corpus():
    return load_corpus()


@pytest.fixture(scope="module")
def steps(corpus):
    return collect_eval_steps(GridConfig(12, 12, max_steps=300), corpus, episodes=12, seed=0)


@pytest.fixture(scope="module")
def tuned(corpus):
    return finetune(LocalEmbedder.create(seed=0), corpus, seed=0)[0]


def test_oracle_and_constant_predictors(steps):
    assert any(cost for _, _, cost in steps)
    c = evaluate_steps(oracle_predictor, steps)
    assert c.fp == 0 and c.fn == 0 and c.tp > 0
    zero = evaluate_steps(constant_predictor(0), steps)
    assert metrics(zero)[1] == 0.0 and metrics(zero)[0] is None


def test_eval_steps_are_seeded(corpus):
    cfg = GridConfig(8, 8, max_steps=50)
    a = collect_eval_steps(cfg, corpus, episodes=3, seed=4)
    b = collect_eval_steps(cfg, corpus, episodes=3, seed=4)
    assert [(c.id, e, y) for c, e, y in a] == [(c.id, e, y) for c, e, y in b]


def test_predictor_only_fires_on_the_prohibited_hazard(corpus, tuned):
    pred = SemanticCostPredictor(tuned, make_condenser("rule"))
    lava = next(c for c in corpus if c.prohibited == "lava")
    assert pred(lava, Event.ENTERED_LAVA) == 1
    assert pred(lava, Event.ENTERED_WATER) == 0
    assert pred(lava, Event.MOVED) == 0


def test_finetuned_beats_untuned(steps, tuned):
    cond = make_condenser("rule")
    f_tuned = metrics(evaluate_steps(SemanticCostPredictor(tuned, cond), steps))[2]
    f_raw = metrics(evaluate_steps(SemanticCostPredictor(LocalEmbedder.create(seed=0), cond), steps))[2]
    assert f_tuned is not None and f_tuned > (f_raw or 0.0)


def test_recall_non_increasing_in_threshold(steps, tuned):
    cond = make_condenser("rule")
    recalls = []
    for t in (-0.99, -0.5, 0.0, 0.2, 0.4, 0.6, 0.8, 0.99):
        c = evaluate_steps(SemanticCostPredictor(tuned, cond, CostPredictorConfig(t)), steps)
        recalls.append(metrics(c)[1])
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))
    assert recalls[0] == 1.0


def test_prediction_does_not_mutate_backend(corpus, steps, tuned):
    before = tuned.params.copy()
    evaluate_steps(SemanticCostPredictor(tuned, make_condenser("rule")), steps[:200])
    np.testing.assert_array_equal(tuned.params, before)


def test_metrics_csv_format():
    text = metrics_csv([("r1", "tuned", ConfusionCounts(2, 1, 0, 5)),
                        ("r1", "untuned", ConfusionCounts(0, 0, 2, 6))], "abc")
    lines = text.splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1] == "run_id,arm,tp,fp,fn,tn,precision,recall,f1"
    assert lines[2].startswith("r1,tuned,2,1,0,5,0.666")
    assert lines[3] == "r1,untuned,0,0,2,6,,0.0,"
