import json
import math
import statistics
import threading

import numpy as np
import pytest
import torch

from conftest import linear_problem
from freqpure.attack import MODES, AttackConfig
from freqpure.bench import (CLEAN_METRICS, METRICS, AttackCache, CellResult, Components, EvalPlan, EvalReport,
                            evaluate_cell, run_sweep, select_subset)
from freqpure.diffusion import DiffusionSchedule, GaussianScore, PurifyConfig
from freqpure.exceptions import InvalidInputError

FAST_ATTACK = AttackConfig(lambda_=10.0, max_iterations=20, learning_rate=0.05)
PURIFY = PurifyConfig(t_star=0.05, dt=0.01)


@pytest.fixture
def components(linear_model):
    x, y = linear_problem(n=200, seed=7)
    return Components(linear_model, GaussianScore(), x[:60], y[:60], attack_config=FAST_ATTACK, purify_config=PURIFY,
                      model_name="linear")


def test_grid_cardinality_and_order():
    plan = EvalPlan(subset_size=4, modes=("pixel", "phase"), t_star_list=(0.05, 0.1), repeats=3)
    cells = plan.cells()
    assert len(cells) == 2 * 2 * 3
    assert cells[0] == ("pixel", 0.05, 0) and cells[-1] == ("phase", 0.1, 2)


def test_plan_validation():
    with pytest.raises(InvalidInputError, match="pixel, mag, phase, phase_mag, all"):
        EvalPlan(modes=("pxl",))
    with pytest.raises(InvalidInputError, match=r"\(0, 1\)"):
        EvalPlan(t_star_list=(0.0,))
    with pytest.raises(InvalidInputError):
        EvalPlan(repeats=4, seeds=(0, 1, 2))


def test_seed_and_subset_mapping():
    plan = EvalPlan(subset_count=2, repeats=3, seeds=(10, 20, 30))
    assert [plan.run_seed(r) for r in range(3)] == [10, 20, 30]
    assert [plan.subset_seed(r) for r in range(3)] == [10, 20, 10]


def test_subset_selection_is_pure():
    a = select_subset(100, 10, 3)
    assert np.array_equal(a, select_subset(100, 10, 3))
    assert len(set(a.tolist())) == 10 and np.all(np.diff(a) > 0)
    assert not np.array_equal(a, select_subset(100, 10, 4))
    with pytest.raises(InvalidInputError, match="exceeds"):
        select_subset(5, 10, 0)


def test_sweep_report_shape(components):
    plan = EvalPlan(subset_size=20, subset_count=2, repeats=2, modes=("pixel", "mag"), t_star_list=(0.05, 0.1),
                    seeds=(0, 1))
    report = run_sweep(plan, components)
    assert len(report.results) == 8 and not report.failed
    assert [(r.mode, r.t_star, r.repeat) for r in report.results] == [(m, float(t), r) for m, t, r in plan.cells()]
    for r in report.results:
        assert set(r.accuracies) == set(METRICS)
    header = report.render().splitlines()[0].split()
    assert header[3:] == list(METRICS)
    assert sorted(report.subsets) == [0, 1]


def test_empty_modes_gives_clean_columns_only(components):
    plan = EvalPlan(subset_size=20, subset_count=1, repeats=1, modes=(), seeds=(0,))
    report = run_sweep(plan, components)
    assert report.metrics == CLEAN_METRICS
    assert set(report.results[0].accuracies) == set(CLEAN_METRICS)
    assert report.render().splitlines()[0].split()[3:] == list(CLEAN_METRICS)


def test_summary_recomputes_from_records(components):
    plan = EvalPlan(subset_size=20, subset_count=3, repeats=3, modes=("pixel",), t_star_list=(0.05,))
    report = run_sweep(plan, components)
    lines = [json.loads(line) for line in report.to_jsonl().splitlines()]
    records = [l for l in lines if "summary" not in l]
    for row in (l["summary"] for l in lines if "summary" in l):
        runs = [r["accuracies"][row["metric"]] for r in records
                if r["mode"] == row["mode"] and r["t_star"] == row["t_star"]]
        assert row["runs"] == runs
        assert row["mean"] == math.fsum(runs) / len(runs)
        assert row["std"] == statistics.stdev(runs)


def test_summary_single_run_std_zero():
    r = CellResult("m", "pixel", 0.1, 0, 0, 0, {k: 50.0 for k in METRICS})
    row = EvalReport([r]).value("pixel", 0.1, "clean")
    assert row["std"] == 0.0 and row["mean"] == 50.0


def test_report_bytes_are_reproducible(tmp_path, components):
    plan = EvalPlan(subset_size=16, subset_count=1, repeats=2, modes=("phase",), t_star_list=(0.05,), seeds=(0, 1))
    a = run_sweep(plan, components).write(tmp_path / "a")
    b = run_sweep(plan, components, workers=2).write(tmp_path / "b")
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()
    assert "wall_clock" not in a["records"].read_text()


def test_infinite_lambda_attack_is_identity(components):
    components.attack_config = AttackConfig(lambda_=math.inf)
    plan = EvalPlan(subset_size=20, subset_count=1, repeats=1, modes=tuple(MODES), seeds=(0,))
    for r in run_sweep(plan, components).results:
        assert r.accuracies["adversarial"] == r.accuracies["clean"]
        assert r.accuracies["purified_adversarial"] == r.accuracies["purified_clean"]


def test_failed_cell_is_captured(components):
    class Broken:
        def evaluate(self, x, t):
            raise RuntimeError("score blew up")

    components.score = Broken()
    plan = EvalPlan(subset_size=8, subset_count=1, repeats=1, modes=("pixel",), seeds=(0,))
    report = run_sweep(plan, components)
    assert len(report.failed) == 1
    assert "score blew up" in report.failed[0].error
    assert "FAILED pixel" in report.render()
    assert json.loads(report.to_jsonl().splitlines()[0])["status"] == "failed"


def test_subset_independent_of_grid_position(components):
    plan_a = EvalPlan(subset_size=12, subset_count=1, repeats=1, modes=("pixel", "all"), seeds=(5,))
    plan_b = EvalPlan(subset_size=12, subset_count=1, repeats=1, modes=("all",), seeds=(5,))
    a = run_sweep(plan_a, components).results[1]
    b = run_sweep(plan_b, components).results[0]
    assert a.accuracies == b.accuracies


def test_cache_shares_attacks_across_t_star(tmp_path, components):
    cache = AttackCache(tmp_path / "cache")
    plan = EvalPlan(subset_size=12, subset_count=1, repeats=1, modes=("pixel", "mag"), t_star_list=(0.05, 0.1),
                    seeds=(0,))
    first = run_sweep(plan, components, cache=cache)
    # two attacks (one per mode) and two purified-clean evaluations (one per t*)
    assert cache.misses == 4
    again = AttackCache(tmp_path / "cache")
    second = run_sweep(plan, components, cache=again)
    assert again.misses == 0
    assert [r.accuracies for r in first.results] == [r.accuracies for r in second.results]


def test_cache_computes_each_key_once_under_threads():
    cache = AttackCache()
    calls = []

    def compute():
        calls.append(1)
        return torch.zeros(1)

    threads = [threading.Thread(target=cache.get_or_compute, args=(cache.key("k"), compute)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(calls) == 1


def test_evaluate_cell_direct(linear_model):
    x, y = linear_problem(n=100, seed=2)
    plan = EvalPlan(subset_size=10, subset_count=1, repeats=1, seeds=(0,))
    r = evaluate_cell(linear_model, GaussianScore(), DiffusionSchedule(), "pixel", 0.05, plan, 0, x=x, y=y,
                      attack_config=FAST_ATTACK, purify_config=PURIFY)
    assert r.status == "ok" and r.accuracies["adversarial"] <= r.accuracies["clean"]
    assert r.wall_clock > 0
