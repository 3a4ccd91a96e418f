from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from shufflesim.core import OperatorKind
from shufflesim.sim.workload import (
    Shape,
    WorkloadParams,
    generate_workload,
    skewed_matrix,
    split_even,
    two_stage_job,
    uniform_matrix,
)


@given(st.integers(0, 10**9), st.integers(1, 500))
def test_split_even(total, n):
    parts = split_even(total, n)
    assert sum(parts) == total and len(parts) == n
    assert max(parts) - min(parts) <= 1


def test_uniform_matrix_totals():
    m = uniform_matrix(7, 5, 1001)
    assert sum(map(sum, m)) == 1001 and all(len(r) == 5 for r in m)


def test_skewed_matrix_hot_share():
    m = skewed_matrix(20, 20, 40_000, 0.9)
    hot = sum(r[0] for r in m)
    assert hot == 36_000 and sum(map(sum, m)) == 40_000


def test_two_stage_job_shape():
    job = two_stage_job("j", [[4, 6], [10, 0]], shuffle_ratio=2.0, barrier=True)
    w, r = job.stages
    assert w.task_input_bytes == (5, 5)
    assert r.task_input_bytes == (14, 6)
    assert r.barrier_input and r.operator_kind is OperatorKind.SORT
    with pytest.raises(ValueError):
        two_stage_job("j", [[1]], shuffle_ratio=0)


def test_mixed_large_small_rounds():
    jobs = generate_workload(WorkloadParams(Shape.MIXED_LARGE_SMALL, rounds=2))
    assert [j.shape for j in jobs] == ["large", "small", "small"] * 2
    assert [j.priority for j in jobs[:3]] == [1, 0, 0]


@pytest.mark.parametrize("shape", list(Shape))
def test_every_shape_conserves_bytes(shape):
    params = WorkloadParams(shape, writers=8, readers=4, total_bytes=8000, jobs=2)
    for job in generate_workload(params, scale=0.5):
        if job.shape == "small":
            continue
        rows = job.stages[0].output_bytes
        assert sum(map(sum, rows)) == 4000


def test_bad_params():
    with pytest.raises(ValueError):
        WorkloadParams(writers=0)
    with pytest.raises(ValueError):
        generate_workload(WorkloadParams(), scale=0)
