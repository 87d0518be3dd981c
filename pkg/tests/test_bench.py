from fractions import Fraction

import numpy as np
import pytest

from patchattn.annfield import SearchParams
from patchattn.bench import (COMPLEXITY, METHODS, MemoryModel, OpCounter, bench_rows, count_ops,
                             human_bytes, max_score_evaluations, model_bytes, model_flops,
                             search_rounds)
from patchattn.core import PatchView

from helpers import unique_patch_image

GiB = 2**30


def test_quoted_figures():
    assert model_bytes(MemoryModel("full", 256**2)) == 16 * GiB
    assert model_bytes(MemoryModel("full", 512**2)) == 256 * GiB
    assert model_bytes(MemoryModel("psal_k", 256**2, k=3)) == 786_432
    assert model_bytes(MemoryModel("psal_k", 512**2, k=3)) == 3_145_728
    assert human_bytes(786_432) == "786 kB"
    assert human_bytes(3_145_728) == "3.15 MB"
    assert human_bytes(16 * GiB, "iec") == "16 GiB"
    assert human_bytes(256 * GiB, "iec") == "256 GiB"


def test_other_formulas():
    n = 100
    assert model_bytes(MemoryModel("psal_aggreg", n, p=7)) == 4 * 49 * n
    assert model_bytes(MemoryModel("local", n, w=50)) == 4 * 2500 * n
    assert model_bytes(MemoryModel("full", 1)) == 4
    assert model_bytes(MemoryModel("psal_k", 1, k=1)) == 4


@pytest.mark.parametrize("n", [4, 1000, 512**2])
def test_quadratic_to_linear_ratio(n):
    ratio = Fraction(model_bytes(MemoryModel("psal_k", n, k=3)), model_bytes(MemoryModel("full", n)))
    assert ratio == Fraction(3, n)


def test_rejects_bad_parameters():
    with pytest.raises(ValueError):
        MemoryModel("psal_k", 10, k=0)
    with pytest.raises(ValueError):
        MemoryModel("reformer", 10)


def test_human_bytes():
    assert human_bytes(4) == "4 B"
    assert human_bytes(1023, "iec") == "1023 B"
    assert human_bytes(1024, "iec") == "1 KiB"
    assert human_bytes(1500) == "1.5 kB"


def test_search_rounds():
    assert search_rounds(1) == 1
    assert search_rounds(2) == 2
    assert search_rounds(64) == 7
    assert search_rounds(63) == 6
    assert search_rounds(27, decay=1 / 3) == 4


def test_flops_model():
    assert model_flops(MemoryModel("full", 100, d=10)) == 2 * 10 * 100 * 100
    assert model_flops(MemoryModel("psal_k", 64, k=2, d=10), n_iter=1) == \
        2 * 10 * max_score_evaluations(64, 2, 1, 8)


def test_rows_layout():
    rows = bench_rows([256, 512])
    assert len(rows) == 2 * len(METHODS)
    full256 = next(r for r in rows if r[0] == "full" and r[1] == 256**2)
    assert full256[2:] == (16 * GiB, "17.2 GB", "16 GiB", COMPLEXITY["full"])
    psal512 = next(r for r in rows if r[0] == "psal_k" and r[1] == 512**2)
    assert psal512[3] == "3.15 MB"


def test_counter_init_only():
    X, Y = unique_patch_image(16, 0), unique_patch_image(12, 1)
    c = count_ops(PatchView(X, 3), PatchView(Y, 3), SearchParams(n_iter=0, k=3))
    assert c.score_evaluations == 3 * 256
    assert c.peak_entries == 3 * 256


def test_counter_bounds():
    X, Y = unique_patch_image(20, 2), unique_patch_image(20, 3)
    params = SearchParams(n_iter=3, k=2)
    c = count_ops(PatchView(X, 3), PatchView(Y, 3), params)
    assert c.peak_entries == 2 * 400
    assert 2 * 400 < c.score_evaluations <= max_score_evaluations(400, 2, 3, 20)


def test_counter_merge():
    a, b = OpCounter(), OpCounter()
    a.add(5)
    a.observe_entries(10)
    b.add(2)
    b.observe_entries(30)
    b.observe_entries(3)
    assert a.merge(b) == OpCounter(7, 30)
