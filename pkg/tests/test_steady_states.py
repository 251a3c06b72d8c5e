import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayflow import elliptic
from delayflow import steady_states as ss
from delayflow.spatial import make_grid, weak_residual, dual_norm


def ids(L):
    return [b.id for b in ss.enumerate_branches(L)]


def test_census_small_lengths():
    assert ids(1.0) == ["w0", "w+1", "w-1"]
    assert ids(2.0) == ["w0", "w+1", "w-1", "n1+", "n1-"]
    assert len(ids(4.0)) == 7


def test_degenerate_length():
    with pytest.raises(ss.DegenerateLengthError):
        ss.enumerate_branches(math.pi / 2)
    with pytest.raises(ss.DegenerateLengthError):
        ss.enumerate_branches(math.pi)


@given(st.floats(0.2, 9.0).filter(lambda L: min(abs(L / n - math.pi / 2) for n in range(1, 8)) > 1e-6))
@settings(max_examples=30, deadline=None)
def test_branch_count_and_half_periods(L):
    br = ss.enumerate_branches(L)
    assert len(br) == 3 + 2 * math.floor(2 * L / math.pi)
    for b in br:
        if b.kind == "elliptic":
            assert abs(b.half_period - L / b.n) < 1e-10


def test_eval_w_values():
    b = [x for x in ss.enumerate_branches(2.0) if x.id == "n1+"][0]
    assert abs(ss.eval_w(b, 0.0) - b.a) < 1e-14
    assert abs(ss.eval_w(b, b.half_period) + b.a) < 1e-10
    h = 1e-7  # one-sided: error w'' h / 2
    assert abs((ss.eval_w(b, h) - ss.eval_w(b, 0.0)) / h) < 1e-6
    assert abs((ss.eval_w(b, 2.0) - ss.eval_w(b, 2.0 - h)) / h) < 1e-6
    neg = [x for x in ss.enumerate_branches(2.0) if x.id == "n1-"][0]
    s = np.linspace(0, 2, 9)
    assert np.array_equal(ss.eval_w(neg, s), -ss.eval_w(b, s))
    with pytest.raises(Exception):
        ss.eval_w(b, 2.5)


def test_build_field_constants():
    g = make_grid(1.0, 10)
    plus = [b for b in ss.enumerate_branches(1.0) if b.id == "w+1"][0]
    zero = [b for b in ss.enumerate_branches(1.0) if b.id == "w0"][0]
    Z = ss.build_field(plus, 0.0, g)
    assert np.allclose(Z.values.values, g.nodes) and np.allclose(Z.values.gauss(2), 0.0)
    Z5 = ss.build_field(zero, 5.0, g)
    assert np.allclose(Z5.values.values, 5.0)


def test_residual_second_order():
    b = [x for x in ss.enumerate_branches(2.0) if x.id == "n1+"][0]
    res = [ss.build_field(b, 0.0, make_grid(2.0, n)).residual for n in (50, 100, 200, 400)]
    orders = np.log2(np.array(res[:-1]) / np.array(res[1:]))
    assert np.all(orders >= 2.0), orders


def test_mechanical_energy():
    g = make_grid(2.0, 40)
    br = {b.id: b for b in ss.enumerate_branches(2.0)}
    assert abs(ss.mechanical_energy(ss.build_field(br["w+1"], 0.0, g))) < 1e-14
    assert abs(ss.mechanical_energy(ss.build_field(br["w0"], 0.3, g)) - 2.0) < 1e-14
    e = ss.mechanical_energy(ss.build_field(br["n1+"], 0.0, make_grid(2.0, 200)))
    assert 0 < e < 2.0


def test_select_constant():
    g = make_grid(1.0, 20)
    br = {b.id: b for b in ss.enumerate_branches(1.0)}
    assert abs(ss.select_constant(br["w0"], 1.0, 3.0, g).c - 3.0) < 1e-14
    assert abs(ss.select_constant(br["w+1"], 1.0, 0.5, g).c) < 1e-14
    g2 = make_grid(2.0, 100)
    n1 = [b for b in ss.enumerate_branches(2.0) if b.id == "n1+"][0]
    mu1 = lambda s: 1.0 + 0.5 * s
    Z = ss.select_constant(n1, mu1, 0.7, g2)
    assert abs(ss.inner(Z.values, mu1) - 0.7) < 1e-10


def test_polish_reaches_discrete_fixed_point():
    g = make_grid(2.0, 40)
    n1 = [b for b in ss.enumerate_branches(2.0) if b.id == "n1+"][0]
    Z = ss.select_constant(n1, 1.0, 0.3, g)
    P = ss.polish(Z, 1.0, 0.3)
    assert dual_norm(weak_residual(P.values), g) < 1e-11 < dual_norm(weak_residual(Z.values), g)
    assert abs(ss.inner(P.values, 1.0) - 0.3) < 1e-12


def test_table_rows(tmp_path):
    rows = ss.steady_table(2.0, make_grid(2.0, 50))
    assert [r["branch"] for r in rows] == ids(2.0)
    p = tmp_path / "t.csv"
    ss.write_table(p, rows)
    assert p.read_text().splitlines()[0] == ",".join(ss.TABLE_COLUMNS)
    assert abs(rows[3]["half_period"] - 2.0) < 1e-10
    assert abs(rows[3]["a"] - elliptic.invert_half_period(2.0)) < 1e-15
