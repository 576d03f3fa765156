import math

import pytest

from ihalab import analysis as A
from ihalab.errors import ConstraintError


@pytest.mark.parametrize("H,P,want", [(20, 20, 32000), (1, 1, 4), (2, 3, 48)])
def test_iha_extra_params(H, P, want):
    assert A.iha_extra_params(H, P) == want


def test_polyfilter_counts():
    c = A.polyfilter_param_counts(16, 3, 4)
    assert c["mha"] == 2660  # 2*16*19*4 + 3*19*4
    assert c["iha"] == 1476  # 2*16*19*2 + 3*19*4 + 4*8
    k1 = A.polyfilter_param_counts(16, 3, 1)
    assert k1["iha"] == 2 * 16 * 19 + 3 * 19 + 4 and k1["iha"] >= k1["mha"]
    assert A.polyfilter_param_counts(64, 4, 1)["crossover_k"] <= 9
    for k in range(9, 65):
        c = A.polyfilter_param_counts(64, 4, k)
        assert c["iha"] < c["mha"]


def test_cpm3_bounds():
    assert A.cpm3_param_bounds(4)["mha_lower"] == 256
    assert A.cpm3_param_bounds(1)["mha_lower"] == 4
    assert A.cpm3_param_bounds(4)["iha_upper"] == 37 * 32 + 48 + 16
    t = A.cpm3_threshold(3000)
    assert t == 153 and t <= 1500
    for n in (1500, 2000, 2999):
        b = A.cpm3_param_bounds(n)
        assert b["iha_upper"] < b["mha_lower"]


def test_flops_window_and_hybrid():
    r = A.flop_report(8192, 128, 20, 4, "hybrid_4to1")
    assert r["window"] == 256 and r["exact_window"]
    assert r["ratio"] == pytest.approx(0.6, abs=1e-12)
    g = A.flop_report(1024, 8, 4, 1, "global")
    assert g["ratio"] == 1.0
    g4 = A.flop_report(1024, 8, 4, 4, "global")
    assert g4["average_flops"] / g["average_flops"] == 16
    iha_top = A.flop_report(8192, 128, 20, 4, "hybrid_4to1", global_layer="iha")
    assert iha_top["ratio"] == pytest.approx((4 * 0.5 + 16) / 5)


def test_flops_errors():
    with pytest.raises(ConstraintError):
        A.flop_report(8, 4, 2, 4, "hybrid_4to1")  # window 0
    with pytest.raises(ConstraintError):
        A.flop_report(8, 4, 2, 1, "mystery")
