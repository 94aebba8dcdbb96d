import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from moecgan.metrics import (
    MetricReport,
    auction,
    chamfer,
    emd,
    emd_bruteforce,
    evaluate_pair,
    hausdorff,
    hungarian,
    markdown_table,
    nearest_sq,
    prr,
    routing_consistency,
    summarize,
    write_metric_csv,
)

O = np.zeros((1, 3))
X = np.array([[1.0, 0, 0]])

clouds = arrays(np.float64, st.tuples(st.integers(1, 12), st.just(3)), elements=st.floats(-5, 5))


def test_chamfer_hand_values(rng):
    A = rng.random((20, 3))
    assert chamfer(A, A) == 0.0
    assert chamfer(O, X) == 2.0


def test_chamfer_asymmetric_sizes():
    A = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    # A->B: 0 and 4, mean 2; B->A: 0
    assert chamfer(A, O) == pytest.approx(2.0, abs=1e-15)


def test_hausdorff_hand_values(rng):
    A = rng.random((20, 3))
    assert hausdorff(A, A) == 0.0
    assert hausdorff(O, X) == 1.0


@settings(max_examples=60, deadline=None)
@given(A=clouds, B=clouds)
def test_cd_hd_symmetric(A, B):
    assert chamfer(A, B) == pytest.approx(chamfer(B, A), abs=1e-12)
    assert hausdorff(A, B) == pytest.approx(hausdorff(B, A), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(A=clouds, B=clouds, C=clouds)
def test_hausdorff_triangle(A, B, C):
    assert hausdorff(A, C) <= hausdorff(A, B) + hausdorff(B, C) + 1e-9


def test_tree_matches_brute_force(rng):
    A, B = rng.random((5000, 3)), rng.random((4500, 3))
    a = nearest_sq(A, B, "tree")
    b = nearest_sq(A, B, "brute")
    assert np.max(np.abs(a - b)) <= 1e-12
    assert nearest_sq(A, B, "auto") == pytest.approx(b, abs=1e-12)


def test_empty_cloud_rejected():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), O)


# -- EMD ---------------------------------------------------------------------------

def test_emd_permutation_zero(rng):
    A = rng.random((30, 3))
    assert emd(A, A[rng.permutation(30)]) == pytest.approx(0.0, abs=1e-15)


def test_emd_line_example():
    A = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    B = np.array([[1.0, 0, 0], [3.0, 0, 0]])
    assert emd(A, B) == pytest.approx(1.0, abs=1e-15)
    assert emd_bruteforce(A, B) == pytest.approx(1.0, abs=1e-15)


def test_emd_matches_bruteforce_200_instances():
    rng = np.random.default_rng(7)
    for _ in range(200):
        m = int(rng.integers(1, 7))
        A, B = rng.standard_normal((m, 3)), rng.standard_normal((m, 3))
        assert abs(emd(A, B) - emd_bruteforce(A, B)) <= 1e-9


def test_emd_unequal_sizes():
    with pytest.raises(ValueError):
        emd(np.zeros((2, 3)), np.zeros((3, 3)))


@pytest.mark.parametrize("m", [1, 7, 60, 200])
def test_hungarian_matches_scipy(m, rng):
    C = rng.random((m, m))
    col, total = hungarian(C)
    r, c = linear_sum_assignment(C)
    assert sorted(col.tolist()) == list(range(m))
    assert total == pytest.approx(C[r, c].sum(), abs=1e-9)
    assert C[np.arange(m), col].sum() == pytest.approx(total, abs=1e-12)


def test_auction_within_bound(rng):
    m = 150
    a, b = rng.random((m, 3)), rng.random((m, 3))
    C = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
    assign, total, eps = auction(C, eps_final=1e-4)
    r, c = linear_sum_assignment(C)
    opt = C[r, c].sum()
    assert sorted(assign.tolist()) == list(range(m))
    assert opt - 1e-9 <= total <= opt + m * eps + 1e-9


def test_emd_large_uses_approximation(rng):
    A, B = rng.random((600, 3)), rng.random((600, 3))
    val, eps = emd(A, B, return_eps=True)
    C = np.sqrt(((A[:, None] - B[None]) ** 2).sum(-1))
    r, c = linear_sum_assignment(C)
    assert eps > 0
    assert abs(val - C[r, c].mean()) <= eps + 1e-9


# -- PRR ----------------------------------------------------------------------------

def test_prr_examples():
    xp = np.zeros((4, 4, 4))
    xp.flat[:10] = 1
    assert prr(xp, xp) == 100.0
    out = xp.copy()
    out.flat[0] = 0
    assert prr(xp, out) == 90.0
    assert prr(xp, np.ones_like(xp)) == 100.0
    assert prr(np.zeros_like(xp), out) == 100.0


def test_prr_shape_mismatch():
    with pytest.raises(ValueError):
        prr(np.zeros((4, 4, 4)), np.zeros((2, 2, 2)))


# -- reports ------------------------------------------------------------------------

def test_identity_pair_report(rng):
    x = (rng.random((8, 8, 8)) > 0.6).astype(float)
    r = evaluate_pair(x, x, x, n_points=256, seed=1)
    assert (r.cd, r.hd, r.emd, r.prr) == (0.0, 0.0, 0.0, 100.0)


def test_empty_prediction_still_scored(rng):
    x = (rng.random((8, 8, 8)) > 0.6).astype(float)
    pred = np.full((8, 8, 8), 0.1)
    pred[2, 3, 4] = 0.3
    r = evaluate_pair(x, pred, x, n_points=128, seed=1)
    assert np.isfinite(r.cd) and r.prr == 0.0


def test_report_validation():
    with pytest.raises(ValueError):
        MetricReport(-1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        MetricReport(0.0, 0.0, 0.0, prr=101.0)


def test_markdown_is_scaled_and_labelled():
    rows = [dict(label="n=1", cd=0.01, hd=0.002, emd=0.05, prr=None), dict(label="n=4", cd=0.02, hd=0.001, emd=0.1, prr=95.0)]
    md = markdown_table(rows, title="t")
    assert "Desk-scale" in md
    assert "| n=1 | 1.000 | 2.0 | 0.500 | n/a |" in md
    assert "| n=4 | 2.000 | 1.0 | 1.000 | 95.0 |" in md


def test_summarize_and_csv(tmp_path):
    reps = [MetricReport(1.0, 2.0, 3.0, 50.0), MetricReport(3.0, 4.0, 5.0, None)]
    s = summarize(reps)
    assert s == dict(cd=2.0, hd=3.0, emd=4.0, prr=50.0)
    write_metric_csv(tmp_path / "m.csv", [dict(id=0, **s, occlusion_ratio=0.5, mode="random-cells")])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "id,cd,hd,emd,prr,occlusion_ratio,mode"
    assert lines[1] == "0,2.0,3.0,4.0,50.0,0.5,random-cells"


def test_routing_consistency():
    assert routing_consistency([0, 0, 1, 1], ["a", "a", "b", "b"]) == 1.0
    assert routing_consistency([0, 1, 0, 1], ["a", "a", "b", "b"]) == 0.5
    assert routing_consistency([2, 2, 2], ["a", "b", "c"]) == 1.0
    with pytest.raises(ValueError):
        routing_consistency([0], ["a", "b"])
