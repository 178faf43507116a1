import numpy as np
import pytest
from hypothesis import given, strategies as st

from dpfilter.exceptions import DimensionError
from dpfilter.sdp import (AffineExpr, SdpInfeasible, SdpProblem, bmat, dump_triplets,
                          load_triplets, solve_sdp)


def test_scalar_lower_bound():
    p = SdpProblem()
    x = p.scalar("x")
    p.psd(x - 1.0, strict=False)
    p.minimize(x)
    sol = solve_sdp(p)
    assert sol.objective == pytest.approx(1.0, abs=1e-7)
    assert sol["x"][0, 0] == pytest.approx(1.0, abs=1e-7)


def test_infeasible_pair():
    p = SdpProblem()
    x = p.scalar("x")
    p.psd(x - 1.0, strict=False)
    p.psd(-x - 1.0, strict=False)
    p.minimize(x)
    with pytest.raises(SdpInfeasible) as info:
        solve_sdp(p)
    assert info.value.best_min_eig is not None
    assert info.value.best_min_eig < 0


def test_trace_over_psd_cone():
    A0 = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.3], [0.0, 0.3, 2.0]])
    p = SdpProblem()
    P = p.variable("P", 3, symmetric=True)
    p.psd(P - A0, strict=False)
    p.minimize(P.trace())
    sol = solve_sdp(p)
    assert sol.objective == pytest.approx(np.trace(A0), rel=1e-7)
    assert np.allclose(sol["P"], A0, atol=1e-5)


def test_strict_constraint_keeps_margin():
    p = SdpProblem(strict_tol=1e-4)
    x = p.scalar("x")
    p.psd(x * np.eye(2), strict=True)
    p.minimize(x)
    sol = solve_sdp(p)
    assert sol["x"][0, 0] >= 1e-4 * (1 - 1e-6)


def test_certificates_hold():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((4, 4))
    M = M + M.T
    p = SdpProblem()
    t = p.scalar("t")
    p.psd(t * np.eye(4) - M, strict=False)
    p.minimize(t)
    sol = solve_sdp(p)
    assert sol.objective == pytest.approx(np.linalg.eigvalsh(M)[-1], abs=1e-6)
    for c in p.constraints:
        val = c.expr.value(sol.x)
        assert np.linalg.eigvalsh(val)[0] >= -1e-7 * (1 + np.linalg.norm(val))


def test_rejects_malformed():
    p = SdpProblem()
    X = p.variable("X", (2, 2))
    with pytest.raises(DimensionError):
        p.psd(X)  # not symmetric
    p2 = SdpProblem()
    x = p2.scalar("x")
    p2.scalar("unused")
    p2.psd(x - 1.0)
    p2.minimize(x)
    with pytest.raises(DimensionError):
        solve_sdp(p2)
    with pytest.raises(DimensionError):
        bmat([[np.eye(2), np.ones((3, 1))], [np.ones((1, 2)), np.eye(1)]])


def test_triplet_round_trip():
    A0 = np.array([[2.0, 0.5], [0.5, 3.0]])
    p = SdpProblem()
    P = p.variable("P", 2, symmetric=True)
    G = p.variable("G", (2, 1))
    p.psd(bmat([[P - A0, G], [G.T, np.eye(1)]]), name="blk")
    p.minimize(P.trace())
    text = dump_triplets(p)
    assert text.startswith("dpfilter-sdp 1")
    q = load_triplets(text)
    assert dump_triplets(q) == text
    assert solve_sdp(q).objective == pytest.approx(solve_sdp(p).objective, rel=1e-9)


@given(st.integers(0, 10_000))
def test_affine_algebra_matches_numpy(seed):
    rng = np.random.default_rng(seed)
    p = SdpProblem()
    X = p.variable("X", 3, symmetric=True)
    Y = p.variable("Y", (3, 2))
    M = rng.standard_normal((3, 3))
    N = rng.standard_normal((2, 3))
    expr = M @ X @ M.T - 2.0 * X + Y @ N + (Y @ N).T
    x = rng.standard_normal(p.n_scalars)
    vals = p.values(x)
    Xv, Yv = vals["X"], vals["Y"]
    assert np.allclose(Xv, Xv.T)
    ref = M @ Xv @ M.T - 2 * Xv + Yv @ N + (Yv @ N).T
    assert np.allclose(expr.value(x), ref)
    assert np.isclose(X.trace().value(x)[0, 0], np.trace(Xv))
    assert isinstance(expr, AffineExpr)
