"""Reference optimizer for the one-sided-information case.

When the survival function is known, the best (reward, two-point scheme)
pair can be found by exhaustive search: sweep rewards on a fine grid and,
for each reward, minimize the expected participation over all mean-preserving
two-point supports drawn from the same fine grid.  The inner minimum over
support pairs equals the lower convex hull of the per-point participation
values evaluated at the prior mean, which this module computes exactly in
one pass per reward instead of enumerating all pairs (the equivalence is
covered by a literal pairwise brute force in the tests).

This search is deliberately independent of the grid engine's bracket
construction so it can serve as the oracle in optimality-gap checks.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import Infeasible
from .mechanism import (
    CommPrior,
    CostModel,
    MechanismChoice,
    ResourceBounds,
    SurvivalModel,
    build_scheme,
    make_participation_fn,
    threshold,
    two_point_split,
)

_GAMMA_CHUNK = 512


def _hull_min_at(mu, s, m):
    """Minimum over straddling index pairs (l, r) of the chord through
    (mu_l, s_l), (mu_r, s_r) evaluated at m, i.e. the lower convex hull of
    the points at m.  mu must be sorted ascending with mu[0] <= m <= mu[-1].

    Returns (value, left_index, right_index); the indices coincide when the
    minimum is attained by a point sitting on m itself.
    """
    n = mu.shape[0]
    stack = np.empty(n, np.int64)
    k = 0
    for i in range(n):
        while k >= 2:
            a = stack[k - 2]
            b = stack[k - 1]
            cross = (mu[b] - mu[a]) * (s[i] - s[a]) - (s[b] - s[a]) * (mu[i] - mu[a])
            if cross <= 0.0:
                k -= 1
            else:
                break
        stack[k] = i
        k += 1
    for j in range(k - 1):
        a = stack[j]
        b = stack[j + 1]
        if mu[a] <= m <= mu[b]:
            if mu[b] - mu[a] < 1e-300:
                return s[a], a, a
            t = (m - mu[a]) / (mu[b] - mu[a])
            return s[a] + t * (s[b] - s[a]), a, b
    a = stack[k - 1]  # m sits on the last hull vertex
    return s[a], a, a


def _chunk_inner_min(mu, s, feas, m, out_val, out_li, out_ri):
    """Row-wise hull minimum over the feasible cells of a reward chunk."""
    rows = s.shape[0]
    n = mu.shape[0]
    cm = np.empty(n)
    cs = np.empty(n)
    idx = np.empty(n, np.int64)
    stack = np.empty(n, np.int64)
    for r in range(rows):
        k = 0
        for j in range(n):
            if feas[r, j]:
                cm[k] = mu[j]
                cs[k] = s[r, j]
                idx[k] = j
                k += 1
        if k == 0 or cm[0] > m + 1e-12 or cm[k - 1] < m - 1e-12:
            out_val[r] = np.inf
            out_li[r] = -1
            out_ri[r] = -1
            continue
        h = 0
        for i in range(k):
            while h >= 2:
                a = stack[h - 2]
                b = stack[h - 1]
                cross = (cm[b] - cm[a]) * (cs[i] - cs[a]) - (cs[b] - cs[a]) * (
                    cm[i] - cm[a]
                )
                if cross <= 0.0:
                    h -= 1
                else:
                    break
            stack[h] = i
            h += 1
        val = cs[stack[h - 1]]
        li = stack[h - 1]
        ri = stack[h - 1]
        for j in range(h - 1):
            a = stack[j]
            b = stack[j + 1]
            if cm[a] <= m <= cm[b]:
                if cm[b] - cm[a] < 1e-300:
                    val, li, ri = cs[a], a, a
                else:
                    t = (m - cm[a]) / (cm[b] - cm[a])
                    val = cs[a] + t * (cs[b] - cs[a])
                    li, ri = a, b
                break
        out_val[r] = val
        out_li[r] = idx[li]
        out_ri[r] = idx[ri]


try:  # jit-compile the scan; pure python fallback keeps behaviour identical
    from numba import njit

    _chunk_inner_min_fast = njit(cache=True)(_chunk_inner_min)
except Exception:  # pragma: no cover - numba is a declared dependency
    _chunk_inner_min_fast = _chunk_inner_min


def _threshold_matrix(
    gammas: np.ndarray, mus: np.ndarray, cost: CostModel, bounds: ResourceBounds
) -> np.ndarray:
    """Participation thresholds for every (gamma, mu) cell; NaN = nobody joins.

    Uses the analytic inversion when the cost model provides one, otherwise a
    bisection vectorized over the whole cell matrix (the cost fn must accept
    arrays elementwise, which all shipped forms do).
    """
    g = gammas[:, None]
    m = mus[None, :]
    if cost.invert_theta is not None:
        roots = np.asarray(cost.invert_theta(g, m), float)
        thr = np.clip(roots, bounds.theta_lo, None)
        thr[roots > bounds.theta_hi] = np.nan
        return thr
    no_root = np.asarray(cost.fn(bounds.theta_hi, m), float) > g
    at_floor = np.asarray(cost.fn(bounds.theta_lo, m), float) <= g
    lo = np.full((gammas.size, mus.size), bounds.theta_lo)
    hi = np.full_like(lo, bounds.theta_hi)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        below = np.asarray(cost.fn(mid, m), float) <= g
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
    thr = hi
    thr = np.where(at_floor, bounds.theta_lo, thr)
    thr[no_root] = np.nan
    return thr


def optimal_design_known_s(
    cost: CostModel,
    survival: SurvivalModel,
    prior: CommPrior,
    bounds: ResourceBounds,
    beta: Optional[float] = None,
    fine_step: Optional[float] = None,
) -> MechanismChoice:
    """Fine-grid minimizer of the expected per-round cost when the survival
    function is known.

    Rewards sweep [gamma_lo, gamma_hi] at ``fine_step`` (default xi/100,
    which is also the coarsest permitted); candidate two-point supports come
    from the same fine grid over [tau_lo, tau_hi].  A candidate is feasible
    when every support point induces a real threshold at or above ``beta``.
    Ties break toward the smaller reward; within one reward the unique hull
    segment at the prior mean decides the support.

    Raises Infeasible when no reward admits a feasible support.
    """
    if beta is None:
        beta = bounds.theta_lo
    max_step = bounds.xi / 100.0
    if fine_step is None:
        fine_step = max_step
    if fine_step > max_step * (1 + 1e-9):
        raise ValueError(f"fine_step must be <= xi/100 = {max_step}")

    n_gamma = int(round((bounds.gamma_hi - bounds.gamma_lo) / fine_step))
    gammas = bounds.gamma_lo + np.arange(n_gamma + 1) * fine_step
    n_mu = int(round((bounds.tau_hi - bounds.tau_lo) / fine_step))
    mus = bounds.tau_lo + np.arange(n_mu + 1) * fine_step
    m = prior.mean
    if not np.any(np.abs(mus - m) <= 1e-12):
        mus = np.sort(np.append(mus, m))

    probe = np.asarray(survival(np.array([bounds.theta_lo, bounds.theta_hi])))
    surv_grid = survival.fn if probe.shape == (2,) else np.vectorize(
        survival.fn, otypes=[float]
    )

    best_cost = np.inf
    best: Optional[tuple[float, float, float]] = None  # gamma, mu_l, mu_r

    for start in range(0, gammas.size, _GAMMA_CHUNK):
        g_chunk = gammas[start : start + _GAMMA_CHUNK]
        thr = _threshold_matrix(g_chunk, mus, cost, bounds)
        feasible = ~np.isnan(thr) & (thr >= beta - 1e-12)
        s_vals = surv_grid(np.clip(thr, bounds.theta_lo, bounds.theta_hi))
        np.clip(s_vals, 0.0, 1.0, out=s_vals)
        s_vals[~feasible] = np.nan  # only feasible cells are read downstream
        inner = np.empty(g_chunk.size)
        li = np.empty(g_chunk.size, np.int64)
        ri = np.empty(g_chunk.size, np.int64)
        _chunk_inner_min_fast(
            mus, np.ascontiguousarray(s_vals), np.ascontiguousarray(feasible), m,
            inner, li, ri,
        )
        for i in range(g_chunk.size):
            if not np.isfinite(inner[i]):
                continue
            cost_here = float(g_chunk[i]) * float(inner[i])
            if cost_here < best_cost:
                best_cost = cost_here
                best = (float(g_chunk[i]), float(mus[li[i]]), float(mus[ri[i]]))

    if best is None:
        raise Infeasible("no reward admits a feasible mean-preserving support")

    gamma_star, mu_l, mu_r = best
    if mu_r - mu_l < 1e-15:
        support = [(mu_l, 1.0)]
    else:
        w_l, w_r = two_point_split(m, mu_l, mu_r)
        if w_l < 1e-12:
            support = [(mu_r, 1.0)]
        elif w_r < 1e-12:
            support = [(mu_l, 1.0)]
        else:
            support = [(mu_l, w_l), (mu_r, w_r)]
    scheme = build_scheme(support, prior)
    thresholds = tuple(
        threshold(gamma_star, mu, cost, bounds) for mu, _ in scheme.support
    )
    participation = make_participation_fn(cost, survival, bounds)
    predicted = gamma_star * sum(
        w * participation(gamma_star, mu) for mu, w in scheme.support
    )
    return MechanismChoice(
        gamma=gamma_star,
        scheme=scheme,
        predicted_cost=predicted,
        threshold_by_mu=thresholds,
    )
