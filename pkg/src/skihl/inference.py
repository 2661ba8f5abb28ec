"""Soft-logic inference over a ground program.

Semantics (Lukasiewicz relaxation): conjunction max(a+b-1, 0), disjunction
min(a+b, 1), negation 1-a. A rule's distance to satisfaction is
max(0, I(body) - I(head)); inference minimizes the weighted sum of distances
over atom values in [0,1], plus a small quadratic anchor to the initial
assignment that makes the minimizer unique on flat regions.

The minimizer is projected subgradient descent with Armijo backtracking
(monotone in the objective), followed by an exact coordinate pass on small
free-variable sets and a minimum-norm-subgradient repair that either
certifies stationarity or escapes hinge ridges the plain subgradient
cannot descend.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize as _minimize

from .hierarchy import Frontier
from .knowledge import GroundProgram

LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# Fuzzy semantics
# ---------------------------------------------------------------------------


def _check_unit(name, *values):
    for v in values:
        arr = np.asarray(v, dtype=np.float64)
        if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
            raise ValueError(f"{name}: input outside [0,1]: {v!r}")


def t_and(a, b, *rest):
    """Lukasiewicz conjunction max(a+b-1, 0); n-ary folds left."""
    _check_unit("t_and", a, b, *rest)
    out = np.maximum(np.asarray(a, dtype=np.float64) + b - 1.0, 0.0)
    for v in rest:
        out = np.maximum(out + v - 1.0, 0.0)
    return out if out.ndim else float(out)


def t_or(a, b, *rest):
    """Lukasiewicz disjunction min(a+b, 1); n-ary folds left."""
    _check_unit("t_or", a, b, *rest)
    out = np.minimum(np.asarray(a, dtype=np.float64) + b, 1.0)
    for v in rest:
        out = np.minimum(out + v, 1.0)
    return out if out.ndim else float(out)


def t_not(a):
    """Lukasiewicz negation 1 - a."""
    _check_unit("t_not", a)
    out = 1.0 - np.asarray(a, dtype=np.float64)
    return out if out.ndim else float(out)


def rule_distance(body_truth, head_truth):
    """Distance to satisfaction: max(0, I(body) - I(head))."""
    out = np.maximum(np.asarray(body_truth, dtype=np.float64) - head_truth, 0.0)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Assignments and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TruthAssignment:
    """Soft truth values in [0,1], one per open atom (canonical leaf order)."""

    values: np.ndarray
    frontier: Optional[Frontier] = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ValueError("assignment values must be a flat vector")
        if vals.size and (not np.all(np.isfinite(vals)) or vals.min() < 0.0
                          or vals.max() > 1.0):
            raise ValueError("assignment values outside [0,1]")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class SolverParams:
    anchor_tau: float = 0.01
    max_iters: int = 500
    tol: float = 1e-7
    step0: float = 1.0
    beta: float = 0.5
    armijo_c: float = 1e-4
    polish_max_free: int = 64  # exact coordinate pass below this many free atoms
    repair_max_rounds: int = 30  # min-norm subgradient escapes after the main loop
    stationarity_tol: float = 1e-6  # sup-norm of the masked residual at optimality

    def __post_init__(self):
        if self.anchor_tau < 0 or self.max_iters < 0 or self.tol <= 0 \
                or self.step0 <= 0 or not (0 < self.beta < 1) or self.armijo_c <= 0 \
                or self.repair_max_rounds < 0 or self.stationarity_tol <= 0:
            raise ValueError(f"invalid solver params: {self}")


@dataclass(frozen=True)
class UncertaintyMap:
    """Entropy per open atom, with the refinement policy attached."""

    u: np.ndarray
    frontier: Optional[Frontier] = None
    threshold: Optional[float] = None
    refine_fraction: Optional[float] = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        if np.any(u < 0.0) or np.any(u > LN2 + 1e-12):
            raise ValueError("entropy values outside [0, ln 2]")
        u = u.copy()
        u.setflags(write=False)
        object.__setattr__(self, "u", u)


# ---------------------------------------------------------------------------
# Objective and subgradient
# ---------------------------------------------------------------------------


def _distances(program: GroundProgram, x: np.ndarray) -> np.ndarray:
    """Per-rule distance to satisfaction at assignment x (vectorized).

    Uses the n-ary Lukasiewicz identity: a conjunction of literals l_j equals
    max(0, sum_j l_j - (n-1)), which the compiled arrays encode as one affine
    form per rule.
    """
    a = program.arrays
    xx = np.append(x, 0.0)  # padding slot for index -1
    body_lin = (xx[a["b_idx"]] * a["b_sgn"]).sum(axis=1) + a["b_base"]
    head = a["h_sgn"] * xx[a["h_idx"]] + a["h_base"]
    return np.maximum(np.maximum(body_lin, 0.0) - head, 0.0)


def hinge_objective(program: GroundProgram, values: np.ndarray) -> float:
    """Weighted sum of rule distances (no anchor term)."""
    x = np.asarray(values, dtype=np.float64)
    if x.shape != (program.n_atoms,):
        raise ValueError(f"assignment length {x.shape} != {program.n_atoms} atoms")
    if len(program.rules) == 0:
        return 0.0
    return float(program.arrays["w"] @ _distances(program, x))


def objective(program: GroundProgram, assignment: TruthAssignment,
              params: SolverParams = SolverParams(),
              init: Optional[TruthAssignment] = None) -> float:
    """Inference objective: sum_r w_r d_r(I) + anchor_tau * ||I - init||^2.

    With no init (or anchor_tau 0) this is exactly the weighted distance sum.
    """
    total = hinge_objective(program, assignment.values)
    if init is not None and params.anchor_tau > 0:
        diff = assignment.values - np.asarray(init.values, dtype=np.float64)
        total += params.anchor_tau * float(diff @ diff)
    return total


def _subgradient(program: GroundProgram, x: np.ndarray, tau: float,
                 anchor: np.ndarray) -> np.ndarray:
    """Subgradient of the anchored objective, taking 0 at hinge kinks.
    Clamped atoms get 0 so they never move."""
    a = program.arrays
    g = np.zeros_like(x)
    if len(program.rules):
        d = _distances(program, x)
        act = np.flatnonzero(d > 0.0)
        if act.size:
            # d > 0 implies the body hinge is strictly positive, so the rule
            # is locally affine there: grad = body signs minus head sign.
            idx = a["b_idx"][act]
            contrib = a["b_sgn"][act] * a["w"][act, None]
            valid = idx >= 0
            np.add.at(g, idx[valid], contrib[valid])
            hidx = a["h_idx"][act]
            hvalid = hidx >= 0
            np.add.at(g, hidx[hvalid], -(a["h_sgn"][act] * a["w"][act])[hvalid])
    if tau > 0:
        g += 2.0 * tau * (x - anchor)
    g[~program.free_mask] = 0.0
    return g


def _scatter_rule_gradients(program: GroundProgram, coef: np.ndarray) -> np.ndarray:
    """sum_r coef_r * grad(body_lin_r - head_r), accumulated per atom."""
    a = program.arrays
    g = np.zeros(program.n_atoms)
    idx = a["b_idx"]
    contrib = a["b_sgn"] * coef[:, None]
    valid = idx >= 0
    np.add.at(g, idx[valid], contrib[valid])
    hidx = a["h_idx"]
    hvalid = hidx >= 0
    np.add.at(g, hidx[hvalid], -(a["h_sgn"] * coef)[hvalid])
    return g


def _min_norm_residual(program: GroundProgram, x: np.ndarray, tau: float,
                       anchor: np.ndarray, tie_eps: float = 1e-9,
                       box_eps: float = 1e-9) -> np.ndarray:
    """Minimum-norm element of the box-reduced subdifferential at x.

    For in-box assignments each rule distance is a single affine hinge
    max(0, body_lin - head), so the subdifferential is the anchored gradient
    plus any [0,1]-weighted mix of the hinges sitting exactly at their kink.
    Boundary coordinates drop the gradient components that only push outward.
    A (near-)zero residual certifies optimality; otherwise its negative is a
    feasible strict-descent direction.
    """
    a = program.arrays
    xx = np.append(x, 0.0)
    body_lin = (xx[a["b_idx"]] * a["b_sgn"]).sum(axis=1) + a["b_base"]
    head = a["h_sgn"] * xx[a["h_idx"]] + a["h_base"]
    phi = body_lin - head
    w = a["w"]
    g_base = _scatter_rule_gradients(program, np.where(phi > tie_eps, w, 0.0))
    if tau > 0:
        g_base = g_base + 2.0 * tau * (x - anchor)

    free = program.free_mask
    at0 = x <= box_eps
    at1 = x >= 1.0 - box_eps

    def masked(g):
        p = np.where(free, g, 0.0)
        p = np.where(at0, np.minimum(p, 0.0), p)
        p = np.where(at1, np.maximum(p, 0.0), p)
        return p

    tied = np.flatnonzero((np.abs(phi) <= tie_eps) & (w > 0.0))
    if tied.size == 0:
        return masked(g_base)

    b_idx = a["b_idx"][tied]
    b_coef = np.where(b_idx >= 0, a["b_sgn"][tied] * w[tied, None], 0.0)
    h_idx = a["h_idx"][tied]
    h_coef = np.where(h_idx >= 0, -a["h_sgn"][tied] * w[tied], 0.0)

    def g_of(lam):
        g = g_base.copy()
        valid = b_idx >= 0
        np.add.at(g, b_idx[valid], (b_coef * lam[:, None])[valid])
        hvalid = h_idx >= 0
        np.add.at(g, h_idx[hvalid], (h_coef * lam)[hvalid])
        return g

    def norm_sq(lam):
        p = masked(g_of(lam))
        pp = np.append(p, 0.0)  # padding slot for index -1
        grad = 2.0 * ((pp[b_idx] * b_coef).sum(axis=1) + pp[h_idx] * h_coef)
        return float(p @ p), grad

    res = _minimize(norm_sq, np.full(tied.size, 0.5), jac=True,
                    method="L-BFGS-B", bounds=[(0.0, 1.0)] * tied.size,
                    options={"maxiter": 200, "ftol": 1e-16, "gtol": 1e-12})
    return masked(g_of(res.x))


def _coordinate_polish(program: GroundProgram, x: np.ndarray, tau: float,
                       anchor: np.ndarray, free: np.ndarray, f_of,
                       max_sweeps: int = 50) -> np.ndarray:
    """Exact cyclic coordinate minimization for small free sets.

    Along one coordinate the objective is convex piecewise quadratic; its
    minimum lies at a hinge breakpoint, a box edge, or an interior stationary
    point of one segment. All candidates are enumerated and evaluated.
    """
    a = program.arrays
    for _ in range(max_sweeps):
        moved = 0.0
        for i in free:
            i = int(i)
            xi = float(x[i])
            xx = np.append(x, 0.0)
            # per-rule affine forms along coordinate i:
            # body_lin(t) = beta t + B, head(t) = eta t + H
            beta = (a["b_sgn"] * (a["b_idx"] == i)).sum(axis=1)
            body_full = (xx[a["b_idx"]] * a["b_sgn"]).sum(axis=1) + a["b_base"]
            B = body_full - beta * xi
            eta = np.where(a["h_idx"] == i, a["h_sgn"], 0.0)
            head_full = a["h_sgn"] * xx[a["h_idx"]] + a["h_base"]
            H = head_full - eta * xi
            touch = (beta != 0.0) | (eta != 0.0)
            bt, Bt, et, Ht, wt = (beta[touch], B[touch], eta[touch], H[touch],
                                  a["w"][touch])
            cand = {0.0, 1.0}
            for num, den in ((-Bt, bt),            # body_lin crosses 0
                             (-Ht, et),            # head crosses 0
                             (Ht - Bt, bt - et)):  # body_lin crosses head
                nz = den != 0.0
                for t in num[nz] / den[nz]:
                    if 0.0 < t < 1.0:
                        cand.add(float(t))
            if tau > 0.0:
                if wt.size:
                    grid = sorted(cand)
                    for lo, hi in zip(grid[:-1], grid[1:]):
                        mid = 0.5 * (lo + hi)
                        bl = bt * mid + Bt
                        hd = et * mid + Ht
                        dpos = np.maximum(bl, 0.0) - hd > 0.0
                        seg_slope = float(np.sum(np.where(
                            dpos, wt * (np.where(bl > 0.0, bt, 0.0) - et), 0.0)))
                        t = anchor[i] - seg_slope / (2.0 * tau)
                        if lo < t < hi:
                            cand.add(float(t))
                elif 0.0 < anchor[i] < 1.0:
                    cand.add(float(anchor[i]))
            best_t, best_f = xi, f_of(x)
            for t in sorted(cand):
                x[i] = t
                ft = f_of(x)
                if ft < best_f:
                    best_t, best_f = t, ft
            x[i] = best_t
            moved = max(moved, abs(best_t - xi))
        if moved < 1e-12:
            break
    return x


@dataclass(frozen=True)
class SolveResult:
    assignment: TruthAssignment
    objective: float
    iterations: int
    converged: bool
    trace: tuple  # rows of (iter, objective, step, max_grad)


def solve(program: GroundProgram, init: TruthAssignment,
          params: SolverParams = SolverParams(),
          trace_path: Optional[str] = None) -> SolveResult:
    """Minimize the anchored objective over free atoms, values kept in [0,1].

    Projected subgradient descent with Armijo backtracking; every accepted
    step does not increase the objective; stops when the objective decrease
    falls below tol or after max_iters. The main loop is followed by an exact
    coordinate pass (small free sets) and minimum-norm-subgradient repair
    rounds that fix kink points the zero-at-kink subgradient cannot leave.
    Clamped atoms are held at their observed values throughout. Returns the
    best assignment seen.
    """
    if len(init) != program.n_atoms:
        raise ValueError(f"init length {len(init)} != {program.n_atoms} atoms")
    x = np.asarray(init.values, dtype=np.float64).copy()
    if program.clamp_idx.size:
        x[program.clamp_idx] = program.clamp_val
    anchor = x.copy()
    tau = params.anchor_tau

    def f_of(v):
        total = hinge_objective(program, v)
        if tau > 0:
            diff = v - anchor
            total += tau * float(diff @ diff)
        return total

    f = f_of(x)
    best_x, best_f = x.copy(), f
    g = _subgradient(program, x, tau, anchor)
    trace = [(0, f, 0.0, float(np.abs(g).max(initial=0.0)))]
    accepted = 0
    converged = False

    for _ in range(params.max_iters):
        gmax = float(np.abs(g).max(initial=0.0))
        if gmax == 0.0:
            converged = True
            break
        step = params.step0
        x_new = None
        while step > 1e-14:
            candv = np.clip(x - step * g, 0.0, 1.0)
            f_cand = f_of(candv)
            # Armijo condition phrased for the projected step
            if f_cand <= f - params.armijo_c * float(g @ (x - candv)):
                x_new, f_new = candv, f_cand
                break
            step *= params.beta
        if x_new is None:
            break  # no descent along this subgradient; best-seen stands
        accepted += 1
        trace.append((accepted, f_new, step, gmax))
        decrease = f - f_new
        x, f = x_new, f_new
        if f < best_f:
            best_x, best_f = x.copy(), f
        if decrease < params.tol:
            converged = True
            break
        g = _subgradient(program, x, tau, anchor)

    # The zero-at-kink subgradient can stall on hinge ridges where every
    # coordinate is locally optimal but a joint move still descends. Each
    # repair round polishes (small free sets), then asks the minimum-norm
    # subdifferential element for a certificate or a descent direction.
    free = np.flatnonzero(program.free_mask)
    if free.size and len(program.rules):
        small = free.size <= params.polish_max_free
        for _ in range(params.repair_max_rounds):
            if small:
                polished = _coordinate_polish(program, best_x.copy(), tau,
                                              anchor, free, f_of)
                f_pol = f_of(polished)
                if f_pol < best_f:
                    accepted += 1
                    trace.append((accepted, f_pol, 0.0, 0.0))
                    best_x, best_f = polished, f_pol
            p = _min_norm_residual(program, best_x, tau, anchor)
            res = float(np.abs(p).max(initial=0.0))
            if res <= params.stationarity_tol:
                converged = True
                break
            step = params.step0
            moved = False
            while step > 1e-14:
                candv = np.clip(best_x - step * p, 0.0, 1.0)
                f_cand = f_of(candv)
                if f_cand <= best_f - params.armijo_c * float(p @ (best_x - candv)):
                    # grow the step while doubling still pays off; descent
                    # directions along shallow ridges need steps >> step0
                    for _ in range(60):
                        wide = step / params.beta
                        candw = np.clip(best_x - wide * p, 0.0, 1.0)
                        f_wide = f_of(candw)
                        if f_wide < f_cand and f_wide <= best_f - \
                                params.armijo_c * float(p @ (best_x - candw)):
                            step, candv, f_cand = wide, candw, f_wide
                        else:
                            break
                    accepted += 1
                    trace.append((accepted, f_cand, step, res))
                    best_x, best_f = candv, f_cand
                    moved = True
                    break
                step *= params.beta
            if not moved:
                break

    if trace_path is not None:
        write_solver_trace(trace, trace_path)
    assignment = TruthAssignment(values=np.clip(best_x, 0.0, 1.0),
                                 frontier=init.frontier)
    return SolveResult(assignment=assignment, objective=best_f,
                       iterations=accepted, converged=converged,
                       trace=tuple(trace))


def write_solver_trace(trace: Sequence, path: str | os.PathLike) -> None:
    """Solver trace CSV, one row per accepted iteration."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("iter,objective,step,max_grad\n")
        for it, obj, step, gmax in trace:
            fh.write(f"{it},{obj!r},{step!r},{gmax!r}\n")


# ---------------------------------------------------------------------------
# Entropy and refinement selection
# ---------------------------------------------------------------------------


def entropy(values) -> np.ndarray:
    """Binary entropy -y ln y - (1-y) ln(1-y) in nats, with 0 ln 0 := 0."""
    y = np.asarray(values, dtype=np.float64)
    out = np.zeros_like(y)
    for p in (y, 1.0 - y):
        pos = p > 0.0
        out = out - np.where(pos, p * np.log(np.where(pos, p, 1.0)), 0.0)
    return np.clip(out, 0.0, LN2)


def entropy_uncertainty(assignment: TruthAssignment,
                        threshold: Optional[float] = None,
                        refine_fraction: Optional[float] = None) -> UncertaintyMap:
    """Entropy of each atom's soft value, with the refinement policy attached."""
    if threshold is not None and refine_fraction is not None:
        raise ValueError("give either threshold or refine_fraction, not both")
    return UncertaintyMap(u=entropy(assignment.values),
                          frontier=assignment.frontier,
                          threshold=threshold, refine_fraction=refine_fraction)


def select_refinement(uncertainty: UncertaintyMap, frontier: Frontier) -> set:
    """Cells to refine next.

    Threshold mode: every level>=1 leaf with u >= threshold. Budget mode: the
    top ceil(fraction * n_eligible) eligible (level>=1) leaves by u, ties
    broken by canonical leaf order. May be empty.
    """
    u = uncertainty.u
    if u.shape != (len(frontier),):
        raise ValueError(f"uncertainty length {u.shape} != {len(frontier)} leaves")
    eligible = [i for i, cell in enumerate(frontier.leaves) if cell.level >= 1]
    if uncertainty.threshold is not None:
        return {frontier.leaves[i] for i in eligible if u[i] >= uncertainty.threshold}
    if uncertainty.refine_fraction is not None:
        frac = uncertainty.refine_fraction
        if not (0.0 <= frac <= 1.0):
            raise ValueError(f"refine_fraction outside [0,1]: {frac}")
        k = math.ceil(frac * len(eligible))
        ranked = sorted(eligible, key=lambda i: (-u[i], i))
        return {frontier.leaves[i] for i in ranked[:k]}
    raise ValueError("uncertainty map carries no refinement policy")


def hierarchical_loss_report(programs: Sequence, assignments: Sequence,
                             lam: float) -> float:
    """Diagnostic scalar over completed levels:
    sum_k (sum_r w_r d_r(I_k) + lam * n_ground_rules_k). Anchor excluded."""
    if len(programs) != len(assignments):
        raise ValueError("one assignment per program required")
    total = 0.0
    for prog, assign in zip(programs, assignments):
        vals = assign.values if isinstance(assign, TruthAssignment) else assign
        total += hinge_objective(prog, vals) + lam * len(prog.rules)
    return total
