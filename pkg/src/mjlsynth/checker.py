"""Robust PCTL model checking and policy synthesis on interval MDPs.

The adversary resolves every interval row by sort-and-saturate: start
from the lower bounds and hand out the remaining mass to successors in
increasing (minimising) or decreasing (maximising) order of value, each
up to its upper bound. Value iteration applies this per state and action
at every sweep (a dynamic adversary).
"""

from dataclasses import dataclass, field

import numpy as np

from .pctl import And, Atom, Next, Not, Prob, TrueFormula, Until

CONV_TOL = 1e-6
MAX_ITER = 100_000
ROW_TOL = 1e-9

OBJECTIVES = {
    # name: (policy maximises, adversary maximises)
    "max-lower": (True, False),
    "min-upper": (False, True),
    "max-upper": (True, True),
    "min-lower": (False, False),
}


class CheckError(ValueError):
    pass


class InfeasibleRowError(CheckError):
    pass


class ConvergenceError(CheckError):
    def __init__(self, residual, iterations):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"value iteration did not converge in {iterations} sweeps (residual {residual:.3g})")


@dataclass
class ValueVector:
    lower: np.ndarray
    upper: np.ndarray


@dataclass
class Policy:
    """Deterministic policy as choice indices into an :class:`IntervalMdp`.

    ``table`` has shape ``(K, n_states)`` (row ``k`` is used at time step
    ``k``) for bounded objectives, or ``(n_states,)`` when stationary.
    ``-1`` marks states without a decision.
    """

    table: np.ndarray
    stationary: bool

    @property
    def horizon(self):
        return None if self.stationary else self.table.shape[0]

    def choice(self, state, k=0):
        if self.stationary:
            return int(self.table[state])
        if k >= self.table.shape[0]:
            return -1
        return int(self.table[k, state])


def robust_expectation(values, low, high, maximize=False):
    """Optimise ``sum p_j v_j`` over ``low <= p <= high``, ``sum p = 1``."""
    values = np.asarray(values, dtype=float)
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    residual = 1.0 - low.sum()
    if residual < -ROW_TOL or high.sum() < 1.0 - ROW_TOL:
        raise InfeasibleRowError(f"interval row admits no distribution (sum low {low.sum()}, sum high {high.sum()})")
    order = np.argsort(-values if maximize else values, kind="stable")
    slack = (high - low)[order]
    before = np.cumsum(slack) - slack
    p = low.copy()
    p[order] += np.clip(residual - before, 0.0, slack)
    return float(p @ values)


class _RowSolver:
    """Vectorised sort-and-saturate over every choice of an iMDP."""

    def __init__(self, imdp):
        self.imdp = imdp
        self.ec = imdp.entry_choice
        self.succ = imdp.entry_succ
        self.low = imdp.entry_low
        self.slack = imdp.entry_high - imdp.entry_low
        self.residual = 1.0 - np.bincount(self.ec, self.low, minlength=imdp.n_choices)
        self.seg_start = imdp.entry_ptr[:-1]

    def values(self, V, maximize, choices=None):
        """Optimal expectation per choice (``choices`` restricts the work)."""
        v = V[self.succ]
        key = -v if maximize else v
        if choices is None:
            order = np.lexsort((key, self.ec))
            ec = self.ec
            seg_start = self.seg_start
            n = self.imdp.n_choices
            residual = self.residual
        else:
            counts = np.diff(self.imdp.entry_ptr)[choices]
            owner = np.repeat(np.arange(choices.size), counts)
            starts = self.imdp.entry_ptr[choices]
            offsets = np.concatenate([[0], np.cumsum(counts)])
            sel = np.repeat(starts - offsets[:-1], counts) + np.arange(offsets[-1])
            order = sel[np.lexsort((key[sel], owner))]
            ec = owner
            seg_start = offsets[:-1]
            n = choices.size
            residual = self.residual[choices]
        slack = self.slack[order]
        cum = np.cumsum(slack) - slack
        before = cum - cum[np.minimum(seg_start, max(len(cum) - 1, 0))][ec]
        extra = np.clip(residual[ec] - before, 0.0, slack)
        p = self.low[order] + extra
        return np.bincount(ec, p * v[order], minlength=n)


def _select(imdp, qvals, maximize, active):
    """Best choice value and lowest-index argmax per state (for ``active`` states)."""
    n = imdp.n_states
    best = np.zeros(n)
    choice = np.full(n, -1, dtype=np.int64)
    has = (np.diff(imdp.choice_ptr) > 0) & active
    if not has.any() or qvals.size == 0:
        return best, choice
    starts = imdp.choice_ptr[:-1]
    nonempty = np.diff(imdp.choice_ptr) > 0
    idx = starts[nonempty]
    red = np.maximum.reduceat(qvals, idx) if maximize else np.minimum.reduceat(qvals, idx)
    full_best = np.zeros(n)
    full_best[nonempty] = red
    cs = imdp.choice_state
    is_best = qvals == full_best[cs]
    cand = np.where(is_best, np.arange(qvals.size), qvals.size)
    first = np.minimum.reduceat(cand, idx)
    full_choice = np.full(n, -1, dtype=np.int64)
    full_choice[nonempty] = first
    best[has] = full_best[has]
    choice[has] = full_choice[has]
    return best, choice


def _objective(objective):
    try:
        return OBJECTIVES[objective]
    except KeyError:
        raise ValueError(f"unknown objective {objective!r}; expected one of {sorted(OBJECTIVES)}") from None


def _mask(imdp, states):
    m = np.asarray(states)
    if m.dtype == bool:
        if m.shape != (imdp.n_states,):
            raise ValueError("state mask has the wrong length")
        return m
    out = np.zeros(imdp.n_states, dtype=bool)
    out[m.astype(np.int64)] = True
    return out


def _until_sweeps(imdp, phi1, phi2, sweeps, pol_max, adv_max, solver, fixed=None, tol=None):
    """Run until-style sweeps; ``fixed`` evaluates a given policy instead of optimising.

    Returns the final values, the per-sweep choice tables and the last residual.
    """
    todo = phi1 & ~phi2
    V = phi2.astype(float)
    tables = []
    residual = np.inf
    k = 0
    while k < sweeps:
        if fixed is None:
            q = solver.values(V, adv_max)
            best, choice = _select(imdp, q, pol_max, todo)
        else:
            choice = fixed(k)
            ok = (choice >= 0) & todo
            best = np.zeros(imdp.n_states)
            if ok.any():
                best[ok] = solver.values(V, adv_max, choice[ok])
        Vn = np.where(phi2, 1.0, 0.0)
        Vn[todo] = best[todo]
        residual = float(np.max(np.abs(Vn - V))) if V.size else 0.0
        V = Vn
        tables.append(choice)
        k += 1
        if tol is not None and residual < tol:
            break
    return V, tables, residual, k


def check_bounded_until(imdp, phi1, phi2, K, objective="max-lower"):
    """``phi1 U<=K phi2``: exactly ``K`` sweeps from the ``phi2`` indicator.

    Returns the value bounds and a time-indexed policy. The optimised side
    of :class:`ValueVector` is the objective value; the other side is the
    same policy evaluated against the opposite adversary.
    """
    pol_max, adv_max = _objective(objective)
    phi1, phi2 = _mask(imdp, phi1), _mask(imdp, phi2)
    if K < 0:
        raise ValueError("K must be non-negative")
    solver = _RowSolver(imdp)
    V, tables, _, _ = _until_sweeps(imdp, phi1, phi2, K, pol_max, adv_max, solver)
    # sweep j decides the action used with j steps to go, i.e. at time K - j
    table = np.array(tables[::-1], dtype=np.int64).reshape(K, imdp.n_states)
    W, _, _, _ = _until_sweeps(imdp, phi1, phi2, K, pol_max, not adv_max, solver,
                               fixed=lambda j: table[K - 1 - j])
    return _bounds(V, W, adv_max), Policy(table, stationary=False)


def check_unbounded_until(imdp, phi1, phi2, objective="max-lower", tol=CONV_TOL, max_iter=MAX_ITER):
    """``phi1 U phi2`` by value iteration until the sup-norm change drops below ``tol``."""
    pol_max, adv_max = _objective(objective)
    phi1, phi2 = _mask(imdp, phi1), _mask(imdp, phi2)
    solver = _RowSolver(imdp)
    V, tables, residual, k = _until_sweeps(imdp, phi1, phi2, max_iter, pol_max, adv_max, solver, tol=tol)
    if residual >= tol:
        raise ConvergenceError(residual, k)
    choice = tables[-1] if tables else np.full(imdp.n_states, -1, dtype=np.int64)
    W, _, residual2, k2 = _until_sweeps(imdp, phi1, phi2, max_iter, pol_max, not adv_max, solver,
                                        fixed=lambda j: choice, tol=tol)
    if residual2 >= tol:
        raise ConvergenceError(residual2, k2)
    return _bounds(V, W, adv_max), Policy(choice, stationary=True)


def check_next(imdp, phi, objective="max-lower"):
    """``X phi``: one robust sweep against the ``phi`` indicator."""
    pol_max, adv_max = _objective(objective)
    phi = _mask(imdp, phi)
    solver = _RowSolver(imdp)
    V0 = phi.astype(float)
    q = solver.values(V0, adv_max)
    everyone = np.ones(imdp.n_states, dtype=bool)
    best, choice = _select(imdp, q, pol_max, everyone)
    other = np.zeros(imdp.n_states)
    ok = choice >= 0
    if ok.any():
        other[ok] = solver.values(V0, not adv_max, choice[ok])
    return _bounds(best, other, adv_max), Policy(choice, stationary=True)


def _bounds(opt, other, adv_max):
    opt = np.clip(opt, 0.0, 1.0)
    other = np.clip(other, 0.0, 1.0)
    if adv_max:
        return ValueVector(lower=np.minimum(other, opt), upper=opt)
    return ValueVector(lower=opt, upper=np.maximum(other, opt))


@dataclass
class Evaluation:
    """Result of checking a state formula on every state."""

    sat: np.ndarray
    bounds: dict = field(default_factory=dict)
    policies: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)


def _objective_for(op):
    return "max-lower" if op in (">=", ">") else "min-upper"


def _satisfies(op, lam, vals):
    return {">=": vals >= lam, ">": vals > lam, "<=": vals <= lam, "<": vals < lam}[op]


def check_path(imdp, path, objective, result=None, tol=CONV_TOL, max_iter=MAX_ITER):
    """Optimise the probability of a path formula; operands are evaluated first."""
    result = Evaluation(sat=None) if result is None else result
    if isinstance(path, Next):
        phi = _eval(imdp, path.arg, result, tol, max_iter)
        return check_next(imdp, phi, objective)
    if isinstance(path, Until):
        phi1 = _eval(imdp, path.left, result, tol, max_iter)
        phi2 = _eval(imdp, path.right, result, tol, max_iter)
        if path.bounded:
            return check_bounded_until(imdp, phi1, phi2, path.bound, objective)
        return check_unbounded_until(imdp, phi1, phi2, objective, tol, max_iter)
    raise TypeError(f"not a path formula: {path!r}")


def _eval(imdp, f, result, tol, max_iter):
    if isinstance(f, TrueFormula):
        return np.ones(imdp.n_states, dtype=bool)
    if isinstance(f, Atom):
        out = np.zeros(imdp.n_states, dtype=bool)
        for name in f.names:
            if name not in imdp.labels:
                raise CheckError(f"unknown atomic proposition {name!r}")
            out |= imdp.labels[name]
        return out
    if isinstance(f, Not):
        return ~_eval(imdp, f.arg, result, tol, max_iter)
    if isinstance(f, And):
        return _eval(imdp, f.left, result, tol, max_iter) & _eval(imdp, f.right, result, tol, max_iter)
    if isinstance(f, Prob):
        key = str(f)
        values, policy = check_path(imdp, f.path, _objective_for(f.op), result, tol, max_iter)
        side = values.lower if f.op in (">=", ">") else values.upper
        sat = _satisfies(f.op, f.bound, side)
        result.bounds[key] = values
        result.policies[key] = policy
        result.paths[key] = f.path
        return sat
    raise TypeError(f"not a state formula: {f!r}")


def evaluate(imdp, formula, tol=CONV_TOL, max_iter=MAX_ITER):
    """Satisfying states of a state formula, with bounds and policies per ``P`` subformula.

    ``P>=`` / ``P>`` use the best guaranteed lower bound; ``P<=`` / ``P<``
    use the smallest achievable worst-case upper bound.
    """
    result = Evaluation(sat=None)
    result.sat = _eval(imdp, formula, result, tol, max_iter)
    return result


def synthesize(imdp, path, tol=CONV_TOL, max_iter=MAX_ITER):
    """Policy maximising the worst-case probability of ``path``.

    Returns ``(policy, values)``.
    """
    values, policy = check_path(imdp, path, "max-lower", None, tol, max_iter)
    return policy, values
