"""Continuous controllers from abstract policies, and closed-loop simulation."""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear
from scipy.stats import binomtest

from ._validation import check_positive_int, check_random_state, check_vector
from .abstraction import SELF_LOOP
from .geometry import label_state

RESIDUAL_TOL = 1e-8
BOX_TOL = 1e-9


class InfeasibleInputError(ValueError):
    """No admissible input steers the state to the requested target."""


def compute_input(mode, input_box, x, d):
    """Input ``u`` in the box with ``A x + B u + q = d``.

    The minimum-norm solution is used when it is admissible; otherwise a
    box-constrained least-squares problem is solved. Raises
    :class:`InfeasibleInputError` when no admissible input reaches ``d``.
    """
    x = check_vector(x, mode.n, "x")
    d = check_vector(d, mode.n, "d")
    box = np.asarray(input_box, dtype=float)
    rhs = d - mode.A @ x - mode.q
    u = np.linalg.pinv(mode.B) @ rhs
    if np.max(np.abs(mode.B @ u - rhs)) > RESIDUAL_TOL:
        raise InfeasibleInputError("target is not reachable: B u = d - A x - q has no solution")
    if np.all(u >= box[:, 0] - BOX_TOL) and np.all(u <= box[:, 1] + BOX_TOL):
        return np.clip(u, box[:, 0], box[:, 1])
    res = lsq_linear(mode.B, rhs, bounds=(box[:, 0], box[:, 1]), tol=1e-12, lsmr_tol="auto")
    u = np.clip(res.x, box[:, 0], box[:, 1])
    if np.max(np.abs(mode.B @ u - rhs)) > RESIDUAL_TOL:
        raise InfeasibleInputError(f"state {x} is outside the backward reachable set of {d}")
    return u


def compute_inputs(mode, input_box, X, D):
    """Batched :func:`compute_input`; falls back to the scalar solver row by row."""
    box = np.asarray(input_box, dtype=float)
    rhs = D - X @ mode.A.T - mode.q
    U = rhs @ np.linalg.pinv(mode.B).T
    ok = np.all((U >= box[:, 0] - BOX_TOL) & (U <= box[:, 1] + BOX_TOL), axis=1)
    ok &= np.max(np.abs(U @ mode.B.T - rhs), axis=1) <= RESIDUAL_TOL
    U = np.clip(U, box[:, 0], box[:, 1])
    for i in np.flatnonzero(~ok):
        U[i] = compute_input(mode, box, X[i], D[i])
    return U


@dataclass
class Decision:
    """Output of a controller at one step.

    ``status`` is None while acting, otherwise ``"satisfied"`` or
    ``"violated"``; ``jump`` is None for mode-free (robust) controllers.
    """

    u: np.ndarray = None
    jump: int = None
    target: np.ndarray = None
    status: str = None


@dataclass
class Controller:
    """Feedback law ``(x, r, k) -> (u, l)`` backed by an abstract policy.

    ``phi1``/``phi2`` are the state masks of the path formula being
    enforced (reach ``phi2`` while staying in ``phi1``); the controller
    reports a terminal status once the formula is decided.
    """

    spec: object
    partition: object
    imdp: object
    policy: object
    targets: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray
    horizon: int = None
    kind: str = "until"

    def state_of(self, x, r):
        region = label_state(self.partition, x)
        return self.imdp.state_id(region, r), region

    def act(self, x, r, k):
        s, region = self.state_of(x, r)
        if self.kind == "next":
            if k >= 1:
                return Decision(status="satisfied" if self.phi2[s] else "violated")
        else:
            if self.phi2[s]:
                return Decision(status="satisfied")
            if not self.phi1[s] or self.imdp.absorbing[s]:
                return Decision(status="violated")
            if self.horizon is not None and k >= self.horizon:
                return Decision(status="violated")
        c = self.policy.choice(s, k)
        if c < 0 or self.imdp.choice_action[c] == SELF_LOOP:
            return Decision(status="violated")
        a = int(self.imdp.choice_action[c])
        d = self.targets[a]
        u = compute_input(self.spec.modes[r], self.spec.input_box, x, d)
        l = int(self.imdp.choice_jump[c])
        return Decision(u=u, jump=l if l >= 0 else None, target=d)


def controller_from_evaluation(spec, partition, abstraction, evaluation, key):
    """Build a :class:`Controller` for the ``P`` subformula ``key`` of an evaluation."""
    from .checker import _eval
    from .pctl import Next

    path = evaluation.paths[key]
    policy = evaluation.policies[key]
    imdp = abstraction.imdp
    scratch = type(evaluation)(sat=None)
    if isinstance(path, Next):
        phi2 = _eval(imdp, path.arg, scratch, 1e-6, 100_000)
        phi1 = np.ones(imdp.n_states, dtype=bool)
        return Controller(spec, partition, imdp, policy, abstraction.targets, phi1, phi2, 1, "next")
    phi1 = _eval(imdp, path.left, scratch, 1e-6, 100_000)
    phi2 = _eval(imdp, path.right, scratch, 1e-6, 100_000)
    return Controller(spec, partition, imdp, policy, abstraction.targets, phi1, phi2,
                      path.bound, "until")


@dataclass
class Trace:
    steps: list = field(default_factory=list)
    status: str = None

    def write_csv(self, fh, n, m, trial=0, header=True):
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow(["trial", "k"] + [f"x{i}" for i in range(n)] + ["r"]
                            + [f"u{i}" for i in range(m)] + ["l", "region", "status"])
        for k, x, r, u, l, region in self.steps:
            u = [""] * m if u is None else [repr(float(v)) for v in u]
            writer.writerow([trial, k] + [repr(float(v)) for v in x] + [r] + u
                            + ["" if l is None else l, region, self.status])


@dataclass
class SimulationResult:
    satisfied: int
    trials: int
    traces: list

    @property
    def frequency(self):
        return self.satisfied / self.trials

    @property
    def wilson(self):
        ci = binomtest(self.satisfied, self.trials).proportion_ci(0.95, method="wilson")
        return ci.low, ci.high


def _next_modes(spec, r, l, k, rng, jump_probs, mode_script):
    if mode_script is not None:
        if callable(mode_script):
            return np.asarray(mode_script(k, r, rng), dtype=np.int64)
        seq = np.asarray(mode_script, dtype=np.int64)
        return np.full(r.shape, seq[min(k + 1, seq.size - 1)])
    if spec.jumps.kind != "controlled":
        raise ValueError("simulating unknown jumps needs a mode_script")
    probs = jump_probs if jump_probs is not None else spec.jumps.simulation_probs()
    ll = np.where(l < 0, 0, l)
    cdf = np.cumsum(probs[r, ll], axis=1)
    draw = rng.random(r.size)[:, None]
    nxt = np.minimum((draw >= cdf).sum(axis=1), spec.n_modes - 1)
    return nxt


def simulate(spec, controller, x0, r0, trials, seed=None, jump_probs=None, mode_script=None,
             n_traces=10):
    """Monte Carlo closed-loop rollouts of the true jump system.

    Parameters
    ----------
    spec : MjlsSpec
        Ground-truth dynamics (noise is re-sampled at every step).
    controller : Controller
    x0, r0 : initial continuous state and mode.
    trials : int
    seed : int or Generator
    jump_probs : array of shape (N, L, N), optional
        True jump probabilities for controlled jumps; defaults to the
        normalised interval midpoints of the model.
    mode_script : sequence or callable, optional
        Mode sequence for uncontrolled switching: either ``modes[k]`` per
        step or ``f(k, modes, rng) -> next modes``. Overrides jump sampling.

    Returns
    -------
    SimulationResult
        Satisfaction count and the traces of the first ``n_traces`` trials.
    """
    trials = check_positive_int(trials, "trials")
    rng = check_random_state(seed)
    n = spec.n
    X = np.tile(check_vector(x0, n, "x0"), (trials, 1))
    R = np.full(trials, int(r0), dtype=np.int64)
    status = np.full(trials, "", dtype=object)
    alive = np.ones(trials, dtype=bool)
    keep = min(n_traces, trials)
    traces = [Trace() for _ in range(keep)]
    horizon = controller.horizon if controller.horizon is not None else 10_000
    imdp = controller.imdp

    k = 0
    while alive.any():
        regions = label_state(controller.partition, X)
        states = np.where(imdp.is_product, R * (controller.partition.n_regions + 1) + regions, regions)
        idx = np.flatnonzero(alive)
        s = states[idx]
        if controller.kind == "next":
            if k >= 1:
                done_sat, done_vio = controller.phi2[s], ~controller.phi2[s]
            else:
                done_sat = done_vio = np.zeros(idx.size, dtype=bool)
        else:
            done_sat = controller.phi2[s]
            done_vio = ~done_sat & (~controller.phi1[s] | imdp.absorbing[s] | (k >= horizon))
        choice = np.full(idx.size, -1, dtype=np.int64)
        undecided = ~(done_sat | done_vio)
        if undecided.any():
            if controller.policy.stationary:
                choice[undecided] = controller.policy.table[s[undecided]]
            else:
                choice[undecided] = controller.policy.table[min(k, horizon - 1), s[undecided]]
        no_action = undecided & ((choice < 0) | (imdp.choice_action[np.maximum(choice, 0)] == SELF_LOOP))
        done_vio |= no_action
        status[idx[done_sat]] = "satisfied"
        status[idx[done_vio]] = "violated"
        act = idx[~(done_sat | done_vio)]
        ch = choice[~(done_sat | done_vio)]

        U = np.zeros((act.size, spec.m))
        L = imdp.choice_jump[ch] if act.size else np.zeros(0, dtype=np.int64)
        D = controller.targets[imdp.choice_action[ch]] if act.size else np.zeros((0, n))
        Xn = X.copy()
        for r in range(spec.n_modes):
            sel = R[act] == r
            if not sel.any():
                continue
            md = spec.modes[r]
            ids = act[sel]
            U[sel] = compute_inputs(md, spec.input_box, X[ids], D[sel])
            w = spec.noise[r].draw(rng, ids.size)
            Xn[ids] = X[ids] @ md.A.T + U[sel] @ md.B.T + md.q + w
        for t in range(keep):
            if alive[t]:
                pos = np.searchsorted(act, t)
                acting = pos < act.size and act[pos] == t
                traces[t].steps.append((k, X[t].copy(), int(R[t]),
                                        U[pos].copy() if acting else None,
                                        (int(L[pos]) if acting and L[pos] >= 0 else None),
                                        int(regions[t])))
        if act.size:
            R_new = R.copy()
            R_new[act] = _next_modes(spec, R[act], L, k, rng, jump_probs, mode_script)
            R = R_new
        X = Xn
        alive[idx[done_sat | done_vio]] = False
        k += 1
    for t in range(keep):
        traces[t].status = status[t]
    return SimulationResult(int(np.sum(status == "satisfied")), trials, traces)
