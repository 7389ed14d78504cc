"""Markov jump linear system models: data types, parsing, validation.

A model is a finite set of affine modes ``x' = A_r x + B_r u + q_r + w_r``
sharing a box input set, a noise source per mode and a description of how
the mode jumps (either an interval MDP over modes, or unknown).
"""

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from ._validation import check_box, check_matrix, check_positive_int, check_random_state, check_vector

DET_TOL = 1e-10
RANK_TOL = 1e-10


class ModelError(ValueError):
    """Raised for malformed or invalid model documents."""


class ModelSyntaxError(ModelError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class DimensionError(ModelError):
    pass


class RankDeficiencyError(ModelError):
    pass


class SingularDynamicsError(ModelError):
    pass


class InfeasibleJumpError(ModelError):
    pass


@dataclass(frozen=True, eq=False)
class ModeDynamics:
    A: np.ndarray
    B: np.ndarray
    q: np.ndarray
    name: str = ""

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def successor(self, x, u):
        """Noiseless successor ``A x + B u + q`` (batched over leading axes)."""
        return x @ self.A.T + u @ self.B.T + self.q


@dataclass(frozen=True, eq=False)
class NoiseSource:
    """Additive noise of one mode.

    ``lift`` is a tuple of ``n x n`` matrices ``(M_0, ..., M_{h-1})``; when
    present a draw is ``sum_j M_j w_j`` over ``h`` independent base draws.
    This is how grouped multi-step models carry their aggregate noise.
    """

    kind: str
    mean: np.ndarray = None
    std: np.ndarray = None
    path: str = None
    samples: np.ndarray = None
    lift: tuple = None

    @property
    def dim(self):
        if self.kind == "gaussian":
            return self.mean.shape[0]
        return self.samples.shape[1]

    def _draw_base(self, rng, count):
        if self.kind == "gaussian":
            return rng.normal(self.mean, self.std, size=(count, self.dim))
        idx = rng.integers(0, self.samples.shape[0], size=count)
        return self.samples[idx]

    def draw(self, rng, count):
        if self.lift is None:
            return self._draw_base(rng, count)
        out = np.zeros((count, self.lift[0].shape[0]))
        for M in self.lift:
            out += self._draw_base(rng, count) @ M.T
        return out


@dataclass(frozen=True, eq=False)
class JumpSpec:
    """Mode-jump description.

    For ``kind == "controlled"``, ``low``/``high`` have shape
    ``(N, L, N)`` and hold the interval ``[low, high]`` of jumping from mode
    ``r`` to ``r'`` under jump action ``l``; a zero upper bound means the
    jump is absent. ``true_probs`` (same shape) is the ground truth used
    only by the simulator.
    """

    kind: str
    actions: tuple = ()
    low: np.ndarray = None
    high: np.ndarray = None
    true_probs: np.ndarray = None

    @property
    def n_actions(self):
        return len(self.actions)

    def simulation_probs(self):
        if self.true_probs is not None:
            return self.true_probs
        mid = 0.5 * (self.low + self.high)
        tot = mid.sum(axis=2, keepdims=True)
        return np.divide(mid, tot, out=np.zeros_like(mid), where=tot > 0)


@dataclass(frozen=True, eq=False)
class MjlsSpec:
    modes: tuple
    input_box: np.ndarray
    noise: tuple
    jumps: JumpSpec
    steps: int = 1
    source: str = field(default="", repr=False)

    @property
    def n(self):
        return self.modes[0].n

    @property
    def m(self):
        return self.modes[0].m

    @property
    def n_modes(self):
        return len(self.modes)


_TOP_KEYS = {"n", "m", "modes", "input_box", "noise", "jumps"}
_MODE_KEYS = {"A", "B", "q", "noise", "name"}
_NOISE_KEYS = {"kind", "mean", "std", "path"}
_JUMP_KEYS = {"kind", "actions", "intervals", "true"}


def _reject_unknown(section, allowed, where):
    unknown = set(section) - allowed
    if unknown:
        raise ModelError(f"unknown field(s) {sorted(unknown)} in {where}")


def _parse_noise(doc, n, base_dir, where):
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ModelError(f"{where} must be a mapping with a 'kind'")
    _reject_unknown(doc, _NOISE_KEYS, where)
    kind = doc["kind"]
    if kind == "gaussian":
        mean = check_vector(doc.get("mean", np.zeros(n)), n, f"{where}.mean")
        std = np.broadcast_to(np.asarray(doc.get("std", 0.0), dtype=float), (n,)).copy()
        if np.any(std < 0):
            raise ModelError(f"{where}.std must be non-negative")
        return NoiseSource("gaussian", mean=mean, std=std)
    if kind == "empirical":
        if "path" not in doc:
            raise ModelError(f"{where} of kind 'empirical' needs a 'path'")
        path = Path(doc["path"])
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        return NoiseSource("empirical", path=str(path), samples=load_noise_samples(path, n))
    raise ModelError(f"{where}.kind must be 'gaussian' or 'empirical', got {kind!r}")


def load_noise_samples(path, n):
    """Read a header-less CSV of noise vectors (one per row)."""
    path = Path(path)
    if not path.is_file():
        raise ModelError(f"noise sample file not found: {path}")
    samples = np.loadtxt(path, delimiter=",", ndmin=2)
    if samples.shape[1] != n or samples.shape[0] == 0:
        raise DimensionError(f"noise samples in {path} must have {n} columns, got shape {samples.shape}")
    return samples


def _parse_jumps(doc, n_modes):
    if doc is None:
        doc = {"kind": "unknown"}
    _reject_unknown(doc, _JUMP_KEYS, "jumps")
    kind = doc.get("kind")
    if kind == "unknown":
        return JumpSpec("unknown")
    if kind != "controlled":
        raise ModelError(f"jumps.kind must be 'controlled' or 'unknown', got {kind!r}")
    actions = tuple(str(a) for a in doc.get("actions", ["default"]))
    L = len(actions)
    low = np.zeros((n_modes, L, n_modes))
    high = np.zeros((n_modes, L, n_modes))

    def action_index(a):
        if isinstance(a, str):
            if a not in actions:
                raise ModelError(f"unknown jump action {a!r}")
            return actions.index(a)
        if not 0 <= int(a) < L:
            raise ModelError(f"jump action index {a} out of range")
        return int(a)

    def mode_index(r):
        if not 0 <= int(r) < n_modes:
            raise ModelError(f"mode index {r} out of range")
        return int(r)

    for row in doc.get("intervals", []):
        if len(row) != 5:
            raise ModelError(f"jump interval rows need (r, l, r', low, high), got {row!r}")
        r, l, r2 = mode_index(row[0]), action_index(row[1]), mode_index(row[2])
        low[r, l, r2], high[r, l, r2] = float(row[3]), float(row[4])
    true_probs = None
    if "true" in doc:
        true_probs = np.zeros_like(low)
        for row in doc["true"]:
            r, l, r2 = mode_index(row[0]), action_index(row[1]), mode_index(row[2])
            true_probs[r, l, r2] = float(row[3])
    return JumpSpec("controlled", actions=actions, low=low, high=high, true_probs=true_probs)


def parse_model(text, base_dir=None):
    """Parse a YAML/JSON model document into an :class:`MjlsSpec`.

    Matrices may be given as nested row lists or as flat row-major lists.
    The result is not validated; call :func:`validate` before use.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        line = mark.line + 1 if mark is not None else None
        col = mark.column + 1 if mark is not None else None
        raise ModelSyntaxError(f"syntax error: {exc.problem}", line, col) from exc
    if not isinstance(doc, dict):
        raise ModelSyntaxError("model document must be a mapping")
    _reject_unknown(doc, _TOP_KEYS, "model")
    for key in ("n", "m", "modes", "input_box"):
        if key not in doc:
            raise ModelError(f"missing required field {key!r}")
    n, m = int(doc["n"]), int(doc["m"])
    if n < 1 or m < 1:
        raise DimensionError("n and m must be positive")
    if not doc["modes"]:
        raise ModelError("at least one mode is required")

    shared_noise = doc.get("noise")
    modes, noise = [], []
    for i, md in enumerate(doc["modes"]):
        where = f"modes[{i}]"
        if not isinstance(md, dict):
            raise ModelError(f"{where} must be a mapping")
        _reject_unknown(md, _MODE_KEYS, where)
        try:
            A = check_matrix(md["A"], (n, n), f"{where}.A")
            B = check_matrix(md["B"], (n, m), f"{where}.B")
            q = check_vector(md.get("q", np.zeros(n)), n, f"{where}.q")
        except KeyError as exc:
            raise ModelError(f"{where} is missing {exc.args[0]!r}") from None
        except ValueError as exc:
            raise DimensionError(str(exc)) from None
        modes.append(ModeDynamics(A, B, q, name=str(md.get("name", f"mode{i}"))))
        nd = md.get("noise", shared_noise)
        if nd is None:
            raise ModelError(f"{where} has no noise source (set 'noise' globally or per mode)")
        noise.append(_parse_noise(nd, n, base_dir, f"{where}.noise"))
    try:
        input_box = check_box(doc["input_box"], m, "input_box")
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    jumps = _parse_jumps(doc.get("jumps"), len(modes))
    return MjlsSpec(tuple(modes), input_box, tuple(noise), jumps, source=text)


def load_model(path):
    path = Path(path)
    return parse_model(path.read_text(encoding="utf-8"), base_dir=path.parent)


def validate(spec):
    """Check the structural assumptions the abstraction relies on.

    Every ``B_i`` must have full row rank and every ``A_i`` must be
    invertible; controlled jump intervals must admit a distribution.
    Returns ``spec`` unchanged on success.
    """
    n, m = spec.n, spec.m
    for i, mode in enumerate(spec.modes):
        if mode.A.shape != (n, n) or mode.B.shape != (n, m) or mode.q.shape != (n,):
            raise DimensionError(f"mode {i} ({mode.name}) has inconsistent dimensions")
        sv = np.linalg.svd(mode.B, compute_uv=False)
        rank = int(np.sum(sv > RANK_TOL * max(sv.max(), 0.0))) if sv.max() > 0 else 0
        if rank < n:
            raise RankDeficiencyError(f"B of mode {i} ({mode.name}) has rank {rank} < n = {n}")
        if abs(np.linalg.det(mode.A)) <= DET_TOL:
            raise SingularDynamicsError(f"A of mode {i} ({mode.name}) is singular")
    if spec.input_box.shape != (m, 2) or np.any(spec.input_box[:, 0] > spec.input_box[:, 1]):
        raise DimensionError("input_box must be a non-empty box of dimension m")
    for i, ns in enumerate(spec.noise):
        if ns.dim != n:
            raise DimensionError(f"noise of mode {i} has dimension {ns.dim}, expected {n}")
    jumps = spec.jumps
    if jumps.kind == "controlled":
        N = spec.n_modes
        if jumps.low.shape != (N, jumps.n_actions, N):
            raise DimensionError("jump interval table does not match the number of modes")
        if np.any(jumps.low < 0) or np.any(jumps.high > 1) or np.any(jumps.low > jumps.high):
            raise InfeasibleJumpError("jump intervals must satisfy 0 <= low <= high <= 1")
        slo, shi = jumps.low.sum(axis=2), jumps.high.sum(axis=2)
        bad = np.argwhere((slo > 1 + 1e-12) | (shi < 1 - 1e-12))
        if bad.size:
            r, l = bad[0]
            raise InfeasibleJumpError(
                f"jump intervals of mode {r}, action {jumps.actions[l]!r} admit no distribution "
                f"(sum low = {slo[r, l]:.6g}, sum high = {shi[r, l]:.6g})"
            )
        if jumps.true_probs is not None:
            tp = jumps.true_probs
            if np.any(tp < jumps.low - 1e-12) or np.any(tp > jumps.high + 1e-12):
                raise InfeasibleJumpError("true jump probabilities must lie inside the intervals")
            if not np.allclose(tp.sum(axis=2), 1.0):
                raise InfeasibleJumpError("true jump probabilities must sum to one")
    return spec


def group_steps(spec, h):
    """Lift ``spec`` to a model whose single step spans ``h`` original steps.

    The grouped mode has ``A^h``, ``[A^{h-1} B | ... | B]`` and
    ``sum_j A^j q``; the input box is repeated ``h`` times and the noise of
    one grouped step is the sum of ``h`` independent per-step draws pushed
    through the matching powers of ``A``. Mode jumps happen at grouped-step
    boundaries.
    """
    h = check_positive_int(h, "h")
    if h == 1:
        return spec
    modes, noise = [], []
    for mode, ns in zip(spec.modes, spec.noise):
        powers = [np.eye(mode.n)]
        for _ in range(h):
            powers.append(powers[-1] @ mode.A)
        B_bar = np.hstack([powers[h - 1 - j] @ mode.B for j in range(h)])
        q_bar = sum(powers[j] @ mode.q for j in range(h))
        modes.append(ModeDynamics(powers[h], B_bar, q_bar, name=mode.name))
        base_lift = ns.lift if ns.lift is not None else (np.eye(mode.n),)
        lift = tuple(powers[h - 1 - j] @ M for j in range(h) for M in base_lift)
        noise.append(replace(ns, lift=lift))
    input_box = np.vstack([spec.input_box] * h)
    return replace(spec, modes=tuple(modes), input_box=input_box, noise=tuple(noise), steps=spec.steps * h)


def draw_noise(spec, mode, count, seed=None):
    """Draw ``count`` i.i.d. noise vectors of ``mode`` as a ``(count, n)`` array."""
    if not 0 <= mode < spec.n_modes:
        raise IndexError(f"mode {mode} out of range")
    count = check_positive_int(count, "count")
    return spec.noise[mode].draw(check_random_state(seed), count)
