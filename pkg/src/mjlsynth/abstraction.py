"""Interval MDP abstractions of a jump system.

Two ways of combining the per-mode abstractions are provided:

* :func:`product` for controlled jumps, where the abstract state is a
  (mode, region) pair and interval bounds multiply;
* :func:`robust_merge` for unknown jumps, where the state is a region only,
  an action must be enabled in every mode and intervals are hulled.
"""

import hashlib
import io
import json
from dataclasses import dataclass

import numpy as np

from .geometry import enabled_actions, robust_enabled_actions
from .scenario import TransitionTable, build_mode_transitions

FEAS_TOL = 1e-9
SELF_LOOP = -1


class AbstractionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class IntervalMdp:
    """Sparse interval MDP in compressed row form.

    State ``s`` owns choices ``choice_ptr[s]:choice_ptr[s+1]``; choice ``c``
    owns entries ``entry_ptr[c]:entry_ptr[c+1]``. A choice is labelled by its
    target action (``SELF_LOOP`` for the absorbing self-loop) and its jump
    action (``-1`` when there is none). Choices of a state are sorted by
    ``(jump, action)``.

    For product models state ``r * (p + 1) + s`` is region ``s`` in mode
    ``r``; ``state_mode`` is ``-1`` for mode-free models.
    """

    n_states: int
    state_mode: np.ndarray
    state_region: np.ndarray
    labels: dict
    absorbing: np.ndarray
    choice_ptr: np.ndarray
    choice_action: np.ndarray
    choice_jump: np.ndarray
    entry_ptr: np.ndarray
    entry_succ: np.ndarray
    entry_low: np.ndarray
    entry_high: np.ndarray

    @property
    def n_choices(self):
        return int(self.choice_ptr[-1])

    @property
    def n_transitions(self):
        return int(self.entry_ptr[-1])

    @property
    def choice_state(self):
        return np.repeat(np.arange(self.n_states), np.diff(self.choice_ptr))

    @property
    def entry_choice(self):
        return np.repeat(np.arange(self.n_choices), np.diff(self.entry_ptr))

    @property
    def is_product(self):
        return bool(np.any(self.state_mode >= 0))

    def state_id(self, region, mode=None):
        if mode is None or not self.is_product:
            return int(region)
        n_per_mode = self.n_states // (int(self.state_mode.max()) + 1)
        return int(mode) * n_per_mode + int(region)

    def choices_of(self, s):
        return range(self.choice_ptr[s], self.choice_ptr[s + 1])

    def row(self, c):
        sl = slice(self.entry_ptr[c], self.entry_ptr[c + 1])
        return self.entry_succ[sl], self.entry_low[sl], self.entry_high[sl]

    def action_label(self, c):
        a, l = int(self.choice_action[c]), int(self.choice_jump[c])
        if a == SELF_LOOP:
            return "loop"
        return f"{l}.{a}" if l >= 0 else str(a)

    def label_mask(self, prop):
        if prop not in self.labels:
            raise KeyError(f"unknown atomic proposition {prop!r}")
        return self.labels[prop]

    def check_feasible(self, tol=FEAS_TOL):
        """Every row must admit a distribution: ``sum low <= 1 <= sum high``."""
        ec = self.entry_choice
        slo = np.bincount(ec, self.entry_low, minlength=self.n_choices)
        shi = np.bincount(ec, self.entry_high, minlength=self.n_choices)
        bad = np.flatnonzero((slo > 1 + tol) | (shi < 1 - tol) | (np.diff(self.entry_ptr) == 0))
        if bad.size:
            c = int(bad[0])
            raise AbstractionError(
                f"choice {c} admits no distribution (sum low {slo[c]:.6g}, sum high {shi[c]:.6g})"
            )
        if np.any(self.entry_low < -tol) or np.any(self.entry_high > 1 + tol) or np.any(
            self.entry_low > self.entry_high + tol
        ):
            raise AbstractionError("interval bounds must satisfy 0 <= low <= high <= 1")

    @classmethod
    def from_rows(cls, rows, labels=None, absorbing=None):
        """Small iMDP from ``rows[s] = [(succ, low, high), ...]``, one tuple per action.

        Action ``k`` of a state gets target label ``k``; there are no jump
        actions. ``labels`` maps proposition -> state list or mask.
        """
        n = len(rows)
        cs, ca, ec, es, el, eh = [], [], [], [], [], []
        for s, acts in enumerate(rows):
            for k, (succ, low, high) in enumerate(acts):
                c = len(cs)
                cs.append(s)
                ca.append(k)
                ec.extend([c] * len(succ))
                es.extend(succ)
                el.extend(low)
                eh.extend(high)
        masks = {}
        for name, val in (labels or {}).items():
            val = np.asarray(val)
            if val.dtype != bool:
                m = np.zeros(n, dtype=bool)
                m[val.astype(np.int64)] = True
                val = m
            masks[name] = val
        absorbing = np.zeros(n, dtype=bool) if absorbing is None else np.asarray(absorbing, dtype=bool)
        return _assemble(n, np.full(n, -1), np.arange(n), masks, absorbing,
                         np.asarray(cs, dtype=np.int64), np.asarray(ca, dtype=np.int64),
                         np.full(len(cs), -1, dtype=np.int64), np.asarray(ec, dtype=np.int64),
                         np.asarray(es, dtype=np.int64), np.asarray(el, dtype=float),
                         np.asarray(eh, dtype=float))

    # -- persistence -----------------------------------------------------

    _ARRAYS = ("state_mode", "state_region", "absorbing", "choice_ptr", "choice_action",
               "choice_jump", "entry_ptr", "entry_succ", "entry_low", "entry_high")

    def save(self, path):
        arrays = {k: getattr(self, k) for k in self._ARRAYS}
        arrays.update({f"label__{k}": v for k, v in self.labels.items()})
        np.savez_compressed(path, n_states=np.int64(self.n_states), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            labels = {k[len("label__"):]: data[k] for k in data.files if k.startswith("label__")}
            kwargs = {k: data[k] for k in cls._ARRAYS}
            return cls(n_states=int(data["n_states"]), labels=labels, **kwargs)

    def digest(self):
        h = hashlib.sha256()
        for k in self._ARRAYS:
            h.update(np.ascontiguousarray(getattr(self, k)).tobytes())
        for k in sorted(self.labels):
            h.update(k.encode())
            h.update(self.labels[k].tobytes())
        return h.hexdigest()


def _assemble(n_states, state_mode, state_region, labels, absorbing,
              choice_state, choice_action, choice_jump,
              entry_choice, entry_succ, entry_low, entry_high):
    """Sort raw choice/entry lists into an :class:`IntervalMdp`."""
    corder = np.lexsort((choice_action, choice_jump, choice_state))
    new_id = np.empty_like(corder)
    new_id[corder] = np.arange(corder.size)
    choice_state = choice_state[corder]
    counts = np.bincount(choice_state, minlength=n_states)
    choice_ptr = np.concatenate([[0], np.cumsum(counts)])

    ec = new_id[entry_choice]
    eorder = np.argsort(ec, kind="stable")
    ecount = np.bincount(ec, minlength=corder.size)
    entry_ptr = np.concatenate([[0], np.cumsum(ecount)])
    return IntervalMdp(
        n_states=int(n_states),
        state_mode=np.asarray(state_mode, dtype=np.int64),
        state_region=np.asarray(state_region, dtype=np.int64),
        labels=labels,
        absorbing=np.asarray(absorbing, dtype=bool),
        choice_ptr=choice_ptr.astype(np.int64),
        choice_action=np.asarray(choice_action)[corder].astype(np.int64),
        choice_jump=np.asarray(choice_jump)[corder].astype(np.int64),
        entry_ptr=entry_ptr.astype(np.int64),
        entry_succ=np.asarray(entry_succ)[eorder].astype(np.int64),
        entry_low=np.asarray(entry_low, dtype=float)[eorder],
        entry_high=np.asarray(entry_high, dtype=float)[eorder],
    )


def _gather(ptr, lengths_of, rows):
    """Concatenate table segments ``rows`` (indices into ``ptr``) into one flat index."""
    starts = ptr[rows]
    lengths = lengths_of[rows]
    offsets = np.concatenate([[0], np.cumsum(lengths)])[:-1]
    idx = np.repeat(starts - offsets, lengths) + np.arange(lengths.sum())
    owner = np.repeat(np.arange(rows.size), lengths)
    return idx, owner


def _single_layer(partition, enabled, table):
    """iMDP over regions + absorbing with the enabled (region, action) pairs of ``table``."""
    p = partition.n_regions
    regions, acts = np.nonzero(enabled)
    rows = np.searchsorted(table.actions, acts)
    if np.any(rows >= table.actions.size) or np.any(table.actions[np.minimum(rows, table.actions.size - 1)] != acts):
        raise AbstractionError("transition table lacks an enabled action")
    idx, owner = _gather(table.ptr, np.diff(table.ptr), rows)
    n_ch = regions.size
    choice_state = np.append(regions, p)
    choice_action = np.append(acts, SELF_LOOP)
    choice_jump = np.full(n_ch + 1, -1)
    entry_choice = np.append(owner, n_ch)
    entry_succ = np.append(table.succ[idx], p)
    entry_low = np.append(table.low[idx], 1.0)
    entry_high = np.append(table.high[idx], 1.0)
    labels = {k: v.copy() for k, v in partition.labels.items()}
    absorbing = np.zeros(p + 1, dtype=bool)
    absorbing[p] = True
    return _assemble(p + 1, np.full(p + 1, -1), np.arange(p + 1), labels, absorbing,
                     choice_state, choice_action, choice_jump,
                     entry_choice, entry_succ, entry_low, entry_high)


def mode_imdp_from_table(partition, enabled, table):
    return _single_layer(partition, enabled, table)


def build_mode_imdp(spec, partition, targets, mode, W, beta, seed, enabled=None):
    """Abstract a single mode: regions + absorbing, enabled actions, sampled intervals."""
    if enabled is None:
        enabled = enabled_actions(spec, partition, targets, mode)
    used = np.flatnonzero(enabled.any(axis=0))
    table = build_mode_transitions(spec, partition, targets, mode, W, beta, seed, actions=used)
    return _single_layer(partition, enabled, table)


def product(jumps, mode_imdps):
    """Joint abstraction over (mode, region) for controlled jumps.

    The interval of ``((r, s), (l, a)) -> (r', s')`` is the jump interval
    ``(r, l, r')`` multiplied endpoint-wise with the continuous interval
    ``(s, a, s')`` of the current mode ``r``. Jumps with a zero upper bound
    are omitted; absorbing regions keep a ``[1, 1]`` self-loop.
    """
    N = len(mode_imdps)
    if jumps.kind != "controlled":
        raise AbstractionError("the product construction needs controlled jumps")
    if jumps.low.shape[0] != N:
        raise AbstractionError("number of mode iMDPs does not match the jump model")
    S = mode_imdps[0].n_states
    if any(m.n_states != S or m.is_product for m in mode_imdps):
        raise AbstractionError("mode iMDPs must share one region index space")
    L = jumps.n_actions

    cs, ca, cj = [], [], []
    es, el, eh, ec = [], [], [], []
    n_choices = 0
    for r, M in enumerate(mode_imdps):
        base = r * S
        m_state = M.choice_state
        loop = M.choice_action == SELF_LOOP
        act_ch = np.flatnonzero(~loop)
        # absorbing self-loops carry over unchanged
        for c in np.flatnonzero(loop):
            sl = slice(M.entry_ptr[c], M.entry_ptr[c + 1])
            cs.append([base + m_state[c]]); ca.append([SELF_LOOP]); cj.append([-1])
            k = M.entry_ptr[c + 1] - M.entry_ptr[c]
            es.append(base + M.entry_succ[sl]); el.append(M.entry_low[sl]); eh.append(M.entry_high[sl])
            ec.append(np.full(k, n_choices)); n_choices += 1
        if act_ch.size == 0:
            continue
        idx, owner = _gather(M.entry_ptr, np.diff(M.entry_ptr), act_ch)
        for l in range(L):
            ids = n_choices + np.arange(act_ch.size)
            cs.append(base + m_state[act_ch]); ca.append(M.choice_action[act_ch]); cj.append(np.full(act_ch.size, l))
            for r2 in range(N):
                jl, jh = jumps.low[r, l, r2], jumps.high[r, l, r2]
                if jh <= 0:
                    continue
                es.append(r2 * S + M.entry_succ[idx])
                el.append(jl * M.entry_low[idx])
                eh.append(np.minimum(jh * M.entry_high[idx], 1.0))
                ec.append(ids[owner])
            n_choices += act_ch.size

    labels = {k: np.tile(v, N) for k, v in mode_imdps[0].labels.items()}
    return _assemble(
        N * S,
        np.repeat(np.arange(N), S),
        np.tile(mode_imdps[0].state_region, N),
        labels,
        np.tile(mode_imdps[0].absorbing, N),
        np.concatenate(cs), np.concatenate(ca), np.concatenate(cj),
        np.concatenate(ec), np.concatenate(es), np.concatenate(el), np.concatenate(eh),
    )


def hull_tables(tables, actions):
    """Interval hull over modes, per action.

    A successor present in some modes only gets lower bound 0 (its mass in
    the other modes sits in their absorbing/remainder entry); upper bounds
    take the maximum over modes.
    """
    N = len(tables)
    ptr = [0]
    succ, low, high, count = [], [], [], []
    for a in actions:
        rows = [t.lookup(a) for t in tables]
        all_succ = np.unique(np.concatenate([r[0] for r in rows]))
        lo = np.full(all_succ.size, np.inf)
        hi = np.zeros(all_succ.size)
        seen = np.zeros(all_succ.size, dtype=np.int64)
        for s, l, h in rows:
            pos = np.searchsorted(all_succ, s)
            lo[pos] = np.minimum(lo[pos], l)
            hi[pos] = np.maximum(hi[pos], h)
            seen[pos] += 1
        lo[seen < N] = 0.0
        succ.append(all_succ); low.append(lo); high.append(hi); count.append(seen)
        ptr.append(ptr[-1] + all_succ.size)
    cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt))
    return TransitionTable(
        actions=np.asarray(actions, dtype=np.int64),
        ptr=np.asarray(ptr, dtype=np.int64),
        succ=cat(succ, np.int64),
        count=cat(count, np.int64),
        low=cat(low, float),
        high=cat(high, float),
        n_samples=tables[0].n_samples,
    )


def robust_merge(spec, partition, targets, tables, robust_enabled=None):
    """Mode-free abstraction that is sound for any mode sequence.

    ``tables`` holds one :class:`TransitionTable` per mode covering every
    action enabled under all modes.
    """
    if robust_enabled is None:
        robust_enabled = robust_enabled_actions(spec, partition, targets)
    used = np.flatnonzero(robust_enabled.any(axis=0))
    hull = hull_tables(tables, used)
    return _single_layer(partition, robust_enabled, hull)


@dataclass
class Abstraction:
    """Everything built for one (model, partition, W, beta, seed) tuple."""

    imdp: IntervalMdp
    targets: np.ndarray
    enabled: list
    tables: list
    kind: str


def build_abstraction(spec, partition, W, beta, seed, jumps="product", targets=None):
    """Build per-mode tables and combine them into one iMDP.

    ``jumps`` is ``"product"`` (controlled jumps) or ``"robust"``.
    Every mode samples the same set of actions (those enabled in any mode),
    so the robust hull and the product share the same per-mode data.
    """
    if targets is None:
        targets = partition.centers
    enabled = [enabled_actions(spec, partition, targets, r) for r in range(spec.n_modes)]
    if jumps == "product":
        used = np.flatnonzero(np.any([E.any(axis=0) for E in enabled], axis=0))
    elif jumps == "robust":
        robust = robust_enabled_actions(spec, partition, targets, enabled)
        used = np.flatnonzero(robust.any(axis=0))
    else:
        raise ValueError(f"jumps must be 'product' or 'robust', got {jumps!r}")
    tables = [build_mode_transitions(spec, partition, targets, r, W, beta, seed, actions=used)
              for r in range(spec.n_modes)]
    if jumps == "product":
        mode_imdps = [_single_layer(partition, E, t) for E, t in zip(enabled, tables)]
        imdp = product(spec.jumps, mode_imdps)
    else:
        imdp = robust_merge(spec, partition, targets, tables, robust)
    return Abstraction(imdp, np.asarray(targets), enabled, tables, jumps)


def export_prism(imdp, fh=None):
    """Write one ``s a s' [low,high]`` line per transition.

    Actions are written as ``jump.target`` for product models, ``target``
    otherwise and ``loop`` for absorbing self-loops. Returns the text when
    ``fh`` is None.
    """
    out = io.StringIO() if fh is None else fh
    succ, low, high = imdp.entry_succ, imdp.entry_low, imdp.entry_high
    for s in range(imdp.n_states):
        for c in imdp.choices_of(s):
            a = imdp.action_label(c)
            for e in range(imdp.entry_ptr[c], imdp.entry_ptr[c + 1]):
                out.write(f"{s} {a} {int(succ[e])} [{float(low[e])!r},{float(high[e])!r}]\n")
    if fh is None:
        return out.getvalue()
    return None


def imdp_summary(imdp):
    return json.dumps({"states": imdp.n_states, "choices": imdp.n_choices,
                       "transitions": imdp.n_transitions})
