"""Acceptance criteria 1-9, one test each.

Every test records a PASS/FAIL line that the terminal summary prints
(see ``conftest.pytest_terminal_summary``).
"""

import contextlib
import json
import time

import numpy as np
import pytest

from conftest import bench_path
from mjlsynth.abstraction import IntervalMdp, build_abstraction, export_prism
from mjlsynth.checker import check_bounded_until, check_next, evaluate, robust_expectation
from mjlsynth.cli import EXIT_OK, Stage, load_config, run_pipeline
from mjlsynth.geometry import build_partition, robust_enabled_actions
from mjlsynth.model import group_steps, load_model, parse_model, validate
from mjlsynth.pctl import parse_formula
from mjlsynth.runtime import controller_from_evaluation, simulate
from mjlsynth.scenario import build_mode_transitions, pac_bounds, pac_interval, pac_table
from oracles import (enumerate_bounded_until, gaussian_box_prob, lp_cell_enabled, lp_expectation,
                     pac_oracle)
from test_checker import random_imdp, random_row

RESULTS = {}

REACH = "P>=0.5 [ (!Tc) U<=32 Tg ]"
RICH = "P>=0.6 [ X P<=0.5 [ (!Tc) U<=31 (Tl | Tc) ] ] & P>=0.9 [ (!Tc) U<=32 Tg ]"
SLACK = 0.02


@contextlib.contextmanager
def criterion(n, title):
    detail = {}
    t0 = time.perf_counter()
    try:
        yield detail
    except BaseException as exc:
        RESULTS[n] = f"criterion {n} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        raise
    info = ", ".join(f"{k}={v}" for k, v in detail.items())
    RESULTS[n] = f"criterion {n} PASS  {title} ({info}; {time.perf_counter() - t0:.1f}s)"


def gaussian_grid_spec(std):
    return validate(parse_model(f"""
n: 2
m: 2
modes:
  - {{A: [[1, 0], [0, 1]], B: [[1, 0], [0, 1]]}}
input_box: [[-1, 1], [-1, 1]]
noise: {{kind: gaussian, mean: [0, 0], std: {std}}}
"""))


def random_two_mode_spec(rng):
    modes = []
    for _ in range(2):
        A = np.eye(2) + rng.uniform(-0.2, 0.2, (2, 2))
        B = rng.uniform(-1, 1, (2, 2)) + np.eye(2)
        q = rng.uniform(-0.1, 0.1, 2)
        modes.append(f"{{A: {A.tolist()}, B: {B.tolist()}, q: {q.tolist()}}}")
    return validate(parse_model(f"n: 2\nm: 2\nmodes: [{', '.join(modes)}]\n"
                                "input_box: [[-1, 1], [-1, 1]]\nnoise: {kind: gaussian, std: 0.0}\n"))


def region_grid(partition):
    return np.stack(np.unravel_index(np.arange(partition.n_regions), partition.counts), axis=1)


def soundness(spec, partition, ab, ev, key, states, trials, seed, **kw):
    """(state, lower, frequency) per sampled abstract state, starting at the cell centre."""
    ctrl = controller_from_evaluation(spec, partition, ab, ev, key)
    imdp = ab.imdp
    out = []
    for i, s in enumerate(states):
        r = max(int(imdp.state_mode[s]), 0)
        x0 = partition.centers[imdp.state_region[s]]
        res = simulate(spec, ctrl, x0, r, trials, seed=seed + i, **kw)
        out.append((int(s), float(ev.bounds[key].lower[s]), res.frequency))
    return out


# -- shared pipeline runs ---------------------------------------------------


def pipeline(out):
    cfg = load_config(bench_path("temperature_run.yaml"), out=str(out))
    t0 = time.perf_counter()
    status, manifest = run_pipeline(cfg)
    elapsed = time.perf_counter() - t0
    stage = Stage(cfg)
    ab, cached = stage.abstraction(manifest["final_W"], out / "cache")
    assert cached
    ev = evaluate(ab.imdp, stage.formula)
    return dict(cfg=cfg, status=status, manifest=manifest, seconds=elapsed, stage=stage, ab=ab, ev=ev, out=out)


@pytest.fixture(scope="module")
def temp_run(tmp_path_factory):
    return pipeline(tmp_path_factory.mktemp("temperature-a"))


# -- criteria ---------------------------------------------------------------


def test_c1_pac_coverage():
    with criterion(1, "PAC interval coverage") as d:
        t0 = time.perf_counter()
        std, W, beta, draws = 0.2, 100, 0.1, 500
        spec = gaussian_grid_spec(std)
        part = build_partition([[0, 1.75], [0, 1.75]], [10, 10])
        a = int(np.ravel_multi_index((5, 5), (10, 10)))
        target = part.centers[a]
        truth = np.array([gaussian_box_prob(target, std, *part.region_box(j)) for j in range(part.n_regions)])
        truth = np.append(truth, 1.0 - truth.sum())
        low_tab, high_tab = pac_table(W, beta)
        covered = np.zeros((draws, truth.size), dtype=bool)
        for t in range(draws):
            table = build_mode_transitions(spec, part, part.centers, 0, W, beta, seed=t, actions=[a])
            counts = np.zeros(truth.size, dtype=np.int64)
            counts[table.succ] = table.count
            low, high = low_tab[W - counts], high_tab[W - counts]
            covered[t] = (low <= truth) & (truth <= high)
        per = covered.mean(axis=0)
        joint = covered.all(axis=1).mean()
        elapsed = time.perf_counter() - t0
        d.update(min_per_transition=f"{per.min():.3f}", simultaneous=f"{joint:.3f}")
        assert per.min() >= 0.86, f"worst transition coverage {per.min():.3f}"
        assert joint >= 0.86, f"simultaneous coverage {joint:.3f}"
        assert elapsed < 60


def test_c2_pac_endpoints():
    with criterion(2, "PAC endpoints against high-precision oracle") as d:
        for W in (1, 25, 100, 400):
            assert pac_interval(W, W, 0.01).low == 0.0
            assert pac_interval(W, 0, 0.01).high == 1.0
        worst = 0.0
        lib_seconds = 0.0
        for W in (25, 100, 400):
            grid = sorted({0, 1, 2, 3, W // 10, W // 4, W // 2, 3 * W // 4, W - 3, W - 2, W - 1, W})
            for beta in (0.01, 0.1):
                t0 = time.perf_counter()
                low, high = pac_bounds(W, np.array(grid), beta)
                lib_seconds += time.perf_counter() - t0
                for k, lo, hi in zip(grid, low, high):
                    olo, ohi = pac_oracle(W, k, beta, dps=40, iters=64)
                    worst = max(worst, abs(lo - olo), abs(hi - ohi))
        d.update(max_abs_err=f"{worst:.1e}", library_seconds=f"{lib_seconds:.2f}")
        assert worst <= 1e-7
        assert lib_seconds < 10


def test_c3_robust_enabled_sets(temp_spec, temp_partition):
    with criterion(3, "robust enabled actions equal per-mode LP feasibility") as d:
        t0 = time.perf_counter()
        rng = np.random.default_rng(3)
        systems = [(temp_spec, temp_partition)]
        part = build_partition([[-2, 2], [-2, 2]], [8, 8])
        systems += [(random_two_mode_spec(rng), part) for _ in range(3)]
        mismatches = probes = enabled_probes = 0
        for spec, P in systems:
            R = robust_enabled_actions(spec, P, P.centers)
            on = np.argwhere(R)
            picks = [tuple(on[i]) for i in rng.choice(len(on), min(100, len(on)), replace=False)]
            picks += [tuple(rng.integers(0, P.n_regions, 2)) for _ in range(200 - len(picks))]
            for i, j in picks:
                oracle = lp_cell_enabled(spec.modes, spec.input_box, P.region_vertices(i), P.centers[j])
                mismatches += bool(R[i, j]) != oracle
                enabled_probes += oracle
                probes += 1
        d.update(probes=probes, enabled=enabled_probes, mismatches=mismatches)
        assert mismatches == 0
        assert time.perf_counter() - t0 < 30


def test_c4_value_iteration_oracles():
    with criterion(4, "robust value iteration against LP and enumeration") as d:
        t0 = time.perf_counter()
        rng = np.random.default_rng(4)
        worst_lp = 0.0
        for _ in range(1000):
            k = int(rng.integers(1, 8))
            low, high = random_row(rng, k, width=rng.uniform(0, 0.6))
            v = rng.uniform(0, 1, k)
            for maximize in (False, True):
                got = robust_expectation(v, low, high, maximize)
                worst_lp = max(worst_lp, abs(got - lp_expectation(v, low, high, maximize)))
        worst_enum = 0.0
        for _ in range(50):
            n = int(rng.integers(2, 5))
            rows, phi1, phi2 = random_imdp(rng, n_states=n)
            K = int(rng.integers(1, 4))
            M = IntervalMdp.from_rows(rows)
            vv, _ = check_bounded_until(M, phi1, phi2, K, "max-lower")
            worst_enum = max(worst_enum, np.max(np.abs(vv.lower - enumerate_bounded_until(rows, n, phi1, phi2, K))))
            vv, _ = check_bounded_until(M, phi1, phi2, K, "min-upper")
            oracle = enumerate_bounded_until(rows, n, phi1, phi2, K, maximize_policy=False, maximize_adversary=True)
            worst_enum = max(worst_enum, np.max(np.abs(vv.upper - oracle)))
        d.update(lp_err=f"{worst_lp:.1e}", enum_err=f"{worst_enum:.1e}")
        assert worst_lp <= 1e-8 and worst_enum <= 1e-8
        assert time.perf_counter() - t0 < 120


def test_c5_temperature_product(temp_run):
    with criterion(5, "temperature product benchmark") as d:
        run = temp_run
        assert run["seconds"] < 600
        assert run["status"] == EXIT_OK
        stage, ab, ev = run["stage"], run["ab"], run["ev"]
        imdp, part = ab.imdp, stage.partition
        assert part.n_regions == 1600
        key = str(stage.formula)
        lower = ev.bounds[key].lower
        goal, crit = imdp.labels["Tg"], imdp.labels["Tc"]
        assert np.all(lower[goal] == 1.0) and np.all(lower[crit] == 0.0)

        # the positive set is one blob per mode around the goal, decaying outwards
        idx = region_grid(part)
        in_goal = part.labels["Tg"][:part.n_regions]
        gmin, gmax = idx[in_goal].min(0), idx[in_goal].max(0)
        dist = np.max(np.maximum(gmin - idx, 0) + np.maximum(idx - gmax, 0), axis=1)
        rings = []
        for r in range(2):
            g = lower[r * (part.n_regions + 1):][:part.n_regions]
            pos = g > 0
            assert blob_is_connected(pos.reshape(part.counts), idx[in_goal][0])
            rings.append([g[dist == k].mean() for k in range(1, 7)])
        rings = np.array(rings)
        assert np.all(np.diff(rings, axis=1) <= 1e-12), rings
        assert np.all(rings[:, 0] > 0.1)

        rng = np.random.default_rng(5)
        cand = np.flatnonzero((lower > 0) & ~goal & ~imdp.absorbing)
        picks = rng.choice(cand, 20, replace=False)
        res = soundness(stage.spec, part, ab, ev, key, picks, 10_000, seed=100)
        gap = min(f - lo for _, lo, f in res)
        d.update(W=run["manifest"]["final_W"], pipeline_s=f"{run['seconds']:.1f}",
                 positive_states=int((lower > 0).sum()), min_freq_minus_lower=f"{gap:.3f}")
        assert gap >= -SLACK, res


def blob_is_connected(mask, seed):
    seen = np.zeros_like(mask)
    stack = [tuple(seed)]
    while stack:
        i, j = stack.pop()
        if not (0 <= i < mask.shape[0] and 0 <= j < mask.shape[1]) or seen[i, j] or not mask[i, j]:
            continue
        seen[i, j] = True
        stack += [(i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)]
    return bool(np.array_equal(seen, mask))


def test_c6_temperature_robust(temp_run):
    with criterion(6, "temperature robust (unknown jumps) variant") as d:
        stage, prod = temp_run["stage"], temp_run["ab"]
        W = temp_run["manifest"]["final_W"]
        rob = build_abstraction(stage.spec, stage.partition, W, 0.01, 0, "robust")
        ratio = prod.imdp.n_transitions / rob.imdp.n_transitions
        assert ratio >= 10
        f = parse_formula(REACH)
        key = str(f)
        ev_r = evaluate(rob.imdp, f)
        rv = ev_r.bounds[key].lower
        pv = temp_run["ev"].bounds[key].lower
        S = rob.imdp.n_states
        assert np.all(rv <= np.minimum(pv[:S], pv[S:]) + 1e-12)

        part = stage.partition
        high = np.flatnonzero((rv[:part.n_regions] > 0.5) & ~part.labels["Tg"][:part.n_regions])
        assert np.all(part.centers[high] > 23.0)

        cand = np.flatnonzero((rv > 0) & ~rob.imdp.labels["Tg"] & ~rob.imdp.absorbing)
        picks = cand[np.argsort(-rv[cand], kind="stable")[:5]]
        scripts = {
            "stay-0": [0], "stay-1": [1],
            "alternate": lambda k, r, rng: np.full(r.shape, (k + 1) % 2),
            "flip": lambda k, r, rng: 1 - r,
            "sticky-1": lambda k, r, rng: np.where(rng.random(r.size) < 0.9, 1, r),
        }
        gap = np.inf
        for name, script in scripts.items():
            for start in (0, 1):
                if isinstance(script, list) and script[0] != start:
                    continue
                ctrl = controller_from_evaluation(stage.spec, part, rob, ev_r, key)
                for i, s in enumerate(picks):
                    res = simulate(stage.spec, ctrl, part.centers[s], start, 5000, seed=1000 + i,
                                   mode_script=script)
                    gap = min(gap, res.frequency - rv[s])
        d.update(transition_ratio=f"{ratio:.1f}", above_half_outside_goal=high.size,
                 max_lower_outside_goal=f"{rv[cand].max():.3f}", min_freq_minus_lower=f"{gap:.3f}")
        assert gap >= -SLACK


def test_c7_rich_formula(temp_spec, temp_partition):
    with criterion(7, "rich nested formula") as d:
        t0 = time.perf_counter()
        W = 800
        ab = build_abstraction(temp_spec, temp_partition, W, 0.01, 0, "product")
        M = ab.imdp
        ev = evaluate(M, parse_formula(RICH))
        assert ev.sat.any()
        # each probabilistic subformula re-checked directly on label masks
        safe = ~M.labels["Tc"]
        inner = check_bounded_until(M, safe, M.labels["Tl"] | M.labels["Tc"], 31, "min-upper")[0].upper <= 0.5
        first = check_next(M, inner, "max-lower")[0].lower >= 0.6
        second = check_bounded_until(M, safe, M.labels["Tg"], 32, "max-lower")[0].lower >= 0.9
        assert np.all(first[ev.sat]) and np.all(second[ev.sat])
        np.testing.assert_array_equal(ev.sat, first & second)
        d.update(W=W, satisfying=int(ev.sat.sum()))
        assert time.perf_counter() - t0 < 600


def test_c8_uav_reduced(tmp_path):
    with criterion(8, "reduced UAV end to end") as d:
        t0 = time.perf_counter()
        cfg = load_config(bench_path("uav_run.yaml"), out=str(tmp_path))
        status, manifest = run_pipeline(cfg)
        stage = Stage(cfg)
        ab, _ = stage.abstraction(manifest["final_W"], tmp_path / "cache")
        ev = evaluate(ab.imdp, stage.formula)
        key = str(stage.formula)
        lower = ev.bounds[key].lower
        imdp = ab.imdp
        assert np.all(lower[imdp.labels["crash"]] == 0.0)
        cand = np.flatnonzero((lower > 0) & ~imdp.labels["goal"] & ~imdp.absorbing)
        picks = np.random.default_rng(8).choice(cand, min(10, cand.size), replace=False)
        res = soundness(stage.spec, stage.partition, ab, ev, key, picks, 10_000, seed=200)
        gap = min(f - lo for _, lo, f in res)
        elapsed = time.perf_counter() - t0
        assert gap >= -SLACK, res
        assert elapsed < 300

        # grouped dynamics against two hand-unrolled steps
        raw = load_model(bench_path("uav.yaml"))
        g = group_steps(raw, 2)
        rng = np.random.default_rng(9)
        worst = 0.0
        for r, mode in enumerate(raw.modes):
            for _ in range(50):
                x = rng.normal(size=2)
                u = rng.uniform(-4, 4, 2)
                w = rng.normal(size=(2, 2))
                x2 = mode.A @ (mode.A @ x + mode.B[:, 0] * u[0] + mode.q + w[0]) + mode.B[:, 0] * u[1] + mode.q + w[1]
                lifted = sum(L @ wk for L, wk in zip(g.noise[r].lift, w))
                worst = max(worst, np.max(np.abs(g.modes[r].successor(x, u) + lifted - x2)))
        assert worst < 1e-12
        d.update(status=manifest["status"], W=manifest["final_W"], states=imdp.n_states,
                 transitions=imdp.n_transitions, min_freq_minus_lower=f"{gap:.3f}", group_err=f"{worst:.0e}")


def test_c9_determinism(temp_run, tmp_path):
    with criterion(9, "determinism of exports") as d:
        again = pipeline(tmp_path / "b")
        names = ["values.json", "policy.json", "grid.csv"]
        for name in names:
            assert (temp_run["out"] / name).read_bytes() == (again["out"] / name).read_bytes(), name

        def stable(man):
            man = json.loads(json.dumps(man))
            man["config"].pop("out", None)
            for rnd in man["rounds"]:
                rnd.pop("seconds")
            return man

        assert stable(temp_run["manifest"]) == stable(again["manifest"])
        texts = []
        for run in (temp_run, again):
            with open(run["out"] / "imdp.txt", "w", encoding="utf-8") as fh:
                export_prism(run["ab"].imdp, fh)
            texts.append((run["out"] / "imdp.txt").read_bytes())
        assert texts[0] == texts[1]
        d.update(files=len(names) + 2)
