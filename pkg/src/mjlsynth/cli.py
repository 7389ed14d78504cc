"""Command-line pipeline: abstract, check, refine, simulate and export.

Subcommands
-----------
run           abstraction + synthesis with sample refinement (W <- ceil(gamma W))
abstract      build (or reuse) the cached interval MDP only
check         evaluate the formula on the cached interval MDP and export results
simulate      closed-loop Monte Carlo runs of the exported controller
export-prism  write the interval transitions as plain text

Exit codes: 0 formula satisfied at the initial state, 2 not satisfied, 1 error.
"""

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .abstraction import Abstraction, IntervalMdp, build_abstraction, export_prism
from .checker import CONV_TOL, MAX_ITER, Policy, evaluate
from .geometry import build_partition, label_state
from .model import group_steps, load_model, validate
from .pctl import PATH_TYPES, parse_formula, top_level_probs
from .runtime import controller_from_evaluation, simulate

log = logging.getLogger("mjlsynth")

EXIT_OK, EXIT_ERROR, EXIT_UNSAT = 0, 1, 2
CACHE_VERSION = 1


@dataclass
class RunConfig:
    model: str
    partition: dict
    formula: str
    samples: int = 100
    beta: float = 0.01
    gamma: float = 2.0
    rounds: int = 3
    seed: int = 0
    jumps: str = "product"
    out: str = "out"
    group: int = 1
    initial: dict = field(default_factory=dict)
    tol: float = CONV_TOL
    max_iter: int = MAX_ITER
    threads: int = 1

    def __post_init__(self):
        if int(self.samples) < 1:
            raise ValueError("samples must be at least 1")
        if not float(self.gamma) > 1.0:
            raise ValueError("gamma must be greater than 1")
        if not 0.0 < float(self.beta) < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.jumps not in ("product", "robust"):
            raise ValueError("jumps must be 'product' or 'robust'")
        if int(self.rounds) < 1:
            raise ValueError("rounds must be at least 1")


_CONFIG_KEYS = set(RunConfig.__dataclass_fields__)


def load_config(path=None, **overrides):
    """Run configuration from a YAML file, with non-None ``overrides`` on top.

    Relative model paths are resolved against the config file's folder.
    """
    doc = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        base = path.parent
        unknown = set(doc) - _CONFIG_KEYS
        if unknown:
            raise ValueError(f"unknown run config field(s): {sorted(unknown)}")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if isinstance(doc.get("partition"), str):
        ppath = Path(doc["partition"])
        ppath = ppath if ppath.is_absolute() else Path.cwd() / ppath
        doc["partition"] = yaml.safe_load(ppath.read_text(encoding="utf-8"))
    for key in ("model", "partition", "formula"):
        if key not in doc:
            raise ValueError(f"run config needs {key!r}")
    model = Path(doc["model"])
    if not model.is_absolute() and overrides.get("model") is None:
        model = base / model
    doc["model"] = str(model)
    return RunConfig(**doc)


# -- pipeline stages -------------------------------------------------------


class Stage:
    """Model, partition and formula shared by every subcommand."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.model_text = Path(cfg.model).read_text(encoding="utf-8")
        spec = load_model(cfg.model)
        self.spec = validate(group_steps(spec, cfg.group))
        part = cfg.partition
        self.partition = build_partition(part["bounds"], part["counts"], part.get("labels"))
        self.formula = parse_formula(cfg.formula)
        if isinstance(self.formula, PATH_TYPES):
            raise ValueError("expected a state formula; wrap path formulas in P~b [ ... ]")

    def cache_key(self, W):
        payload = {
            "version": CACHE_VERSION,
            "model": hashlib.sha256(self.model_text.encode()).hexdigest(),
            "group": self.cfg.group,
            "partition": self.cfg.partition,
            "W": int(W),
            "beta": float(self.cfg.beta),
            "seed": int(self.cfg.seed),
            "jumps": self.cfg.jumps,
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def abstraction(self, W, cache_dir):
        """Cached :class:`Abstraction`; rebuilt when the key changes."""
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        path = cache_dir / f"imdp-{self.cache_key(W)}.npz"
        if path.is_file():
            log.info("reusing cached abstraction %s", path.name)
            imdp = IntervalMdp.load(path)
            return Abstraction(imdp, self.partition.centers, None, None, self.cfg.jumps), True
        ab = build_abstraction(self.spec, self.partition, W, self.cfg.beta, self.cfg.seed, self.cfg.jumps)
        ab.imdp.check_feasible()
        ab.imdp.save(path)
        return ab, False

    def initial_state(self, imdp):
        init = self.cfg.initial or {}
        if "state" not in init:
            return None
        region = int(label_state(self.partition, np.asarray(init["state"], dtype=float)))
        return imdp.state_id(region, init.get("mode", 0))


def _gate_key(formula):
    """The ``P`` subformula whose bound is reported as the headline value."""
    top = top_level_probs(formula)
    return str(top[-1]) if top else None


def _state_rows(stage, imdp):
    part = stage.partition
    p = part.n_regions
    cells = np.array(np.unravel_index(np.arange(p), part.counts)).T
    boxes = [[[float(part.edges[k][c[k]]), float(part.edges[k][c[k] + 1])] for k in range(part.n)]
             for c in cells]
    for s in range(imdp.n_states):
        region = int(imdp.state_region[s])
        yield s, int(imdp.state_mode[s]), region, (boxes[region] if region < p else None)


def write_results(stage, abstraction, ev, out):
    """values.json, policy.json and grid.csv (deterministic byte output)."""
    out = Path(out)
    imdp = abstraction.imdp
    subs = []
    for key, vv in ev.bounds.items():
        states = [
            {"state": s, "mode": r, "region": i, "box": box,
             "lower": float(vv.lower[s]), "upper": float(vv.upper[s])}
            for s, r, i, box in _state_rows(stage, imdp)
        ]
        subs.append({"formula": key, "states": states})
    values = {"formula": str(stage.formula), "satisfying": np.flatnonzero(ev.sat).tolist(),
              "subformulas": subs}
    (out / "values.json").write_text(json.dumps(values, separators=(",", ":")) + "\n", encoding="utf-8")

    pol = []
    for key, policy in ev.policies.items():
        table = np.atleast_2d(policy.table)
        label = np.vectorize(lambda c: imdp.action_label(c) if c >= 0 else None, otypes=[object])
        actions = label(table).T.tolist()
        entry = {"formula": key, "stationary": policy.stationary}
        if policy.stationary:
            entry["actions"] = [a[0] for a in actions]
        else:
            entry["actions_per_step"] = actions
        pol.append(entry)
    (out / "policy.json").write_text(json.dumps({"policies": pol}, separators=(",", ":")) + "\n", encoding="utf-8")

    key = _gate_key(stage.formula)
    with open(out / "grid.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        n = stage.partition.n
        writer.writerow(["state", "mode", "region"] + [f"c{i}" for i in range(n)] + ["sat", "lower", "upper"])
        centers = stage.partition.centers
        for s, r, i, box in _state_rows(stage, imdp):
            if box is None:
                continue
            lo = repr(float(ev.bounds[key].lower[s])) if key else ""
            hi = repr(float(ev.bounds[key].upper[s])) if key else ""
            writer.writerow([s, r, i] + [repr(float(c)) for c in centers[i]] + [int(ev.sat[s]), lo, hi])


def write_controller(stage, abstraction, ev, key, path):
    policy = ev.policies[key]
    np.savez_compressed(
        path,
        formula=np.array(key),
        policy=policy.table,
        stationary=np.array(policy.stationary),
        targets=abstraction.targets,
        digest=np.array(abstraction.imdp.digest()),
    )


def _load_policy(path):
    with np.load(path) as data:
        return str(data["formula"]), Policy(data["policy"], bool(data["stationary"])), str(data["digest"])


def run_pipeline(cfg):
    """Refinement loop; returns ``(exit code, manifest dict)``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stage = Stage(cfg)
    manifest = {"config": asdict(cfg), "model_sha256": hashlib.sha256(stage.model_text.encode()).hexdigest(),
                "formula": str(stage.formula), "rounds": []}
    W = int(cfg.samples)
    key = _gate_key(stage.formula)
    status = EXIT_UNSAT
    for rnd in range(int(cfg.rounds)):
        t0 = time.perf_counter()
        ab, cached = stage.abstraction(W, out / "cache")
        t1 = time.perf_counter()
        ev = evaluate(ab.imdp, stage.formula, tol=cfg.tol, max_iter=cfg.max_iter)
        t2 = time.perf_counter()
        s0 = stage.initial_state(ab.imdp)
        sat = bool(ev.sat[s0]) if s0 is not None else bool(ev.sat.any())
        lower = float(ev.bounds[key].lower[s0]) if key and s0 is not None else None
        manifest["rounds"].append({
            "round": rnd, "W": W, "cached": cached, "initial_state": s0,
            "satisfied": sat, "initial_lower": lower,
            "states": ab.imdp.n_states, "choices": ab.imdp.n_choices, "transitions": ab.imdp.n_transitions,
            "seconds": {"abstract": t1 - t0, "check": t2 - t1},
        })
        log.info("round %d: W=%d satisfied=%s lower=%s", rnd, W, sat, lower)
        if sat or rnd == int(cfg.rounds) - 1:
            write_results(stage, ab, ev, out)
            if key is not None:
                write_controller(stage, ab, ev, key, out / "controller.npz")
            status = EXIT_OK if sat else EXIT_UNSAT
            break
        W = math.ceil(cfg.gamma * W)
    manifest["status"] = "satisfied" if status == EXIT_OK else "not satisfied"
    manifest["final_W"] = W
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, default=str) + "\n", encoding="utf-8")
    return status, manifest


def run_check(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stage = Stage(cfg)
    ab, _ = stage.abstraction(cfg.samples, out / "cache")
    ev = evaluate(ab.imdp, stage.formula, tol=cfg.tol, max_iter=cfg.max_iter)
    write_results(stage, ab, ev, out)
    key = _gate_key(stage.formula)
    if key is not None:
        write_controller(stage, ab, ev, key, out / "controller.npz")
    s0 = stage.initial_state(ab.imdp)
    sat = bool(ev.sat[s0]) if s0 is not None else bool(ev.sat.any())
    return (EXIT_OK if sat else EXIT_UNSAT), ev


def run_simulate(cfg, trials, n_traces=10):
    """Simulate the exported controller from the configured initial state."""
    out = Path(cfg.out)
    bundle = out / "controller.npz"
    if not bundle.is_file():
        raise FileNotFoundError(f"no controller bundle in {out}; run 'check' or 'run' first")
    stage = Stage(cfg)
    key, policy, digest = _load_policy(bundle)
    W = json.loads((out / "manifest.json").read_text())["final_W"] if (out / "manifest.json").is_file() else cfg.samples
    ab, _ = stage.abstraction(W, out / "cache")
    if ab.imdp.digest() != digest:
        raise RuntimeError("cached abstraction does not match the controller bundle")
    ev = evaluate(ab.imdp, stage.formula, tol=cfg.tol, max_iter=cfg.max_iter)
    ev.policies[key] = policy
    ctrl = controller_from_evaluation(stage.spec, stage.partition, ab, ev, key)
    init = cfg.initial
    res = simulate(stage.spec, ctrl, init["state"], init.get("mode", 0), trials, seed=cfg.seed,
                   n_traces=n_traces)
    s0 = stage.initial_state(ab.imdp)
    summary = {"formula": key, "trials": res.trials, "satisfied": res.satisfied,
               "frequency": res.frequency, "wilson95": list(res.wilson),
               "lower_bound": float(ev.bounds[key].lower[s0])}
    (out / "simulation.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    with open(out / "traces.csv", "w", newline="", encoding="utf-8") as fh:
        for t, tr in enumerate(res.traces):
            tr.write_csv(fh, stage.spec.n, stage.spec.m, trial=t, header=(t == 0))
    return summary


# -- argument parsing -------------------------------------------------------


def _parser():
    p = argparse.ArgumentParser(prog="mjlsynth", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run configuration YAML")
        sp.add_argument("--model", help="model file (overrides the config)")
        sp.add_argument("--partition", help="partition YAML (bounds, counts, labels)")
        sp.add_argument("--formula", help="PCTL formula text")
        sp.add_argument("--samples", type=int, help="noise samples W per action")
        sp.add_argument("--beta", type=float, help="confidence parameter")
        sp.add_argument("--gamma", type=float, help="sample growth factor per refinement round")
        sp.add_argument("--rounds", type=int, help="maximum refinement rounds")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--jumps", choices=["product", "robust"])
        sp.add_argument("--group", type=int, help="group this many steps into one")
        sp.add_argument("--initial", type=float, nargs="+", metavar="X", help="initial state")
        sp.add_argument("--mode", type=int, help="initial mode")
        sp.add_argument("--tol", type=float, help="value-iteration tolerance")
        sp.add_argument("--max-iter", type=int, dest="max_iter", help="value-iteration sweep cap")
        sp.add_argument("--threads", type=int, help="worker threads (recorded; work is vectorised)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    for name, text in [("run", "full pipeline with refinement"),
                       ("abstract", "build the cached interval MDP"),
                       ("check", "evaluate the formula on the cached interval MDP"),
                       ("simulate", "simulate the exported controller"),
                       ("export-prism", "write interval transitions as text")]:
        sp = sub.add_parser(name, help=text)
        common(sp)
        if name == "simulate":
            sp.add_argument("--trials", type=int, default=1000)
    return p


def config_from_args(args):
    initial = None
    if args.initial is not None or args.mode is not None:
        initial = {}
        if args.initial is not None:
            initial["state"] = list(args.initial)
        if args.mode is not None:
            initial["mode"] = args.mode
    overrides = {k: getattr(args, k) for k in
                 ("model", "partition", "formula", "samples", "beta", "gamma", "rounds", "seed",
                  "jumps", "group", "tol", "max_iter", "threads", "out")}
    cfg = load_config(args.config, **overrides)
    if initial is not None:
        cfg = replace(cfg, initial={**cfg.initial, **initial})
    return cfg


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "run":
            status, manifest = run_pipeline(cfg)
            last = manifest["rounds"][-1]
            print(f"{manifest['status']} after {len(manifest['rounds'])} round(s), W={last['W']}, "
                  f"initial lower bound {last['initial_lower']}")
            return status
        if args.command == "abstract":
            stage = Stage(cfg)
            ab, cached = stage.abstraction(cfg.samples, Path(cfg.out) / "cache")
            print(json.dumps({"states": ab.imdp.n_states, "choices": ab.imdp.n_choices,
                              "transitions": ab.imdp.n_transitions, "cached": cached}))
            return EXIT_OK
        if args.command == "check":
            status, _ = run_check(cfg)
            print("satisfied" if status == EXIT_OK else "not satisfied")
            return status
        if args.command == "simulate":
            summary = run_simulate(cfg, args.trials)
            print(json.dumps(summary))
            return EXIT_OK
        if args.command == "export-prism":
            stage = Stage(cfg)
            ab, _ = stage.abstraction(cfg.samples, Path(cfg.out) / "cache")
            path = Path(cfg.out) / "imdp.txt"
            with open(path, "w", encoding="utf-8") as fh:
                export_prism(ab.imdp, fh)
            print(path)
            return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 1
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_ERROR
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
