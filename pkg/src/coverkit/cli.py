"""Command-line driver.

Every subcommand prints a JSON summary to stdout (sorted keys) and, with
``--out``, writes its artifacts there. Exit codes: 0 success, 1 runtime
failure, 2 usage or parse error, 3 a ``--check`` bound was violated.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor

import numpy as np

log = logging.getLogger("coverkit")

COMMANDS = ("eval-coverage", "plan-cover", "explore-codex", "explore-codexr", "explore-mf",
            "downstream", "experiment", "gen")


class UsageError(ValueError):
    """Bad configuration or violated precondition (exit code 2)."""


# --------------------------------------------------------------------------
# helpers

def _num(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def _clean(obj):
    """Make a structure JSON-safe: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    return _num(obj)


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".12g")
    return str(v)


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _write_atomic(path: str, text: str) -> None:
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def load_instance(spec, seed: int, rewards: bool = False):
    from .envs import gen_blockmdp, gen_random_mdp
    from .mdp import TabularMdp

    spec = dict(spec or {})
    if "path" in spec:
        with open(spec["path"]) as f:
            mdp = TabularMdp.from_json(f.read())
        if rewards and mdp.rewards is None:
            raise UsageError("this subcommand needs an instance with rewards")
        return mdp
    gen = spec.get("generator", "random")
    s = spec.get("seed", seed)
    if gen == "random":
        return gen_random_mdp(spec.get("H", 3), spec.get("layer_sizes", 3), spec.get("num_actions", 2),
                              spec.get("sparsity", 0.0), s, rewards=rewards or spec.get("rewards", False))
    if gen == "block":
        return gen_blockmdp(spec.get("num_latent", 3), spec.get("obs_per_latent", 2),
                            spec.get("num_actions", 2), spec.get("H", 3), s).mdp
    raise UsageError(f"unknown generator {gen!r}")


def _eps(cfg, default=0.125) -> float:
    eps = float(cfg.get("epsilon", default))
    if not 0 < eps <= 1:
        raise UsageError("epsilon must lie in (0, 1]")
    return eps


# --------------------------------------------------------------------------
# subcommands; each returns (summary, {filename: text})

def cmd_eval_coverage(cfg: dict, seed: int) -> tuple:
    from .coverage import (CoverageParams, PolicyClass, compute_c1, compute_cinf, compute_cpush,
                           cov_opt_upper, l1_coverage, l1_values, linf_admissible_coverage)
    from .envs import random_class
    from .mdp import Policy, PolicyMixture

    mdp = load_instance(cfg.get("instance"), seed)
    h = int(cfg.get("h", mdp.horizon))
    eps = _eps(cfg)
    params = CoverageParams(h, eps)
    params.check(mdp)
    if "policies" in cfg:
        cls = PolicyClass(tuple(Policy.from_dict(d, mdp.num_actions) for d in cfg["policies"]))
    else:
        cls = random_class(mdp, int(cfg.get("num_policies", 4)), seed)
    if "mixture" in cfg:
        p = PolicyMixture.from_dict(cfg["mixture"], mdp.num_actions)
    else:
        p = PolicyMixture.uniform(cls.policies)
    iters = int(cfg.get("iters", 500))
    cert = cov_opt_upper(mdp, cls, params, iters=iters)
    summary = {
        "h": h, "epsilon": eps,
        "psi": l1_coverage(mdp, cls, p, params),
        "per_policy": l1_values(mdp, cls, p, params),
        "linf": linf_admissible_coverage(mdp, cls, p, params),
        "cinf": compute_cinf(mdp, cls, h)[0],
        "cpush": compute_cpush(mdp, h)[0] if h >= 2 else None,
        "c1_upper": compute_c1(mdp, cls, h, iters=iters)[0],
        "cov_upper": cert.to_dict(),
    }
    return summary, {"coverage.json": dumps(summary)}


def cmd_plan_cover(cfg: dict, seed: int) -> tuple:
    from .coverage import compute_cinf
    from .plan import PlanConfig, plan_linf_relaxation, plan_pushforward_relaxation

    mdp = load_instance(cfg.get("instance"), seed)
    h = int(cfg.get("h", mdp.horizon))
    eps = _eps(cfg)
    relax = cfg.get("relaxation", "mu")
    if not 1 <= h <= mdp.horizon:
        raise UsageError("h must lie in 1..H")
    if relax == "pushforward" and h < 2:
        raise UsageError("the pushforward relaxation needs h >= 2")
    conf = PlanConfig(h, eps, relaxation=relax)
    L = math.log(2.0 / eps)
    if relax == "mu":
        mu = compute_cinf(mdp, None, h)[1]
        trace = plan_linf_relaxation(mdp, None, mu, conf)
        bounds = {"relaxation": 3.0 * L, "l1": 6.0 * trace.constant * L}
    elif relax == "pushforward":
        trace = plan_pushforward_relaxation(mdp, conf)
        bounds = {"relaxation": 5.0 * trace.constant * L,
                  "l1": 5.0 * mdp.num_actions * trace.constant * L}
    else:
        raise UsageError(f"unknown relaxation {relax!r}")
    checks = {"relaxation": trace.relaxation_value <= bounds["relaxation"] + 1e-9,
              "l1": trace.l1_value <= bounds["l1"] + 1e-9}
    summary = {"relaxation": relax, "h": h, "epsilon": eps, "T": len(trace.policies),
               "relaxation_value": trace.relaxation_value, "l1_value": trace.l1_value,
               "constant": trace.constant, "bounds": bounds, "checks": checks}
    rows = [[t + 1, v] for t, v in enumerate(trace.values)]
    return summary, {"trace.json": dumps(trace.to_dict()),
                     "trace.csv": to_csv(["iteration", "value"], rows)}


def _codex(cfg: dict, seed: int, reward_driven: bool) -> tuple:
    from .coverage import compute_cinf
    from .envs import gen_model_class
    from .explore_mb import CodexConfig, codex_reward_driven, codex_reward_free

    mdp = load_instance(cfg.get("instance"), seed, rewards=reward_driven)
    if "models" in cfg:
        from .explore_mb import FiniteModelClass
        from .mdp import TabularMdp
        cls = FiniteModelClass(tuple(TabularMdp.from_dict(d) for d in cfg["models"]))
    else:
        cls = gen_model_class(mdp, int(cfg.get("n_models", 4)), seed, float(cfg.get("mix", 0.5)))
    conf = CodexConfig(T=int(cfg.get("T", 200)), epsilon=_eps(cfg), C=cfg.get("C"),
                       relaxation=cfg.get("relaxation", "mu"), seed=seed)
    if reward_driven:
        _, rep = codex_reward_driven(cls, mdp, None, conf)
    else:
        rep = codex_reward_free(cls, mdp, None, conf)
    H = mdp.horizon
    cinf = max(compute_cinf(mdp, None, h)[0] for h in range(1, H + 1))
    bound = 12.0 * H * cinf
    summary = rep.to_dict()
    summary.update({"max_true_coverage": float(np.max(rep.true_coverage)), "bound": bound,
                    "checks": {"coverage": float(np.max(rep.true_coverage)) <= bound}})
    header, rows = rep.csv_rows()
    return summary, {"report.json": dumps(summary), "rounds.csv": to_csv(header, rows)}


def cmd_explore_codex(cfg, seed):
    return _codex(cfg, seed, False)


def cmd_explore_codexr(cfg, seed):
    return _codex(cfg, seed, True)


def cmd_explore_mf(cfg: dict, seed: int) -> tuple:
    from .envs import gen_blockmdp
    from .explore_mf import (MfConfig, SamplingEnv, latent_value_class, latent_weight_class,
                             mf_explore)

    spec = dict(cfg.get("instance") or {})
    S = int(spec.get("num_latent", 3))
    A = int(spec.get("num_actions", 2))
    H = int(spec.get("H", 3))
    block = gen_blockmdp(S, int(spec.get("obs_per_latent", 2)), A, H, spec.get("seed", seed))
    eps = _eps(cfg)
    if eps >= 0.5:
        raise UsageError("epsilon must lie in (0, 1/2)")
    K = int(cfg.get("grid", 100))
    W = {h: latent_weight_class(block.decoder, S, A, K) for h in range(2, H + 1)}
    Q = latent_value_class(block.decoder, A, H, int(cfg.get("levels", 101)))
    conf = MfConfig(epsilon=eps, delta=float(cfg.get("delta", 0.05)),
                    n_weight=cfg.get("n_weight"), n_psdp=cfg.get("n_psdp", 2000), seed=seed)
    rep = mf_explore(SamplingEnv(block.mdp, seed), W, Q, conf)
    bound = 170.0 * H * math.log(1.0 / eps) * rep.cpush
    summary = rep.to_dict()
    summary.update({"bound": bound,
                    "checks": {"psi_push": all(v <= bound for v in rep.psi_push.values()),
                               "budget": rep.episodes <= rep.budget}})
    header, rows = rep.csv_rows()
    return summary, {"report.json": dumps(summary), "cells.csv": to_csv(header, rows)}


def cmd_downstream(cfg: dict, seed: int) -> tuple:
    from .coverage import CoverageParams, compute_cinf, l1_coverage
    from .envs import gen_model_class
    from .mdp import Policy, PolicyMixture
    from .offline import complete_value_class, downstream_bound, fqi, offline_mle_policy
    from .plan import PlanConfig, plan_linf_relaxation

    mdp = load_instance(cfg.get("instance"), seed, rewards=True)
    H = mdp.horizon
    eps = _eps(cfg)
    method = cfg.get("method", "mle")
    if cfg.get("cover", "plan") == "plan":
        covers = [plan_linf_relaxation(mdp, None, compute_cinf(mdp, None, h)[1], PlanConfig(h, eps),
                                       evaluate=False).mixture for h in range(1, H + 1)]
    else:
        covers = [PolicyMixture.point(Policy.uniform(mdp))] * H
    cov = max(l1_coverage(mdp, None, covers[h - 1], CoverageParams(h, eps)) for h in range(1, H + 1))
    if method == "mle":
        cls = gen_model_class(mdp, int(cfg.get("n_models", 4)), seed, float(cfg.get("mix", 0.5)))
        log_size = math.log(len(cls))
    elif method == "fqi":
        Q = complete_value_class(mdp, mdp.rewards, int(cfg.get("distractors", 3)), seed)
        log_size = Q.log_size + math.log(H)
    else:
        raise UsageError(f"unknown method {method!r}")
    rows, checks = [], []
    for n in cfg.get("ns", [50, 200, 800]):
        n = int(n)
        if method == "mle":
            _, sub = offline_mle_policy(cls, covers, mdp, n, mdp.rewards, seed=[seed, n])
        else:
            _, sub = fqi(Q, covers, mdp, n, mdp.rewards, seed=[seed, n])
        b = downstream_bound(H, cov, log_size, n, eps)
        rows.append([n, sub, b])
        checks.append(sub <= b + 1e-12)
    summary = {"method": method, "epsilon": eps, "max_coverage": cov,
               "rows": [{"n": n, "suboptimality": s, "bound": b} for n, s, b in rows],
               "checks": {"bound": all(checks)}}
    return summary, {"downstream.json": dumps(summary),
                     "downstream.csv": to_csv(["n", "suboptimality", "bound"], rows)}


def cmd_experiment(cfg: dict, seed: int) -> tuple:
    from .mountaincar import ExperimentConfig, run_experiment

    fields = {k: cfg[k] for k in ExperimentConfig.__dataclass_fields__ if k in cfg and k != "seed"}
    conf = ExperimentConfig(seed=seed, **fields)
    methods = cfg.get("methods", ["l1cov", "maxent", "uniform"])
    files, final = {}, {}
    for m in methods:
        rows = run_experiment(m, conf)
        files[f"experiment_{m}.csv"] = to_csv(["epoch", "unique_states", "entropy", "objective"], rows)
        final[m] = {"unique_states": rows[-1][1], "entropy": rows[-1][2], "objective": rows[-1][3]}
    summary = {"epochs": conf.epochs, "horizon": conf.horizon, "final": final}
    files["experiment.json"] = dumps(summary)
    return summary, files


def cmd_gen(cfg: dict, seed: int) -> tuple:
    from .coverage import PolicyClass
    from .envs import counterexample_linf, counterexample_lq
    from .mountaincar import mountaincar_discretized

    kind = cfg.get("kind", "random")
    files = {}
    if kind in ("random", "block"):
        spec = dict(cfg.get("instance") or {})
        spec.setdefault("generator", kind)
        mdp = load_instance(spec, seed, rewards=bool(spec.get("rewards", False)))
    elif kind in ("linf", "lq"):
        N = int(cfg.get("N", 200))
        if kind == "linf":
            mdp, cls = counterexample_linf(N)
        else:
            mdp, cls = counterexample_lq(float(cfg.get("q", 2.0)), float(cfg.get("delta", 0.25)), N)
        files["policies.json"] = dumps([p.to_dict() for p in cls.policies])
    elif kind == "mountaincar":
        env = mountaincar_discretized(int(cfg.get("H", 200)))
        summary = {"kind": kind, "horizon": env.mdp.horizon, "num_actions": env.mdp.num_actions,
                   "states_per_layer": [env.mdp.layer_size(1)], "start_bin": env.start_bin}
        files["mountaincar.json"] = dumps({"start_bin": env.start_bin, "table": env.table})
        return summary, files
    else:
        raise UsageError(f"unknown kind {kind!r}")
    files["mdp.json"] = dumps(mdp.to_dict())
    summary = {"kind": kind, "horizon": mdp.horizon, "num_actions": mdp.num_actions,
               "states_per_layer": list(mdp.states_per_layer)}
    return summary, files


RUNNERS = {
    "eval-coverage": cmd_eval_coverage,
    "plan-cover": cmd_plan_cover,
    "explore-codex": cmd_explore_codex,
    "explore-codexr": cmd_explore_codexr,
    "explore-mf": cmd_explore_mf,
    "downstream": cmd_downstream,
    "experiment": cmd_experiment,
    "gen": cmd_gen,
}


def run_one(command: str, cfg: dict, seed: int) -> tuple:
    return RUNNERS[command](cfg, seed)


# --------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coverkit", description="Policy-cover toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; its keys override flags except --seed")
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out", help="directory for artifacts")
        p.add_argument("--check", action="store_true", help="exit 3 if a certified bound fails")
        p.add_argument("--reps", type=int, default=1, help="replications with seeds seed..seed+N-1")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("COVERKIT_LOG", "error").lower()
    if level not in ("error", "info", "debug"):
        level = "error"
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level.upper()),
                        format="%(levelname)s %(name)s: %(message)s")


def _failed_checks(summary: dict) -> list:
    return [k for k, ok in summary.get("checks", {}).items() if not ok]


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    cfg = {}
    if args.config:
        try:
            with open(args.config) as f:
                cfg = json.load(f)
        except json.JSONDecodeError as e:
            print(f"coverkit: cannot parse {args.config}: {e}", file=sys.stderr)
            return 2
        except OSError as e:
            print(f"coverkit: {e}", file=sys.stderr)
            return 2
        if not isinstance(cfg, dict):
            print("coverkit: config must be a JSON object", file=sys.stderr)
            return 2
    out = cfg.get("out", args.out)
    check = bool(cfg.get("check", args.check))
    reps = int(cfg.get("reps", args.reps))
    if reps < 1:
        print("coverkit: --reps must be >= 1", file=sys.stderr)
        return 2
    seeds = [args.seed + i for i in range(reps)]
    log.info("running %s with seeds %s", args.command, seeds)
    try:
        if reps == 1:
            results = [run_one(args.command, cfg, seeds[0])]
        else:
            with ProcessPoolExecutor() as pool:
                results = list(pool.map(run_one, [args.command] * reps, [cfg] * reps, seeds))
    except UsageError as e:
        print(f"coverkit: {e}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, OSError) as e:
        print(f"coverkit: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    if out:
        for s, (_, files) in zip(seeds, results):
            base = out if reps == 1 else os.path.join(out, f"rep_{s}")
            for name, text in sorted(files.items()):
                _write_atomic(os.path.join(base, name), text)
    if reps == 1:
        summary = results[0][0]
    else:
        summary = {"command": args.command, "seeds": seeds, "reps": [r[0] for r in results]}
    text = dumps(summary)
    if out and reps > 1:
        _write_atomic(os.path.join(out, "summary.json"), text)
    print(text)
    failed = [k for r in results for k in _failed_checks(r[0])]
    if check and failed:
        print(f"coverkit: check failed: {sorted(set(failed))}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
