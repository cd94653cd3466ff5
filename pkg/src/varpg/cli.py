"""Experiment runner.

    varpg {eval,frontier,exact-opt,sim-opt,portfolio} --config cfg.json --seed N --out DIR

Every subcommand reads a JSON config, writes CSV/JSON files into ``--out``
and returns 0 on success, 1 on configuration or validation errors, 2 on
numerical failures and 3 when an assumption guard (variance floor,
truncation storm) fires. Each output file records the config and seed.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .core import DirectPolicy, EpsilonSigmoidPolicy, FiniteMdp, TabularSoftmaxPolicy
from .environments import (
    PortfolioConfig,
    PortfolioEnv,
    build_geometric_chain,
    build_nonconvex_example,
    load_mdp,
    mdp_from_dict,
    nonconvex_frontier,
    portfolio_episode,
    random_mdp,
)
from .errors import AssumptionViolation, ConfigError, NumericalError, VarpgError
from .exact_eval import evaluate
from .exact_optim import (
    AscentConfig,
    PenaltyConfig,
    exact_constrained_ascent,
    exact_sharpe_ascent,
    penalty_continuation,
)
from .simulation import Constrained, ScheduleConfig, Sharpe, run_two_timescale

log = logging.getLogger("varpg")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_ASSUMPTION = 0, 1, 2, 3

# direct-policy layouts of the built-in examples
_BUILTIN = {
    "nonconvex": (build_nonconvex_example, (0, 1, 1, -1, -1, -1, -1, -1)),
    "geometric": (build_geometric_chain, (-1, 0)),
}

PORTFOLIO_CRITERIA = ("average", "constrained", "sharpe")

# Training defaults for the portfolio experiment. The per-episode variance
# sample R^2 - J^2 is several times noisier than V itself here, so both
# schedules start at an offset (k0) to keep early tracker estimates close to
# the pilot values; the Sharpe step scales like V^-1.5 and reacts badly to a
# collapsed variance tracker.
PORTFOLIO_DEFAULTS = {
    "portfolio": {},
    "episodes": 30_000,
    "eval_episodes": 10_000,
    "tracker_warmup": 300,
    "log_interval": 1000,
    "bins": None,
    "theta0": None,
    "schedule": {"a0": 1.0, "a_exp": 0.8, "b0": 10.0, "b_exp": 0.85, "k0": 1000},
    "criteria": {
        "average": {},
        "constrained": {"lam": 3000.0, "b": 0.015, "schedule": {"b0": 5.0}},
        "sharpe": {"v_floor": 1e-3, "schedule": {"b0": 0.25}},
    },
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, AssumptionViolation):
        return EXIT_ASSUMPTION
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_CONFIG


# ---------------------------------------------------------------------------
# config helpers


def load_config(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


def _check_keys(cfg: dict, allowed, where: str) -> None:
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _make(cls, data: dict | None, where: str):
    data = dict(data or {})
    if "theta_bounds" in data and data["theta_bounds"] is not None:
        data["theta_bounds"] = tuple(data["theta_bounds"])
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {where} settings: {exc}") from exc


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _count(cfg: dict, key: str, default: int) -> int:
    val = cfg.get(key, default)
    if not isinstance(val, int) or isinstance(val, bool) or val < 0:
        raise ConfigError(f"{key} must be a non-negative integer, got {val!r}")
    return val


def build_mdp(spec) -> tuple[FiniteMdp, str | None]:
    """MDP from a config entry: a built-in name, ``{"file": path}``,
    ``{"random": {"seed", "n", "m"}}`` or an inline MDP object."""
    if isinstance(spec, str):
        if spec not in _BUILTIN:
            raise ConfigError(f"unknown built-in MDP {spec!r}; choose from {sorted(_BUILTIN)}")
        return _BUILTIN[spec][0](), spec
    if not isinstance(spec, dict):
        raise ConfigError("mdp must be a name or an object")
    if "file" in spec:
        return load_mdp(spec["file"]), None
    if "random" in spec:
        r = spec["random"]
        return random_mdp(np.random.default_rng(int(r.get("seed", 0))), int(r["n"]), int(r["m"])), None
    return mdp_from_dict(spec), None


def build_policy(spec: dict | None, mdp: FiniteMdp, builtin: str | None, default_kind: str):
    spec = dict(spec or {})
    _check_keys(spec, {"kind", "theta", "state_params", "default_prob"}, "policy")
    kind = spec.get("kind", default_kind if builtin else "softmax")
    theta = spec.get("theta")
    if kind == "softmax":
        return TabularSoftmaxPolicy.for_mdp(mdp, theta)
    if kind == "direct":
        layout = spec.get("state_params")
        if layout is None:
            if builtin is None:
                raise ConfigError("direct policy on a custom MDP needs state_params")
            layout = _BUILTIN[builtin][1]
        if len(layout) != mdp.n or mdp.m != 2:
            raise ConfigError("direct policy needs a two-action MDP and one entry per state")
        return DirectPolicy(layout, theta, spec.get("default_prob", 0.5))
    raise ConfigError(f"unknown policy kind {kind!r}")


def _seed(cfg: dict, cli_seed, required: bool):
    seed = cli_seed if cli_seed is not None else cfg.get("seed")
    if seed is None:
        if required:
            raise ConfigError("a seed is required (--seed or config 'seed')")
        return None
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    return seed


# ---------------------------------------------------------------------------
# output helpers


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_plain(payload), indent=2, sort_keys=True) + "\n")


def _header_line(header: dict) -> str:
    return f"# {json.dumps(_plain(header), sort_keys=True)}\n"


def write_rows(path: Path, header: dict, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_header_line(header))
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def histogram(values, bins=None) -> tuple[np.ndarray, np.ndarray]:
    """Counts and edges; Freedman-Diaconis bin width unless ``bins`` is given."""
    values = np.asarray(values, dtype=float)
    edges = np.histogram_bin_edges(values, bins="fd" if bins is None else int(bins))
    counts, edges = np.histogram(values, bins=edges)
    return counts, edges


# ---------------------------------------------------------------------------
# subcommands


def cmd_eval(cfg: dict, seed, out: Path) -> int:
    _check_keys(cfg, {"mdp", "policy", "seed"}, "eval config")
    mdp, builtin = build_mdp(cfg.get("mdp", "nonconvex"))
    pol = build_policy(cfg.get("policy"), mdp, builtin, "direct")
    res = evaluate(mdp, pol)
    write_json(out / "eval.json", {"config": cfg, "seed": seed, "result": res.to_dict()})
    return EXIT_OK


def cmd_frontier(cfg: dict, seed, out: Path) -> int:
    _check_keys(cfg, {"grid_resolution", "seed"}, "frontier config")
    rows = nonconvex_frontier(_count(cfg, "grid_resolution", 101))
    write_rows(out / "frontier.csv", {"config": cfg, "seed": seed}, ["theta1", "theta2", "J", "V"], rows)
    return EXIT_OK


def cmd_exact_opt(cfg: dict, seed, out: Path) -> int:
    _check_keys(
        cfg, {"mdp", "policy", "method", "penalty", "ascent", "variance_floor", "seed"}, "exact-opt config"
    )
    mdp, builtin = build_mdp(cfg.get("mdp", "nonconvex"))
    pol = build_policy(cfg.get("policy"), mdp, builtin, "direct")
    ascent = _make(AscentConfig, cfg.get("ascent"), "ascent")
    method = cfg.get("method", "constrained")
    if method == "constrained":
        trace = exact_constrained_ascent(mdp, pol, _make(PenaltyConfig, cfg.get("penalty"), "penalty"), ascent)
    elif method == "continuation":
        trace = penalty_continuation(mdp, pol, _make(PenaltyConfig, cfg.get("penalty"), "penalty"), ascent)
    elif method == "sharpe":
        trace = exact_sharpe_ascent(mdp, pol, ascent, float(cfg.get("variance_floor", 1e-3)))
    else:
        raise ConfigError(f"unknown exact-opt method {method!r}")
    trace.write_csv(out / "trace.csv", {"config": cfg, "seed": seed})
    return exit_code(trace.error) if trace.error else EXIT_OK


def _variant(spec: dict):
    spec = dict(spec)
    kind = spec.pop("kind", "constrained")
    if kind == "constrained":
        _check_keys(spec, {"lam", "b"}, "variant")
        lam, b = float(spec.get("lam", 1.0)), float(spec.get("b", 1.0))
        if lam < 0 or b < 0:
            raise ConfigError("lam and b must be >= 0")
        return Constrained(lam, b)
    if kind == "sharpe":
        _check_keys(spec, {"v_floor"}, "variant")
        v_floor = float(spec.get("v_floor", 1e-3))
        if v_floor <= 0:
            raise ConfigError("v_floor must be > 0")
        return Sharpe(v_floor)
    raise ConfigError(f"unknown variant kind {kind!r}")


def cmd_sim_opt(cfg: dict, seed, out: Path) -> int:
    _check_keys(
        cfg,
        {"mdp", "policy", "variant", "schedule", "episodes", "log_interval", "max_steps", "tracker_warmup", "seed"},
        "sim-opt config",
    )
    # everything is validated before the first episode
    schedule = _make(ScheduleConfig, cfg.get("schedule"), "schedule")
    variant = _variant(cfg.get("variant", {}))
    mdp, builtin = build_mdp(cfg.get("mdp", "nonconvex"))
    pol = build_policy(cfg.get("policy"), mdp, builtin, "softmax")
    episodes = _count(cfg, "episodes", 10_000)
    log_interval = max(1, _count(cfg, "log_interval", 1000))
    max_steps = max(1, _count(cfg, "max_steps", 10_000))
    warmup = _count(cfg, "tracker_warmup", 0)
    trace = run_two_timescale(
        mdp, pol, variant, schedule, episodes, np.random.default_rng(seed),
        log_interval=log_interval, max_steps=max_steps, tracker_warmup=warmup,
    )
    trace.write_csv(out / "trace.csv", {"config": cfg, "seed": seed})
    return exit_code(trace.error) if trace.error else EXIT_OK


# ---------------------------------------------------------------------------
# portfolio experiment


def evaluate_portfolio_policy(cfg: PortfolioConfig, policy, episodes: int, rng) -> dict:
    """Roll out ``episodes`` episodes; returns totals and invest statistics."""
    totals = np.empty(episodes)
    executed = chosen = 0
    for i in range(episodes):
        ep = portfolio_episode(cfg, policy, rng)
        totals[i] = ep.total_reward
        executed += sum(bool(f) for f in ep.info)
        chosen += sum(ep.actions)
    steps = max(episodes * cfg.horizon, 1)
    return {"returns": totals, "invest_rate": executed / steps, "invest_action_rate": chosen / steps}


def _criterion_settings(exp: dict, name: str) -> tuple:
    crit = dict(exp["criteria"][name])
    schedule = _make(ScheduleConfig, _merge(exp["schedule"], crit.pop("schedule", {})), f"{name} schedule")
    if name == "average":
        _check_keys(crit, set(), "average criterion")
        return Constrained(0.0, 0.0), schedule
    if name == "constrained":
        return _variant({"kind": "constrained", **crit}), schedule
    return _variant({"kind": "sharpe", **crit}), schedule


def run_portfolio_experiment(config: dict, seed: int, criteria=PORTFOLIO_CRITERIA) -> dict:
    """Train one policy per criterion, evaluate each, and summarize.

    Returns ``{"config", "seed", "summary", "results"}`` where ``results``
    maps a criterion to its trace, evaluation returns and histogram.
    Training and evaluation of criterion ``i`` draw from independent streams
    seeded by ``(seed, i, stage)``, so adding or dropping a criterion does
    not change the others.
    """
    _check_keys(config, set(PORTFOLIO_DEFAULTS) | {"seed"}, "portfolio config")
    exp = _merge(PORTFOLIO_DEFAULTS, {k: v for k, v in config.items() if k != "seed"})
    _check_keys(exp["criteria"], PORTFOLIO_CRITERIA, "criteria")
    pcfg = PortfolioConfig.from_dict(exp["portfolio"])
    episodes = _count(exp, "episodes", 0)
    eval_episodes = _count(exp, "eval_episodes", 0)
    if eval_episodes < 2:
        raise ConfigError("eval_episodes must be >= 2")
    theta0 = np.zeros(pcfg.num_features) if exp["theta0"] is None else np.array(exp["theta0"], dtype=float)
    if theta0.shape != (pcfg.num_features,):
        raise ConfigError(f"theta0 must have {pcfg.num_features} entries")
    settings = {name: _criterion_settings(exp, name) for name in criteria}

    env = PortfolioEnv(pcfg)
    summary, results = {}, {}
    for name in criteria:
        variant, schedule = settings[name]
        idx = PORTFOLIO_CRITERIA.index(name)
        pol = EpsilonSigmoidPolicy(theta0, pcfg.epsilon)
        trace = run_two_timescale(
            env, pol, variant, schedule, episodes, np.random.default_rng([seed, idx, 0]),
            log_interval=max(1, int(exp["log_interval"])), max_steps=pcfg.horizon,
            tracker_warmup=_count(exp, "tracker_warmup", 0),
        )
        if trace.error is not None:
            raise trace.error
        trained = pol.with_theta(trace.final_theta)
        ev = evaluate_portfolio_policy(pcfg, trained, eval_episodes, np.random.default_rng([seed, idx, 1]))
        r = ev["returns"]
        mean, var = float(r.mean()), float(r.var(ddof=1))
        summary[name] = {
            "mean": mean,
            "variance": var,
            "std": math.sqrt(var),
            "sharpe": mean / math.sqrt(var) if var > 0 else None,
            "se_mean": math.sqrt(var / r.size),
            "invest_rate": ev["invest_rate"],
            "invest_action_rate": ev["invest_action_rate"],
            "eval_episodes": int(r.size),
            "train_episodes": episodes,
            "final_theta": trace.final_theta,
            "final_j_tilde": trace.final_state.j_tilde,
            "final_v_tilde": trace.final_state.v_tilde,
        }
        if name == "constrained":
            summary[name].update(lam=variant.lam, b=variant.b)
        counts, edges = histogram(r, exp["bins"])
        results[name] = {"trace": trace, "returns": r, "counts": counts, "edges": edges}
        log.info("portfolio %s: mean=%.4f var=%.5f invest=%.3f", name, mean, var, ev["invest_rate"])
    return {"config": exp, "seed": seed, "summary": summary, "results": results}


def cmd_portfolio(cfg: dict, seed, out: Path) -> int:
    crits = cfg.get("run_criteria", list(PORTFOLIO_CRITERIA))
    if not set(crits) <= set(PORTFOLIO_CRITERIA) or not crits:
        raise ConfigError(f"run_criteria must be a non-empty subset of {PORTFOLIO_CRITERIA}")
    body = {k: v for k, v in cfg.items() if k != "run_criteria"}
    run = run_portfolio_experiment(body, seed, tuple(c for c in PORTFOLIO_CRITERIA if c in crits))
    header = {"config": run["config"], "seed": seed}
    for name, res in run["results"].items():
        rows = zip(res["edges"][:-1], res["edges"][1:], res["counts"].tolist())
        write_rows(out / f"histogram_{name}.csv", {**header, "criterion": name},
                   ["bin_left", "bin_right", "count"], rows)
        res["trace"].write_csv(out / f"trace_{name}.csv", {**header, "criterion": name})
    write_json(out / "summary.json", {**header, "criteria": run["summary"]})
    return EXIT_OK


COMMANDS = {
    "eval": (cmd_eval, False),
    "frontier": (cmd_frontier, False),
    "exact-opt": (cmd_exact_opt, False),
    "sim-opt": (cmd_sim_opt, True),
    "portfolio": (cmd_portfolio, True),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="varpg", description="Mean-variance policy gradient experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="random seed; overrides the config's 'seed'")
    p.add_argument("--out", default="results", help="output directory (default: results)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    fn, stochastic = COMMANDS[args.command]
    try:
        cfg = load_config(args.config) if args.config else {}
        seed = _seed(cfg, args.seed, stochastic)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return fn(cfg, seed, out)
    except VarpgError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exit_code(exc)
    except (KeyError, TypeError, ValueError) as exc:
        log.error("invalid configuration: %r", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
