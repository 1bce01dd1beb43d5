"""Run configuration: a YAML file merged over defaults, then CLI overrides.

Schema (every section optional except where a command needs it)::

    seed: 1                    # master seed, required
    out: runs/example          # output directory, required
    repeats: 1
    threads: 1
    model: {family: owls, variant: 8, voles: false}
    #      {family: herons, productivity: regime, A: 2, K: 2}
    data: path/to/dataset      # directory in the layout of ipmsmc.io
    theta: fixture             # or {name: value}; used by pf and simulate
    simulate: {T: 26, releases: 50, first_year: null}
    pf: {n_particles: 500, ess_threshold: 0.9, resampling: systematic}
    pmcmc: {n_iters: 1000, delayed_acceptance: true, alpha: 1.0,
            init: fixture, proposal_sd: 0.1, covariance: null, lambda: 1.0}
    smc: {n_outer: 500, n_inner: 500, ess_star: 0.9, cess_star_alpha: 0.99,
          cess_star_beta: 0.99, lambda0: 1.0, mcmc_moves_per_step: 1,
          two_stage: true, schedule: adaptive}
    compare: {models: [...model descriptions...], log_priors: null}
    diag: {chain: path/to/chain.jsonl, max_lag: 100}

Paths are resolved relative to the config file.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from .models import normalise_description
from .pf import RESAMPLING_MODES

COMMANDS = ("simulate", "pf", "pmcmc", "smc", "compare", "diag")

DEFAULTS = {
    "seed": None,
    "out": None,
    "repeats": 1,
    "threads": 1,
    "model": None,
    "data": None,
    "theta": "fixture",
    "simulate": {"T": 26, "releases": 50, "first_year": None},
    "pf": {"n_particles": 500, "ess_threshold": 0.9, "resampling": "systematic"},
    "pmcmc": {
        "n_iters": 1000, "delayed_acceptance": True, "alpha": 1.0, "init": "fixture",
        "proposal_sd": 0.1, "covariance": None, "lambda": 1.0,
    },
    "smc": {
        "n_outer": 500, "n_inner": 500, "ess_star": 0.9, "cess_star_alpha": 0.99, "cess_star_beta": 0.99,
        "lambda0": 1.0, "mcmc_moves_per_step": 1, "two_stage": True, "schedule": "adaptive",
    },
    "compare": {"models": None, "log_priors": None},
    "diag": {"chain": None, "max_lag": 100},
}


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


@dataclass(frozen=True)
class RunConfig:
    command: str
    values: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def out(self) -> Path:
        return self.path("out")

    def path(self, key) -> Path | None:
        v = self.values.get(key)
        return None if v is None else (self.base_dir / v).resolve()

    def resolved(self) -> dict:
        """Full configuration as written to the run manifest."""
        out = copy.deepcopy(self.values)
        out["command"] = self.command
        for key in ("data", "out"):
            if out.get(key) is not None:
                out[key] = str(self.path(key))
        if out["diag"].get("chain") is not None:
            out["diag"]["chain"] = str((self.base_dir / out["diag"]["chain"]).resolve())
        return out


def _merge(base: dict, over: dict, where="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key '{where}{k}'")
        if isinstance(base[k], dict) and base[k] and k not in ("theta",):
            if not isinstance(v, dict):
                raise ConfigError(f"config key '{where}{k}' must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _int(v, name, lo=1):
    if not isinstance(v, int) or isinstance(v, bool) or v < lo:
        raise ConfigError(f"'{name}' must be an integer >= {lo}")
    return v


def _real(v, name, lo=None, hi=None, open_lo=True, open_hi=True):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"'{name}' must be a number")
    v = float(v)
    if lo is not None and (v <= lo if open_lo else v < lo):
        raise ConfigError(f"'{name}' out of range")
    if hi is not None and (v >= hi if open_hi else v > hi):
        raise ConfigError(f"'{name}' out of range")
    return v


def _model(desc, where):
    try:
        return normalise_description(desc)
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None


def validate(command: str, v: dict, base_dir: Path) -> None:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if v["seed"] is None:
        raise ConfigError("a master seed is required (config 'seed' or --seed)")
    _int(v["seed"], "seed", 0)
    if v["out"] is None:
        raise ConfigError("an output directory is required (config 'out' or --out)")
    _int(v["repeats"], "repeats")
    _int(v["threads"], "threads")

    if command in ("simulate", "pf", "pmcmc", "smc"):
        if v["model"] is None:
            raise ConfigError(f"command '{command}' needs a 'model' section")
        v["model"] = _model(v["model"], "model")
    if command in ("pf", "pmcmc", "smc", "compare"):
        if v["data"] is None:
            raise ConfigError(f"command '{command}' needs a 'data' directory")
        if not (base_dir / v["data"]).is_dir():
            raise ConfigError(f"data directory not found: {base_dir / v['data']}")
    theta = v["theta"]
    if not (theta == "fixture" or (isinstance(theta, dict) and all(isinstance(x, (int, float)) for x in theta.values()))):
        raise ConfigError("'theta' must be 'fixture' or a mapping of parameter values")

    s = v["simulate"]
    _int(s["T"], "simulate.T", 3)
    rel = s["releases"]
    if isinstance(rel, list):
        for r in rel:
            _int(r, "simulate.releases", 0)
    else:
        _int(rel, "simulate.releases", 0)
    if s["first_year"] is not None:
        _int(s["first_year"], "simulate.first_year", 0)

    p = v["pf"]
    _int(p["n_particles"], "pf.n_particles")
    _real(p["ess_threshold"], "pf.ess_threshold", 0, 1, open_lo=False, open_hi=False)
    if p["resampling"] not in RESAMPLING_MODES:
        raise ConfigError(f"pf.resampling must be one of {RESAMPLING_MODES}")

    c = v["pmcmc"]
    _int(c["n_iters"], "pmcmc.n_iters")
    if not isinstance(c["delayed_acceptance"], bool):
        raise ConfigError("pmcmc.delayed_acceptance must be true or false")
    _real(c["alpha"], "pmcmc.alpha", 0, 1, open_lo=False, open_hi=False)
    _real(c["proposal_sd"], "pmcmc.proposal_sd", 0)
    _real(c["lambda"], "pmcmc.lambda", 0)
    if not (c["init"] in ("fixture", "prior") or isinstance(c["init"], dict)):
        raise ConfigError("pmcmc.init must be 'fixture', 'prior' or a mapping")
    if c["covariance"] is not None and not isinstance(c["covariance"], list):
        raise ConfigError("pmcmc.covariance must be a list of rows")

    m = v["smc"]
    _int(m["n_outer"], "smc.n_outer", 2)
    _int(m["n_inner"], "smc.n_inner")
    for k in ("ess_star", "cess_star_alpha", "cess_star_beta"):
        _real(m[k], f"smc.{k}", 0, 1)
    _real(m["lambda0"], "smc.lambda0", 0)
    _int(m["mcmc_moves_per_step"], "smc.mcmc_moves_per_step")
    if not isinstance(m["two_stage"], bool):
        raise ConfigError("smc.two_stage must be true or false")
    sch = m["schedule"]
    if sch != "adaptive":
        if m["two_stage"]:
            raise ConfigError("a fixed schedule needs smc.two_stage: false")
        if not isinstance(sch, list) or not sch or sch[-1] != 1:
            raise ConfigError("smc.schedule must be 'adaptive' or an increasing list ending at 1")
        prev = 0.0
        for t in sch:
            if _real(t, "smc.schedule", 0, 1, open_hi=False) <= prev:
                raise ConfigError("smc.schedule must be strictly increasing")
            prev = float(t)

    if command == "compare":
        models = v["compare"]["models"]
        if not isinstance(models, list) or len(models) < 2:
            raise ConfigError("compare.models must list at least two models")
        v["compare"]["models"] = [_model(d, f"compare.models[{i}]") for i, d in enumerate(models)]
        names = [d["name"] for d in v["compare"]["models"]]
        if len(set(names)) != len(names):
            raise ConfigError("compare.models need distinct names (set 'name' on duplicates)")
        families = {d["family"] for d in v["compare"]["models"]}
        if len(families) != 1:
            raise ConfigError("compare.models must share one model family (one dataset)")
        lp = v["compare"]["log_priors"]
        if lp is not None and (not isinstance(lp, dict) or set(lp) != set(names)):
            raise ConfigError("compare.log_priors must map every model name to a log prior")

    if command == "diag":
        chain = v["diag"]["chain"]
        if chain is None or not (base_dir / chain).is_file():
            raise ConfigError("diag.chain must name an existing chain file")
        _int(v["diag"]["max_lag"], "diag.max_lag")


def load_config(command: str, path=None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (YAML), apply ``overrides`` (CLI flags) and validate."""
    raw = {}
    base_dir = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: not valid YAML: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        base_dir = p.resolve().parent
    if "manifest_version" in raw:
        raw = dict(raw.get("config") or {})
    raw.pop("command", None)
    values = _merge(DEFAULTS, raw)
    for k, val in (overrides or {}).items():
        if val is not None:
            values[k] = str(Path(val).resolve()) if k == "out" else val
    validate(command, values, base_dir)
    return RunConfig(command, values, base_dir)


__all__ = ["COMMANDS", "DEFAULTS", "ConfigError", "RunConfig", "load_config", "validate"]
