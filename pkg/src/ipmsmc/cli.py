"""Command-line front end: ``ipmsmc {simulate,pf,pmcmc,smc,compare,diag}``.

Every command validates its configuration and inputs before writing
anything, derives all randomness from the master seed (repeat ``k`` uses
``SeedSequence([seed, k])``; compare adds the model index), and writes a
``manifest.json`` that can be passed back as ``--config`` to rerun.
Exit codes: 0 success, 2 configuration or input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .config import COMMANDS, ConfigError, RunConfig, load_config
from .core import NumericalAbort
from .io import DataError, load_dataset, write_dataset, write_json
from .models import build_model, fixture_theta, layout, simulate_dataset
from .oracles import autocorrelation, integrated_autocorr_time
from .pf import PfConfig, run_pf_adaptive, run_pf_simple
from .pmcmc import ChainRecord, ProposalConfig, run_chain
from .smc import SamplerConfig, posterior_model_probabilities, run_smc_single_stage, run_smc_two_stage

log = logging.getLogger("ipmsmc")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
MANIFEST_VERSION = 1
TIMING_KEYS = ("seconds", "seconds_cum")


def package_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def repeat_dir(out: Path, k: int, repeats: int) -> Path:
    d = out if repeats == 1 else out / f"repeat_{k}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def resolve_theta(desc: dict, T: int, spec) -> np.ndarray:
    """``'fixture'`` or a mapping layered over the fixture; unknown names are an error."""
    overrides = {} if spec == "fixture" else dict(spec)
    names = layout(desc, T)
    unknown = set(overrides) - set(names)
    if unknown:
        raise ConfigError(f"unknown parameter(s) {sorted(unknown)} for model {desc['name']}")
    try:
        return fixture_theta(desc, T, overrides)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def sampler_config(cfg: RunConfig) -> SamplerConfig:
    s = cfg["smc"]
    p = cfg["pf"]
    return SamplerConfig(
        n_outer=s["n_outer"], n_inner=s["n_inner"], ess_star=s["ess_star"],
        cess_star_alpha=s["cess_star_alpha"], cess_star_beta=s["cess_star_beta"], lambda0=s["lambda0"],
        mcmc_moves_per_step=s["mcmc_moves_per_step"], pf_ess_threshold=p["ess_threshold"],
        pf_resampling=p["resampling"],
    )


def pf_config(cfg: RunConfig) -> PfConfig:
    p = cfg["pf"]
    return PfConfig(p["n_particles"], p["ess_threshold"], p["resampling"])


def write_manifest(cfg: RunConfig, outputs: list[str], extra: dict | None = None) -> None:
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "package_version": package_version(),
        "command": cfg.command,
        "config": cfg.resolved(),
        "seed_derivation": "numpy SeedSequence([seed, repeat]) (compare: [seed, repeat, model_index])",
        "outputs": sorted(outputs),
    }
    manifest.update(extra or {})
    write_json(cfg.out / "manifest.json", manifest)


def _load_data(cfg: RunConfig, family: str):
    try:
        return load_dataset(family, cfg.path("data"))
    except DataError as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> int:
    desc = cfg["model"]
    s = cfg["simulate"]
    T = s["T"]
    theta = resolve_theta(desc, T, cfg["theta"])
    releases = np.asarray(s["releases"]) if isinstance(s["releases"], list) else s["releases"]
    kw = {} if s["first_year"] is None else {"first_year": s["first_year"]}
    if desc["family"] == "herons" and np.ndim(releases) == 1 and len(releases) != min(T - 1, 43):
        raise ConfigError(f"herons releases list must have {min(T - 1, 43)} entries")
    if desc["family"] == "owls" and np.ndim(releases) == 1:
        if len(releases) != T - 1:
            raise ConfigError(f"owls releases list must have {T - 1} entries")
        releases = {g: releases for g in (("juv", "m"), ("juv", "f"), ("adult", "m"), ("adult", "f"))}
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    norm = {}
    for k in range(cfg["repeats"]):
        d = repeat_dir(out, k, cfg["repeats"])
        data, truth = simulate_dataset(desc, theta, T, releases, rng_for(cfg.seed, k), **kw)
        files = write_dataset(data, d)
        truth["model"] = desc
        write_json(d / "truth.json", truth)
        rel = d.relative_to(out)
        outputs += [str(rel / f) for f in files + ["truth.json"]]
        norm[str(rel)] = data.covariates.normalisation()
    write_manifest(cfg, outputs, {"normalisation": norm})
    log.info("simulated %d dataset(s) into %s", cfg["repeats"], out)
    return EXIT_OK


def cmd_pf(cfg: RunConfig) -> int:
    desc = cfg["model"]
    data = _load_data(cfg, desc["family"])
    model = build_model(desc, data)
    theta = resolve_theta(desc, data.T, cfg["theta"])
    pfcfg = pf_config(cfg)
    y = data.counts.values
    runs = []
    for k in range(cfg["repeats"]):
        rng = rng_for(cfg.seed, k)
        if pfcfg.resampling == "always-multinomial":
            ll, cloud = run_pf_simple(model, theta, y, pfcfg.n_particles, rng)
        else:
            ll, cloud = run_pf_adaptive(model, theta, y, pfcfg, rng)
        runs.append({
            "repeat": k,
            "loglik": float(ll),
            "ess_path": [float(v) for v in cloud.ess[0]],
            "resample_steps": [int(t) for t in np.flatnonzero(cloud.resampled[0])],
        })
    cfg.out.mkdir(parents=True, exist_ok=True)
    result = {
        "model_id": model.model_id,
        "theta": dict(zip(model.param_names, map(float, theta))),
        "n_particles": pfcfg.n_particles,
        "loglik": runs[0]["loglik"],
        "ess_path": runs[0]["ess_path"],
        "resample_steps": runs[0]["resample_steps"],
        "runs": runs,
    }
    write_json(cfg.out / "pf.json", result)
    write_manifest(cfg, ["pf.json"], {"normalisation": data.covariates.normalisation()})
    log.info("%s: loglik %s", model.model_id, [r["loglik"] for r in runs])
    return EXIT_OK


def cmd_pmcmc(cfg: RunConfig) -> int:
    desc = cfg["model"]
    data = _load_data(cfg, desc["family"])
    model = build_model(desc, data)
    c = cfg["pmcmc"]
    init = None if c["init"] == "prior" else resolve_theta(desc, data.T, c["init"] if isinstance(c["init"], dict) else "fixture")
    if c["covariance"] is not None:
        sigma = np.asarray(c["covariance"], dtype=float)
        if sigma.shape != (model.dim, model.dim):
            raise ConfigError(f"pmcmc.covariance must be {model.dim} x {model.dim}")
    else:
        sigma = c["proposal_sd"] ** 2 * np.eye(model.dim)
    try:
        prop = ProposalConfig(sigma, c["lambda"])
    except ValueError as e:
        raise ConfigError(f"pmcmc.covariance: {e}") from None
    pfcfg = pf_config(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    outputs, summaries = [], []
    for k in range(cfg["repeats"]):
        d = repeat_dir(cfg.out, k, cfg["repeats"])
        rec = run_chain(model, data.counts.values, c["n_iters"], init, c["alpha"], prop, pfcfg,
                        c["delayed_acceptance"], rng_for(cfg.seed, k))
        rec.write_jsonl(d / "chain.jsonl")
        summary = {"model_id": model.model_id, "param_names": list(model.param_names), "repeat": k, **rec.summary()}
        write_json(d / "summary.json", summary)
        rel = d.relative_to(cfg.out)
        outputs += [str(rel / "chain.jsonl"), str(rel / "summary.json")]
        summaries.append(summary)
    write_manifest(cfg, outputs, {"normalisation": data.covariates.normalisation()})
    log.info("%s: acceptance %s", model.model_id, [round(s["acceptance_rate"], 3) for s in summaries])
    return EXIT_OK


def _run_smc(model, y, scfg: SamplerConfig, smc_section: dict, rng):
    if smc_section["two_stage"]:
        return run_smc_two_stage(model, y, scfg, rng=rng)
    return run_smc_single_stage(model, y, scfg, schedule=smc_section["schedule"], rng=rng)


def _smc_job(args):
    """Worker entry point; rebuilds model and data so only plain data crosses processes."""
    values, base_dir, command, desc, keys = args
    cfg = RunConfig(command, values, Path(base_dir))
    data = _load_data(cfg, desc["family"])
    model = build_model(desc, data)
    try:
        est = _run_smc(model, data.counts.values, sampler_config(cfg), cfg["smc"], rng_for(cfg.seed, *keys))
        return {"ok": True, "estimate": est}
    except NumericalAbort as e:
        return {"ok": False, "error": str(e), "diagnostics": e.diagnostics}


def _map_jobs(cfg: RunConfig, jobs):
    if cfg["threads"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg["threads"]) as ex:
            return list(ex.map(_smc_job, jobs))
    return [_smc_job(j) for j in jobs]


def cmd_smc(cfg: RunConfig) -> int:
    desc = cfg["model"]
    data = _load_data(cfg, desc["family"])
    build_model(desc, data)
    sampler_config(cfg)
    jobs = [(cfg.values, str(cfg.base_dir), cfg.command, desc, (k,)) for k in range(cfg["repeats"])]
    results = _map_jobs(cfg, jobs)
    cfg.out.mkdir(parents=True, exist_ok=True)
    outputs, rows, aborted = [], [], []
    for k, res in enumerate(results):
        d = repeat_dir(cfg.out, k, cfg["repeats"])
        rel = d.relative_to(cfg.out)
        if not res["ok"]:
            write_json(d / "abort.json", {"error": res["error"], "diagnostics": res["diagnostics"]})
            outputs.append(str(rel / "abort.json"))
            aborted.append(k)
            continue
        est = res["estimate"]
        est.write(d / "evidence.json", d / "particles.csv")
        outputs += [str(rel / "evidence.json"), str(rel / "particles.csv")]
        rows.append({"repeat": k, "log_evidence": est.log_evidence, "pf_calls": est.pf_calls})
    write_json(cfg.out / "evidence_summary.json", {"model_id": desc["name"], "runs": rows, "aborted": aborted})
    outputs.append("evidence_summary.json")
    write_manifest(cfg, outputs, {"normalisation": data.covariates.normalisation()})
    if aborted:
        log.error("numerical abort in repeat(s) %s; see abort.json", aborted)
        return EXIT_ABORT
    log.info("%s: log evidence %s", desc["name"], [round(r["log_evidence"], 3) for r in rows])
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    models = cfg["compare"]["models"]
    family = models[0]["family"]
    data = _load_data(cfg, family)
    for desc in models:
        build_model(desc, data)
    sampler_config(cfg)
    R = cfg["repeats"]
    jobs = [(cfg.values, str(cfg.base_dir), cfg.command, desc, (k, j))
            for k in range(R) for j, desc in enumerate(models)]
    results = _map_jobs(cfg, jobs)
    cfg.out.mkdir(parents=True, exist_ok=True)
    names = [d["name"] for d in models]
    table = {}
    with open(cfg.out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "repeat", "log_evidence", "pf_calls", "n_steps", "status"])
        for (_, _, _, desc, (k, j)), res in zip(jobs, results):
            if res["ok"]:
                est = res["estimate"]
                table[(desc["name"], k)] = est.log_evidence
                w.writerow([desc["name"], k, repr(float(est.log_evidence)), est.pf_calls, est.schedule.n_steps, "ok"])
            else:
                w.writerow([desc["name"], k, "", "", "", f"failed: {res['error']}"])
    log_priors = cfg["compare"]["log_priors"]
    with open(cfg.out / "model_probabilities.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["repeat", *names])
        for k in range(R):
            if all((n, k) in table for n in names):
                probs = posterior_model_probabilities({n: table[(n, k)] for n in names}, log_priors)
                w.writerow([k, *(repr(probs[n]) for n in names)])
    means = {n: float(np.mean([table[(n, k)] for k in range(R) if (n, k) in table])) for n in names
             if any((n, k) in table for k in range(R))}
    summary = {
        "models": names,
        "mean_log_evidence": means,
        "n_ok": {n: sum((n, k) in table for k in range(R)) for n in names},
        "posterior_probabilities_of_mean": (
            posterior_model_probabilities(means, log_priors) if len(means) == len(names) else None),
    }
    write_json(cfg.out / "compare_summary.json", summary)
    write_manifest(cfg, ["compare.csv", "model_probabilities.csv", "compare_summary.json"],
                   {"normalisation": data.covariates.normalisation()})
    log.info("mean log evidence: %s", means)
    return EXIT_OK


def cmd_diag(cfg: RunConfig) -> int:
    chain_path = (cfg.base_dir / cfg["diag"]["chain"]).resolve()
    summary_path = chain_path.parent / "summary.json"
    names = None
    if summary_path.is_file():
        names = json.loads(summary_path.read_text()).get("param_names")
    try:
        rec = ChainRecord.read_jsonl(chain_path, names)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"{chain_path}: unreadable chain ({e})") from None
    max_lag = cfg["diag"]["max_lag"]
    if rec.n_iters <= max_lag:
        raise ConfigError(f"diag.max_lag must be below the chain length {rec.n_iters}")
    sec_per_iter = float(rec.seconds_cum[-1]) / rec.n_iters
    cfg.out.mkdir(parents=True, exist_ok=True)
    acfs, stats = {}, {}
    for i, n in enumerate(rec.param_names):
        x = rec.theta[:, i]
        try:
            acfs[n] = autocorrelation(x, max_lag)
            tau = integrated_autocorr_time(x)
        except ValueError:
            acfs[n] = np.full(max_lag + 1, np.nan)
            tau = float("nan")
        stats[n] = {"iat": tau, "iat_seconds": tau * sec_per_iter, "mean": float(x.mean()), "sd": float(x.std())}
    with open(cfg.out / "acf.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lag", "lag_seconds", *rec.param_names])
        for lag in range(max_lag + 1):
            w.writerow([lag, repr(lag * sec_per_iter), *(repr(float(acfs[n][lag])) for n in rec.param_names)])
    write_json(cfg.out / "diag.json", {
        "n_iters": rec.n_iters,
        "acceptance_rate": float(rec.accepted.mean()),
        "stage1_pass_rate": float(rec.stage1_pass.mean()),
        "pf_calls": int(rec.pf_calls_cum[-1]),
        "seconds_per_iter": sec_per_iter,
        "parameters": stats,
    })
    write_manifest(cfg, ["acf.csv", "diag.json"])
    return EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate, "pf": cmd_pf, "pmcmc": cmd_pmcmc,
    "smc": cmd_smc, "compare": cmd_compare, "diag": cmd_diag,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ipmsmc", description="Particle methods for integrated population models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML config file (or a previous run's manifest.json)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", type=str, help="output directory")
        p.add_argument("--repeats", type=int, help="number of independent repeats")
        p.add_argument("--threads", type=int, help="worker processes for repeats")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {"seed": args.seed, "out": args.out, "repeats": args.repeats, "threads": args.threads}
    try:
        cfg = load_config(args.command, args.config, overrides)
        return HANDLERS[args.command](cfg)
    except (ConfigError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        print(json.dumps(e.diagnostics, default=str), file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())


__all__ = ["main", "build_parser", "rng_for", "TIMING_KEYS"]
