"""Command-line driver.

Subcommands: simulate, screen, fit, sweep, impute, diagnose, analyze. Every
command reads a JSON configuration (key/value grouped in sections) and
writes its artifacts plus a manifest.json under the output directory. The
manifest embeds the fully resolved configuration and the seed, and can be
passed back as --config to reproduce a run byte-for-byte.

Exit codes: 0 success, 1 user/configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

import numpy as np
import scipy

from . import __version__
from .analysis import cca_analysis, compare_report, fit_event_model, pool_gee
from .archive import PosteriorArchive
from .design import DesignSpec, StackedData, assemble_designs
from .diagnostics import bic, convergence_report, lpml, model_comparison_table, ppp_suite
from .errors import ConfigurationError, DataError, LpmiError, NumericalError, PoolingError
from .joint import JointFitConfig, extract_imputations_joint, run_joint_chain
from .marginal import MarginalFitConfig, impute_marginal, run_chain
from .panel import (Panel, PanelConfig, completed_records, read_panel_csv,
                    records_to_csv, write_panel)
from .rng import RngStream
from .simulate import GeneratorConfig, Mechanism, generate, paper_like_config, write_truth_json
from .splines import SplineBasisSpec

logger = logging.getLogger("lpmi")


# ---------------------------------------------------------------------------
# configuration plumbing


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"config file {path} is not valid JSON: {err}")
    # a manifest can be replayed directly
    if "config" in raw and "command" in raw:
        return raw["config"]
    return raw


def section(config: dict, name: str) -> dict:
    value = config.get(name, {})
    if not isinstance(value, dict):
        raise ConfigurationError(f"config section '{name}' must be an object")
    return value


def require(sec: dict, section_name: str, key: str):
    if key not in sec:
        raise ConfigurationError(f"missing config key [{section_name}] {key}")
    return sec[key]


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(out_dir: str, command: str, config: dict, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": section(config, "mcmc").get("seed", section(config, "simulate").get("seed", 0)),
        "versions": {"lpmi": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": sorted(outputs),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def panel_config_from(config: dict) -> PanelConfig:
    inp = section(config, "input")
    return PanelConfig(
        baseline_quarters=int(inp.get("baseline_quarters", 4)),
        time_varying=tuple(inp.get("time_varying", [])),
        delimiter=inp.get("delimiter", ","),
    )


def load_panel(config: dict) -> Panel:
    inp = section(config, "input")
    path = require(inp, "input", "panel")
    if not os.path.exists(path):
        raise ConfigurationError(f"[input] panel file not found: {path}")
    return read_panel_csv(path, panel_config_from(config))


def spline_from(model: dict) -> SplineBasisSpec:
    sp = model.get("spline", {})
    return SplineBasisSpec(
        knot_quantiles=tuple(sp.get("knot_quantiles", SplineBasisSpec().knot_quantiles)),
        degree=int(sp.get("degree", 3)),
        include_intercept_in_basis=bool(sp.get("include_intercept_in_basis", False)),
    )


def design_from(config: dict) -> DesignSpec:
    model = section(config, "model")
    alloc = model.get("allocation")
    return DesignSpec(
        fixed=tuple(model.get("fixed", ["1"])),
        profile=tuple(model.get("profile", ["spline"])),
        random=tuple(model.get("random", ["1"])),
        allocation=tuple(alloc) if alloc is not None else None,
        spline=spline_from(model),
    )


def presence_design_from(config: dict) -> DesignSpec:
    model = section(config, "model")
    return DesignSpec(
        fixed=tuple(model.get("presence_fixed", model.get("fixed", ["1"]))),
        profile=tuple(model.get("presence_profile", model.get("profile", ["spline"]))),
        random=tuple(model.get("presence_random", ["1"])),
        spline=spline_from(model),
    )


def fit_config_from(config: dict, L: int | None = None, stream_offset: int = 0):
    model = section(config, "model")
    mcmc = section(config, "mcmc")
    mode = model.get("mode", "marginal")
    if mode not in ("marginal", "joint"):
        raise ConfigurationError(f"[model] mode must be 'marginal' or 'joint', got {mode!r}")
    kwargs = dict(
        L=int(L if L is not None else require(model, "model", "L")),
        iterations=int(mcmc.get("iterations", 12000)),
        burn_in=int(mcmc.get("burn_in", 2000)),
        thin=int(mcmc.get("thin", 10)),
        seed=int(mcmc.get("seed", 0)),
        stream_id=int(mcmc.get("stream_id", 0)) + stream_offset,
    )
    if mode == "joint":
        return JointFitConfig(M=int(section(config, "imputation").get("M", 100)), **kwargs)
    return MarginalFitConfig(**kwargs)


def _fit_once(panel, config, L=None, stream_offset=0, checkpoint_dir=None,
              checkpoint_every=None, resume_from=None) -> PosteriorArchive:
    mode = section(config, "model").get("mode", "marginal")
    designs = assemble_designs(panel, design_from(config))
    fit_cfg = fit_config_from(config, L, stream_offset)
    if mode == "joint":
        presence = assemble_designs(panel, presence_design_from(config))
        return run_joint_chain(panel, designs, presence, fit_cfg,
                               checkpoint_dir=checkpoint_dir,
                               checkpoint_every=checkpoint_every, resume_from=resume_from)
    return run_chain(panel, designs, fit_cfg, checkpoint_dir=checkpoint_dir,
                     checkpoint_every=checkpoint_every, resume_from=resume_from)


# ---------------------------------------------------------------------------
# command handlers


def cmd_simulate(config: dict, out_dir: str) -> list[str]:
    sim = section(config, "simulate")
    seed = int(sim.get("seed", 0))
    preset = sim.get("preset", "paper_like")
    if preset == "paper_like":
        mech = sim.get("mechanism")
        mechanism = None
        if mech:
            mechanism = Mechanism(kind=mech.get("kind", "mcar"), p=float(mech.get("p", 0.5)),
                                  nu=tuple(mech.get("nu", [])),
                                  gamma=np.asarray(mech["gamma"], dtype=float)
                                  if "gamma" in mech else None,
                                  e_var=float(mech.get("e_var", 1e-12)))
        gen_cfg = paper_like_config(n=int(sim.get("n", 500)), seed=seed, mechanism=mechanism)
    else:
        raise ConfigurationError(f"unknown simulate preset '{preset}'")
    panel, truth = generate(gen_cfg)
    panel_path = os.path.join(out_dir, "panel.csv")
    manifest_path = os.path.join(out_dir, "panel_manifest.json")
    extra = {"knots": None}
    write_panel(panel, panel_path, manifest_path, extra_manifest=extra)
    truth_path = os.path.join(out_dir, "truth.json")
    write_truth_json(truth, truth_path)
    return [panel_path, manifest_path, truth_path]


def cmd_screen(config: dict, out_dir: str) -> list[str]:
    from .screening import screen_covariates
    panel = load_panel(config)
    scr = section(config, "screen")
    selected = screen_covariates(panel, alpha=float(scr.get("alpha", 0.05)),
                                 candidates=scr.get("candidates"))
    path = os.path.join(out_dir, "covariates.json")
    with open(path, "w") as fh:
        json.dump({"selected": selected, "alpha": float(scr.get("alpha", 0.05))},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [path]


def cmd_fit(config: dict, out_dir: str, resume: bool = False) -> list[str]:
    panel = load_panel(config)
    mcmc = section(config, "mcmc")
    checkpoint_every = int(mcmc.get("checkpoint_every", 0)) or None
    checkpoint_dir = os.path.join(out_dir, "checkpoint")
    resume_from = checkpoint_dir if resume else None
    if resume and not os.path.exists(os.path.join(checkpoint_dir, "index.json")):
        raise ConfigurationError(f"--resume requested but no checkpoint at {checkpoint_dir}")
    archive = _fit_once(panel, config, checkpoint_dir=checkpoint_dir,
                        checkpoint_every=checkpoint_every, resume_from=resume_from)
    archive_dir = os.path.join(out_dir, "archive")
    archive.save(archive_dir)
    return [archive_dir]


def cmd_sweep(config: dict, out_dir: str) -> list[str]:
    panel = load_panel(config)
    model = section(config, "model")
    sweep = model.get("L_sweep")
    if not sweep:
        raise ConfigurationError("missing config key [model] L_sweep")
    designs = assemble_designs(panel, design_from(config))
    mode = model.get("mode", "marginal")
    presence = assemble_designs(panel, presence_design_from(config)) \
        if mode == "joint" else None
    entries = []
    outputs = []
    for offset, L in enumerate(sweep):
        archive = _fit_once(panel, config, L=int(L), stream_offset=offset)
        adir = os.path.join(out_dir, f"L{L}", "archive")
        archive.save(adir)
        outputs.append(adir)
        report = bic(archive, panel, designs, presence)
        entries.append((int(L), report.bic, lpml(archive.loglik).lpml))
    rows = model_comparison_table(entries)
    table_path = os.path.join(out_dir, "sweep.json")
    with open(table_path, "w") as fh:
        json.dump({"mode": mode,
                   "rows": [{"L": r.L, "bic": r.bic, "lpml": r.lpml,
                             "best_bic": r.best_bic, "best_lpml": r.best_lpml}
                            for r in rows]}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    csv_path = os.path.join(out_dir, "sweep.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["L", "bic", "lpml", "best_bic", "best_lpml"])
        for r in rows:
            writer.writerow([r.L, f"{r.bic:.6f}", f"{r.lpml:.6f}",
                             int(r.best_bic), int(r.best_lpml)])
    return outputs + [table_path, csv_path]


def _load_archive(config: dict, out_dir: str) -> PosteriorArchive:
    inp = section(config, "input")
    archive_dir = inp.get("archive", os.path.join(out_dir, "archive"))
    if not os.path.exists(os.path.join(archive_dir, "index.json")):
        raise ConfigurationError(f"no archive found at {archive_dir}; run fit first or "
                                 "set [input] archive")
    return PosteriorArchive.load(archive_dir)


def cmd_impute(config: dict, out_dir: str) -> list[str]:
    panel = load_panel(config)
    archive = _load_archive(config, out_dir)
    M = int(section(config, "imputation").get("M", 100))
    seed = int(section(config, "mcmc").get("seed", 0))
    if archive.mode == "joint":
        completed = extract_imputations_joint(archive, M)
    else:
        designs = assemble_designs(panel, design_from(config))
        completed = impute_marginal(archive, panel, designs, M,
                                    RngStream(seed, stream_id=900))
    names = list(panel.baseline_covariate_names) + list(panel.time_varying_names)
    outputs = []
    imp_dir = os.path.join(out_dir, "imputations")
    os.makedirs(imp_dir, exist_ok=True)
    for m, y in enumerate(completed, start=1):
        path = os.path.join(imp_dir, f"imputed_{m:04d}.csv")
        records_to_csv(completed_records(panel, y), names, path)
        outputs.append(path)
    index_path = os.path.join(imp_dir, "imputations.json")
    with open(index_path, "w") as fh:
        json.dump({"M": M, "mode": archive.mode,
                   "files": [os.path.basename(p) for p in outputs]},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return outputs + [index_path]


def cmd_diagnose(config: dict, out_dir: str) -> list[str]:
    panel = load_panel(config)
    archive = _load_archive(config, out_dir)
    designs = assemble_designs(panel, design_from(config))
    presence = assemble_designs(panel, presence_design_from(config)) \
        if archive.mode == "joint" else None
    T0 = int(section(config, "diagnostics").get("T0", 500))
    seed = int(section(config, "mcmc").get("seed", 0))
    bic_report = bic(archive, panel, designs, presence)
    lpml_result = lpml(archive.loglik)
    suite = ppp_suite(archive, panel, designs, T0, RngStream(seed, stream_id=901))
    try:
        conv = convergence_report(archive)
    except ConfigurationError as err:
        conv = {"error": str(err)}
    report = {
        "bic": bic_report.to_json_dict(),
        "lpml": {"lpml": lpml_result.lpml,
                 "excluded_patients": lpml_result.excluded,
                 "unstable_patients": lpml_result.unstable},
        "ppp": suite.to_json_dict(),
        "convergence": conv,
        "T0": T0,
    }
    path = os.path.join(out_dir, "diagnostics.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    ppp_path = os.path.join(out_dir, "ppp_patient.csv")
    with open(ppp_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_index", "statistic", "ppp"])
        for name, vals in suite.patient_ppp.items():
            for i, v in enumerate(vals):
                writer.writerow([i, name, "" if np.isnan(v) else f"{v:.6f}"])
    quarters_path = os.path.join(out_dir, "ppp_quarters.csv")
    with open(quarters_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["quarter", "n_observed", "observed_mean", "predictive_mean",
                         "predictive_lo95", "predictive_hi95"])
        for row in suite.quarter_rows:
            writer.writerow([row["quarter"], row["n_observed"],
                             f"{row['observed_mean']:.6f}", f"{row['predictive_mean']:.6f}",
                             f"{row['predictive_lo95']:.6f}", f"{row['predictive_hi95']:.6f}"])
    return [path, ppp_path, quarters_path]


def cmd_analyze(config: dict, out_dir: str) -> list[str]:
    panel = load_panel(config)
    ana = section(config, "analysis")
    adjusters = tuple(ana.get("adjusters", []))
    correlation = ana.get("correlation", "exchangeable")
    imp_dir = section(config, "input").get("imputations",
                                           os.path.join(out_dir, "imputations"))
    index_path = os.path.join(imp_dir, "imputations.json")
    if not os.path.exists(index_path):
        raise ConfigurationError(f"no imputations at {imp_dir}; run impute first or "
                                 "set [input] imputations")
    with open(index_path) as fh:
        index = json.load(fh)
    if index["M"] < 2:
        raise PoolingError("pooling requires M >= 2 imputed datasets")
    pcfg = panel_config_from(config)
    fits = []
    for fname in index["files"]:
        completed = read_panel_csv(os.path.join(imp_dir, fname), pcfg)
        fits.append(fit_event_model(completed, adjusters=adjusters,
                                    correlation=correlation))
    pooled = pool_gee(fits)
    cca = cca_analysis(panel, adjusters=adjusters, correlation=correlation)
    rows = compare_report(pooled, cca)
    json_path = os.path.join(out_dir, "analysis.json")
    with open(json_path, "w") as fh:
        json.dump({
            "pooled": [{"term": e.name, "estimate": e.estimate, "within": e.within,
                        "between": e.between, "total": e.total, "df": e.df,
                        "lo95": e.lo95, "hi95": e.hi95, "M": e.M} for e in pooled],
            "cca": {"coef": {n: float(c) for n, c in zip(cca.names, cca.coef)},
                    "rho": cca.rho, "converged": cca.converged},
            "df_convention": "classic small-M combining rules, no finite-population "
                             "correction; df capped at 1e12 when between-variance is 0",
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    csv_path = os.path.join(out_dir, "comparison.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["term", "source", "estimate", "lo95", "hi95", "reference"])
        for row in rows:
            writer.writerow([row["term"], row["source"], f"{row['estimate']:.8f}",
                             f"{row['lo95']:.8f}", f"{row['hi95']:.8f}", row["reference"]])
    return [json_path, csv_path]


HANDLERS = {
    "simulate": cmd_simulate,
    "screen": cmd_screen,
    "fit": cmd_fit,
    "sweep": cmd_sweep,
    "impute": cmd_impute,
    "diagnose": cmd_diagnose,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="lpmi",
        description="Latent-profile multiple imputation for longitudinal panels")
    parser.add_argument("command", choices=sorted(HANDLERS))
    parser.add_argument("--config", required=True,
                        help="JSON configuration (or a manifest.json to replay)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--resume", action="store_true",
                        help="fit only: resume from the checkpoint in --out")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "fit":
            outputs = cmd_fit(config, args.out, resume=args.resume)
        else:
            outputs = HANDLERS[args.command](config, args.out)
        write_manifest(args.out, args.command, config, outputs)
    except (ConfigurationError, DataError, PoolingError) as err:
        logger.error("%s", err)
        return 1
    except NumericalError as err:
        logger.error("numerical failure: %s", err)
        return 2
    except LpmiError as err:
        logger.error("%s", err)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
