"""Command-line orchestration: simulate, fit, postprocess, ecoff, eval, gwas
and the staged pipeline.

Every run echoes its fully resolved configuration to ``run_config.json`` in
the output directory; reruns with the same seed and inputs overwrite every
artifact byte-identically. Exit codes: 0 success, 2 configuration error,
3 data validation error, 4 runtime or convergence failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import DpConfig, run_dp_chain, run_gm_chain
from .cgmm import FitConfig, PriorConfig, chain_seeds, run_chain
from .data import (
    SimSpec,
    load_dilution_grids,
    load_mic_dataset,
    simulate_dataset,
    write_mic_csv,
)
from .ecoff import counts_from_dataset, fit_wildtype_lognormal
from .errors import ConfigError, DataError, FitError
from .evaluate import load_truth_csv, true_negative_rate, true_positive_rate, write_rate_table
from .gwas import (
    GwasConfig,
    compute_grm,
    filter_variants,
    load_snp_csv,
    run_gwas_chain,
    summarize_gwas,
)
from .postprocess import (
    ClusterAssignments,
    concat_traces,
    diagnostics,
    map_allocations,
    posterior_k,
    relabel_trace,
)
from .svgplot import histogram_svg, manhattan_svg
from .traces import load_trace_csv, save_trace_csv

_METHODS = ("cgmm", "gm", "dp")


@dataclass
class RunConfig:
    """A subcommand plus its fully resolved option map."""

    command: str
    options: dict


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="micmix", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON file of option defaults")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)

    def add_fit_opts(p):
        p.add_argument("--grids", help="dilution grid CSV")
        p.add_argument("--data", help="MIC CSV")
        p.add_argument("--drug", help="drug code to fit")
        p.add_argument("--method", choices=_METHODS)
        p.add_argument("--iters", type=int)
        p.add_argument("--burnin", type=int)
        p.add_argument("--thin", type=int)
        p.add_argument("--chains", type=int)
        p.add_argument("--k-init", dest="k_init", type=int)
        p.add_argument("--mu0", type=float)
        p.add_argument("--tau2", type=float)
        p.add_argument("--prec-shape", dest="prec_shape", type=float)
        p.add_argument("--prec-rate", dest="prec_rate", type=float)
        p.add_argument("--delta", type=float)
        p.add_argument("--bnb-alpha", dest="bnb_alpha", type=float)
        p.add_argument("--bnb-beta", dest="bnb_beta", type=float)
        p.add_argument("--k-max", dest="k_max", type=int)
        p.add_argument("--strain-effects", dest="strain_effects", action="store_true", default=None)
        p.add_argument("--strain-sd", dest="strain_sd", type=float)
        p.add_argument("--dp-m-aux", dest="dp_m_aux", type=int)
        p.add_argument("--dp-conc-shape", dest="dp_conc_shape", type=float)
        p.add_argument("--dp-conc-rate", dest="dp_conc_rate", type=float)
        p.add_argument("--dp-conc-fixed", dest="dp_conc_fixed", type=float)
        p.add_argument("--no-allocations", dest="save_allocations", action="store_false", default=None)

    p = sub.add_parser("simulate", help="draw a synthetic censored mixture dataset")
    add_common(p)
    p.add_argument("--grids")
    p.add_argument("--drug")
    p.add_argument("--n", type=int)
    p.add_argument("--weights", type=_float_list)
    p.add_argument("--means", type=_float_list)
    p.add_argument("--sds", type=_float_list)
    p.add_argument("--strains", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--strain-sd", dest="strain_sd", type=float)

    p = sub.add_parser("fit", help="run MCMC chains for one drug")
    add_common(p)
    add_fit_opts(p)

    p = sub.add_parser("postprocess", help="relabel traces, assign clusters, diagnose")
    add_common(p)
    p.add_argument("--traces", nargs="+")
    p.add_argument("--allocations", nargs="+")
    p.add_argument("--grids")
    p.add_argument("--data")
    p.add_argument("--drug")

    p = sub.add_parser("ecoff", help="wild-type log-normal fit and cutoffs")
    add_common(p)
    p.add_argument("--grids")
    p.add_argument("--data")
    p.add_argument("--counts", help="counts CSV (log2_dilution,count) instead of MIC data")
    p.add_argument("--drug")
    p.add_argument("--quantiles", type=_float_list)
    p.add_argument("--classify", action="store_true", default=None,
                   help="also write cutoff classifications per quantile")

    p = sub.add_parser("eval", help="true-positive / true-negative tables")
    add_common(p)
    p.add_argument("--labels", action="append", metavar="NAME=PATH")
    p.add_argument("--truth")

    p = sub.add_parser("gwas", help="spike-and-slab multinomial association study")
    add_common(p)
    p.add_argument("--assignments")
    p.add_argument("--snps")
    p.add_argument("--maf-min", dest="maf_min", type=float)
    p.add_argument("--max-variants", dest="max_variants", type=int)
    p.add_argument("--slab-var", dest="slab_var", type=float)
    p.add_argument("--incl-a", dest="incl_a", type=float)
    p.add_argument("--incl-b", dest="incl_b", type=float)
    p.add_argument("--sigma-u-shape", dest="sigma_u_shape", type=float)
    p.add_argument("--sigma-u-scale", dest="sigma_u_scale", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("pipeline", help="fit, postprocess and optional eval/gwas stages")
    add_common(p)
    add_fit_opts(p)
    p.add_argument("--truth")
    p.add_argument("--snps")
    p.add_argument("--truth-label", dest="truth_label")

    return parser


_DEFAULTS: dict[str, dict] = {
    "simulate": {"n": 1000, "seed": 0, "out": "out", "strain_sd": 0.5},
    "fit": {
        "method": "cgmm", "iters": 1_000_000, "burnin": 100_000, "thin": 10,
        "seed": 0, "chains": 4, "out": "out", "save_allocations": True,
        "mu0": 0.0, "tau2": 100.0, "prec_shape": 1.5, "prec_rate": 0.5,
        "delta": 1.0, "bnb_alpha": 1.0, "bnb_beta": 1.0, "k_max": 30,
        "strain_effects": False, "strain_sd": 1.0, "k_init": None,
        "dp_m_aux": 3, "dp_conc_shape": 1.0, "dp_conc_rate": 1.0, "dp_conc_fixed": None,
    },
    "postprocess": {"out": "out", "seed": 0},
    "ecoff": {"quantiles": (0.95, 0.99, 0.999), "out": "out", "seed": 0, "classify": False},
    "eval": {"out": "out", "seed": 0},
    "gwas": {
        "maf_min": 0.01, "max_variants": 20_000, "slab_var": 1.0, "incl_a": 1.0,
        "incl_b": None, "sigma_u_shape": 2.0, "sigma_u_scale": 1.0,
        "iters": 4000, "burnin": 1000, "thin": 2, "threshold": 0.95,
        "seed": 0, "out": "out",
    },
}
_DEFAULTS["pipeline"] = {**_DEFAULTS["fit"], "truth": None, "snps": None, "truth_label": "censored_gm",
                         **{k: v for k, v in _DEFAULTS["gwas"].items() if k not in ("iters", "burnin", "thin", "seed", "out")}}


def parse_config(argv) -> RunConfig:
    """Resolve options: command-line flags override config-file values
    override built-in defaults."""
    parser = _build_parser()
    ns = parser.parse_args(argv)
    command = ns.command
    options = dict(_DEFAULTS.get(command, {}))
    if getattr(ns, "config", None):
        cfg_path = Path(ns.config)
        if not cfg_path.exists():
            raise ConfigError(f"config file not found: {cfg_path}")
        try:
            loaded = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {cfg_path}") from exc
        unknown = set(loaded) - set(vars(ns))
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        options.update(loaded)
    for key, value in vars(ns).items():
        if key in ("command", "config"):
            continue
        if value is not None:
            options[key] = value
    for key in ("grids", "data", "counts", "truth", "snps", "assignments"):
        path = options.get(key)
        if path is not None and not Path(path).exists():
            raise ConfigError(f"input file not found: {path}")
    for key in ("traces", "allocations", "labels"):
        for item in options.get(key) or []:
            path = item.split("=", 1)[-1] if key == "labels" else item
            if not Path(path).exists():
                raise ConfigError(f"input file not found: {path}")
    return RunConfig(command=command, options=options)


def _write_run_config(config: RunConfig, outdir: Path) -> None:
    payload = {"command": config.command, "version": __version__, "options": config.options}
    (outdir / "run_config.json").write_text(
        json.dumps(payload, sort_keys=True, indent=1, default=str) + "\n"
    )


def _require(options, *keys):
    for key in keys:
        if options.get(key) in (None, ""):
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")


def _prior_config(o) -> PriorConfig:
    return PriorConfig(
        mu0=o["mu0"], tau2=o["tau2"], prec_shape=o["prec_shape"], prec_rate=o["prec_rate"],
        delta=o["delta"], bnb_alpha=o["bnb_alpha"], bnb_beta=o["bnb_beta"], k_max=o["k_max"],
    )


def _fit_config(o) -> FitConfig:
    return FitConfig(
        iterations=o["iters"], burnin=o["burnin"], thin=o["thin"], seed=o["seed"],
        chains=o["chains"], strain_effects=o["strain_effects"], strain_sd=o["strain_sd"],
        k_init=o["k_init"],
    )


def _chain_worker(method, data, priors, fit, dp_cfg, seed):
    if method == "cgmm":
        return run_chain(data, priors, fit, seed)
    if method == "gm":
        return run_gm_chain(data, priors, fit, seed)
    return run_dp_chain(data, dp_cfg, priors, seed)


def _run_fit(options, outdir: Path):
    _require(options, "grids", "data", "drug")
    grids = load_dilution_grids(options["grids"])
    dataset = load_mic_dataset(options["data"], grids).restrict(options["drug"])
    priors = _prior_config(options)
    fit = _fit_config(options)
    dp_cfg = DpConfig(
        conc_shape=options["dp_conc_shape"], conc_rate=options["dp_conc_rate"],
        m_aux=options["dp_m_aux"], iterations=options["iters"], burnin=options["burnin"],
        thin=options["thin"], seed=options["seed"],
        fixed_concentration=options["dp_conc_fixed"],
    )
    method = options["method"]
    seeds = chain_seeds(fit.seed, fit.chains)
    if fit.chains == 1:
        traces = [_chain_worker(method, dataset, priors, fit, dp_cfg, seeds[0])]
    else:
        workers = min(fit.chains, os.cpu_count() or 1)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_chain_worker, method, dataset, priors, fit, dp_cfg, s)
                for s in seeds
            ]
            traces = [f.result() for f in futures]
    trace_paths, alloc_paths = [], []
    for i, trace in enumerate(traces):
        tpath = outdir / f"trace_chain{i:02d}.csv"
        apath = outdir / f"allocations_chain{i:02d}.csv"
        save_trace_csv(trace, tpath, apath if options["save_allocations"] else None)
        trace_paths.append(tpath)
        if options["save_allocations"]:
            alloc_paths.append(apath)
    counts = dataset.counts_per_dilution(options["drug"])
    grid = dataset.single_grid()
    labels = [f"{v:g}" for v in grid.tested_log2] + [f"{float(grid.censor_label_log2):g}*"]
    histogram_svg(labels, counts, outdir / f"hist_{options['drug']}.svg",
                  title=f"{options['drug']} recorded dilutions (n={len(dataset)})")
    return traces, dataset


def _run_postprocess(traces, dataset, outdir: Path):
    relabeled = [relabel_trace(t) for t in traces]
    pooled = concat_traces(relabeled)
    pk = posterior_k(pooled)
    with open(outdir / "posterior_k.csv", "w") as fh:
        fh.write("kplus,probability\n")
        for v, p in zip(pk.values, pk.probs):
            fh.write(f"{int(v)},{p:.6f}\n")
    assignments = map_allocations(pooled, dataset)
    assignments.to_csv(outdir / "assignments.csv")
    if len(relabeled) >= 2:
        diagnostics(relabeled).to_json(outdir / "diagnostics.json")
    else:
        print("postprocess: single chain, diagnostics skipped", file=sys.stderr)
    return assignments


def execute(config: RunConfig) -> int:
    """Run one resolved subcommand, writing artifacts to the output dir."""
    o = config.options
    outdir = Path(o.get("out") or "out")
    outdir.mkdir(parents=True, exist_ok=True)
    _write_run_config(config, outdir)

    if config.command == "simulate":
        _require(o, "grids", "drug", "weights", "means", "sds")
        grids = load_dilution_grids(o["grids"])
        if o["drug"] not in grids:
            raise DataError(f"no grid for drug {o['drug']!r}")
        spec = SimSpec(
            grid=grids[o["drug"]], n=o["n"], weights=tuple(o["weights"]),
            means_log2=tuple(o["means"]), sds_log2=tuple(o["sds"]),
            strain_count=o.get("strains"), replicates_per_strain=o.get("replicates"),
            strain_sd=o.get("strain_sd") or 0.0,
        )
        dataset = simulate_dataset(spec, seed=o["seed"])
        write_mic_csv(dataset, outdir / "simulated_mic.csv")
        grid = spec.grid
        labels = [f"{v:g}" for v in grid.tested_log2] + [f"{float(grid.censor_label_log2):g}*"]
        histogram_svg(labels, dataset.counts_per_dilution(o["drug"]),
                      outdir / f"hist_{o['drug']}.svg",
                      title=f"simulated {o['drug']} (n={spec.n})")
        return 0

    if config.command == "fit":
        _run_fit(o, outdir)
        return 0

    if config.command == "postprocess":
        _require(o, "traces", "grids", "data", "drug")
        grids = load_dilution_grids(o["grids"])
        dataset = load_mic_dataset(o["data"], grids).restrict(o["drug"])
        alloc_paths = o.get("allocations")
        if alloc_paths is None:
            alloc_paths = [Path(t).with_name(Path(t).name.replace("trace_", "allocations_"))
                           for t in o["traces"]]
        if len(alloc_paths) != len(o["traces"]):
            raise ConfigError("need one allocation CSV per trace CSV")
        traces = [load_trace_csv(t, a) for t, a in zip(o["traces"], alloc_paths)]
        _run_postprocess(traces, dataset, outdir)
        return 0

    if config.command == "ecoff":
        _require(o, "grids", "drug")
        grids = load_dilution_grids(o["grids"])
        if o["drug"] not in grids:
            raise DataError(f"no grid for drug {o['drug']!r}")
        grid = grids[o["drug"]]
        if o.get("counts"):
            import csv as _csv

            counts = np.zeros(grid.censor_index)
            with open(o["counts"], newline="") as fh:
                for lineno, row in enumerate(_csv.DictReader(fh), start=2):
                    try:
                        value = float(row["log2_dilution"])
                        cnt = float(row["count"])
                    except (KeyError, ValueError) as exc:
                        raise DataError(f"{o['counts']}:{lineno}: bad counts row") from exc
                    matches = [j for j, d in enumerate(grid.tested_log2) if abs(d - value) < 1e-9]
                    if not matches:
                        raise DataError(f"{o['counts']}:{lineno}: {value} not on the grid")
                    counts[matches[0]] = cnt
            dataset = None
        else:
            _require(o, "data")
            dataset = load_mic_dataset(o["data"], grids).restrict(o["drug"])
            counts = counts_from_dataset(dataset, o["drug"])
        fit = fit_wildtype_lognormal(counts, grid, quantiles=tuple(o["quantiles"]))
        payload = {
            "drug": o["drug"], "mu_log2": fit.mu, "sigma_log2": fit.sigma,
            "n_fit": fit.n_fit, "subset_end": fit.subset_end, "rss": fit.rss,
            "cutoffs_mgL": {str(q): fit.cutoffs[q] for q in sorted(fit.cutoffs)},
        }
        (outdir / "ecoff.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
        with open(outdir / "cutoffs.csv", "w") as fh:
            fh.write("quantile,cutoff_mgL,cutoff_log2\n")
            for q in sorted(fit.cutoffs):
                cut = fit.cutoffs[q]
                fh.write(f"{q},{cut!r},{float(np.log2(cut))!r}\n")
        if o.get("classify") and dataset is not None:
            from .ecoff import classify_by_cutoff

            for q in sorted(fit.cutoffs):
                labels = classify_by_cutoff(dataset, o["drug"], fit.cutoffs[q])
                k = 2
                probs = np.zeros((len(labels.strain_ids), k))
                cl = labels.resistant.astype(np.int64) + 1
                probs[np.arange(len(cl)), cl - 1] = 1.0
                ClusterAssignments(
                    drug_code=o["drug"], strain_ids=labels.strain_ids,
                    replicate_ids=labels.replicate_ids, k_mode=k, probs=probs,
                    map_cluster=cl, method=f"ecoff_{q}",
                ).to_csv(outdir / f"ecoff_labels_q{q}.csv")
        return 0

    if config.command == "eval":
        _require(o, "labels", "truth")
        label_sets = []
        for item in o["labels"]:
            if "=" not in item:
                raise ConfigError("--labels items must be NAME=PATH")
            name, path = item.split("=", 1)
            label_sets.append((name, ClusterAssignments.from_csv(path, method=name)))
        truth_sets = load_truth_csv(o["truth"])
        wrote = False
        if "resistant_by_variant" in truth_sets:
            rates = {
                name: true_positive_rate([labels], truth_sets["resistant_by_variant"])
                for name, labels in label_sets
            }
            write_rate_table(rates, outdir / "tp_table.csv")
            wrote = True
        if "susceptible_control" in truth_sets:
            rates = {
                name: true_negative_rate([labels], truth_sets["susceptible_control"])
                for name, labels in label_sets
            }
            write_rate_table(rates, outdir / "tn_table.csv")
            wrote = True
        if not wrote:
            raise DataError("truth file contained no usable rows")
        return 0

    if config.command == "gwas":
        _require(o, "assignments", "snps")
        labels = ClusterAssignments.from_csv(o["assignments"])
        snps = filter_variants(
            load_snp_csv(o["snps"]), maf_min=o["maf_min"], max_variants=o["max_variants"]
        )
        grm = compute_grm(snps)
        cfg = GwasConfig(
            slab_var=o["slab_var"], incl_a=o["incl_a"], incl_b=o["incl_b"],
            sigma_u_shape=o["sigma_u_shape"], sigma_u_scale=o["sigma_u_scale"],
            iterations=o["iters"], burnin=o["burnin"], thin=o["thin"], seed=o["seed"],
            pip_threshold=o["threshold"],
        )
        trace = run_gwas_chain(labels, snps, grm, cfg)
        result = summarize_gwas(trace, cfg)
        result.to_results_csv(outdir / "gwas_results.csv")
        result.to_manhattan_csv(outdir / "manhattan.csv")
        manhattan_svg(result.positions, result.score, result.threshold_line,
                      outdir / "manhattan.svg", title=f"{labels.drug_code} association scores")
        return 0

    if config.command == "pipeline":
        traces, dataset = _run_fit(o, outdir)
        assignments = _run_postprocess(traces, dataset, outdir)
        if o.get("truth"):
            truth_sets = load_truth_csv(o["truth"])
            name = o.get("truth_label") or "censored_gm"
            if "resistant_by_variant" in truth_sets:
                write_rate_table(
                    {name: true_positive_rate([assignments], truth_sets["resistant_by_variant"])},
                    outdir / "tp_table.csv",
                )
            if "susceptible_control" in truth_sets:
                write_rate_table(
                    {name: true_negative_rate([assignments], truth_sets["susceptible_control"])},
                    outdir / "tn_table.csv",
                )
        if o.get("snps"):
            snps = filter_variants(
                load_snp_csv(o["snps"]), maf_min=o["maf_min"], max_variants=o["max_variants"]
            )
            grm = compute_grm(snps)
            cfg = GwasConfig(
                slab_var=o["slab_var"], incl_a=o["incl_a"], incl_b=o["incl_b"],
                sigma_u_shape=o["sigma_u_shape"], sigma_u_scale=o["sigma_u_scale"],
                seed=o["seed"], pip_threshold=o["threshold"],
            )
            trace = run_gwas_chain(assignments, snps, grm, cfg)
            result = summarize_gwas(trace, cfg)
            result.to_results_csv(outdir / "gwas_results.csv")
            result.to_manhattan_csv(outdir / "manhattan.csv")
            manhattan_svg(result.positions, result.score, result.threshold_line,
                          outdir / "manhattan.svg")
        return 0

    raise ConfigError(f"unknown command {config.command!r}")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        config = parse_config(argv)
        return execute(config)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except FitError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001
        print(f"unexpected failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
