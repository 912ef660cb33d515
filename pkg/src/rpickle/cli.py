"""Configuration-driven pipeline: case generation through posterior reports.

One JSON document describes a full experiment (mesh, prior, observations,
residual-variance grid, sampler sizes, base seed); subcommands run the
pipeline stage by stage, each reading the previous stage's artifacts from
the output directory:

    generate        synthetic reference fields and observation wells
    build-prior     conditioned expansions for both fields
    map             deterministic MAP solve per sigma_r_sq value
    sample-rpickle  randomized-loss posterior ensemble per sigma_r_sq value
    sample-hmc      HMC chains per sigma_r_sq value
    diagnose        per-gamma report files plus a summary table
    oracle-check    built-in linear-Gaussian consistency suite

All randomness flows from the single ``base_seed`` through fixed stream
indices (reference field 0, wells 1, state prior 2, residual noise 3,
Metropolis 4, HMC 5), so rerunning any stage with the same config is
byte-identical regardless of ``--threads``.  Every output file carries the
hash of the scientific part of the config (everything except the output
location) together with the seed.  Stages compute fully before writing, so
a failed stage leaves no partial artifacts; ``timing.json`` collects wall
times and is the one file excluded from byte-identity.

Exit codes: 0 success, 1 configuration or validation error, 2 numerical
failure (including a failed oracle check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .diagnostics import (
    DiagnosticsReport,
    LinearModel,
    convergence_ratios,
    coverage,
    error_norms,
    laplace_posterior,
    linear_oracle,
    lpp,
    posterior_moments,
    report_to_csv,
    report_to_json,
)
from .errors import ConfigError, NumericalError
from .field_gen import build_synthetic_case, load_case, save_case
from .gp_prior import (
    KernelParams,
    basis_from_json,
    basis_to_json,
    build_basis,
    condition_on_cells,
    fit_hyperparameters,
    matern52,
    mc_state_prior,
)
from .hmc_sampler import HmcConfig, chains_to_csv, run_hmc, write_hmc_manifest
from .mesh_fv import boundary_values, build_structured_mesh
from .pickle_map import (
    CoefficientPair,
    LossParams,
    ResidualModel,
    map_optimize,
    map_result_to_json,
    sweep_gammas,
)
from .rpickle_sampler import (
    EnsembleConfig,
    ensemble_from_csv,
    ensemble_to_csv,
    run_ensemble,
    write_manifest,
)
from .seeding import STREAM_REFERENCE, spawn_rng

__all__ = [
    "RunConfig",
    "load_run_config",
    "linear_model_from_config",
    "cmd_generate",
    "cmd_build_prior",
    "cmd_map",
    "cmd_sample_rpickle",
    "cmd_sample_hmc",
    "cmd_diagnose",
    "cmd_oracle_check",
    "build_parser",
    "main",
]

BC_SIDES = ("west", "east", "south", "north")
SAMPLER_KINDS = ("rpickle", "hmc", "both")

SUMMARY_COLUMNS = ("gamma", "n_usable", "lpp", "coverage", "rel_l2", "l_inf", "condition_number")


@dataclass(frozen=True)
class RunConfig:
    """Validated run description; one instance drives every stage.

    Exactly one truncation rule is set: ``energy`` (fraction of prior
    variance to keep, both fields) or the explicit pair ``n_xi`` /
    ``n_eta``.  ``kernel_sigma`` / ``kernel_length_scale`` may be None only
    when ``kernel_fit`` is true, in which case ``generate`` is unavailable
    and ``build-prior`` fits them from the case's parameter observations.
    ``linear_case`` replaces the PDE model with a seeded random affine
    residual for the map/sample stages.
    """

    nx: int
    ny: int
    lx: float
    ly: float
    bc: dict
    kernel_fit: bool
    kernel_sigma: float | None
    kernel_length_scale: float | None
    energy: float | None
    n_xi: int | None
    n_eta: int | None
    n_y_obs: int
    n_u_obs: int
    smoothing_iterations: int
    mc_draws: int
    gammas: tuple
    sampler_kind: str
    n_ens: int
    hmc_samples: int
    hmc_chains: int
    hmc_burn_in: int
    metropolize: bool | None
    base_seed: int
    output_dir: str
    linear_case: dict | None

    def to_dict(self) -> dict:
        """Canonical nested form, echoed into manifests and hashed."""
        return {
            "mesh": {
                "nx": self.nx,
                "ny": self.ny,
                "lx": self.lx,
                "ly": self.ly,
                "bc": dict(sorted(self.bc.items())),
            },
            "kernel": {
                "fit": self.kernel_fit,
                "sigma": self.kernel_sigma,
                "length_scale": self.kernel_length_scale,
            },
            "truncation": {"energy": self.energy, "n_xi": self.n_xi, "n_eta": self.n_eta},
            "observations": {"n_y_obs": self.n_y_obs, "n_u_obs": self.n_u_obs},
            "smoothing_iterations": self.smoothing_iterations,
            "mc_draws": self.mc_draws,
            "sigma_r_sq": list(self.gammas),
            "sampler": {
                "kind": self.sampler_kind,
                "n_ens": self.n_ens,
                "hmc_samples": self.hmc_samples,
                "hmc_chains": self.hmc_chains,
                "hmc_burn_in": self.hmc_burn_in,
                "metropolize": self.metropolize,
            },
            "base_seed": self.base_seed,
            "output_dir": self.output_dir,
            "linear_case": None if self.linear_case is None else dict(sorted(self.linear_case.items())),
        }

    def science_dict(self) -> dict:
        """Canonical config minus the output location.

        This is what gets hashed and echoed into manifests: moving a run
        to a different directory must not change a single output byte.
        """
        doc = self.to_dict()
        del doc["output_dir"]
        return doc

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.science_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _require_keys(section: dict, name: str, allowed) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        listed = ", ".join(f"{name}.{key}" for key in unknown)
        raise ConfigError(f"unknown config fields: {listed}")


def _int_field(value, name: str, minimum: int) -> int:
    value = int(value)
    if value < minimum:
        raise ConfigError(f"{name} must be at least {minimum}")
    return value


def parse_run_config(raw: dict) -> RunConfig:
    """Validate a raw JSON document, filling defaults; see :class:`RunConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _require_keys(
        raw,
        "config",
        (
            "mesh",
            "kernel",
            "truncation",
            "observations",
            "smoothing_iterations",
            "mc_draws",
            "sigma_r_sq",
            "sampler",
            "base_seed",
            "output_dir",
            "linear_case",
        ),
    )

    linear_case = raw.get("linear_case")
    if linear_case is not None:
        _require_keys(linear_case, "linear_case", ("n_res", "n_xi", "n_eta"))
        linear_case = {
            "n_res": _int_field(linear_case.get("n_res", 30), "linear_case.n_res", 1),
            "n_xi": _int_field(linear_case.get("n_xi", 5), "linear_case.n_xi", 1),
            "n_eta": _int_field(linear_case.get("n_eta", 4), "linear_case.n_eta", 0),
        }

    mesh = raw.get("mesh", {})
    _require_keys(mesh, "mesh", ("nx", "ny", "lx", "ly", "bc"))
    bc = mesh.get("bc", {})
    _require_keys(bc, "mesh.bc", BC_SIDES)
    if linear_case is None:
        # The forward problem needs a value on every side; name what is absent.
        missing = [f"mesh.bc.{side}" for side in BC_SIDES if side not in bc]
        if missing:
            raise ConfigError("missing required config fields: " + ", ".join(missing))
    bc = {side: float(bc[side]) for side in bc}

    kernel = raw.get("kernel", {})
    _require_keys(kernel, "kernel", ("fit", "sigma", "length_scale"))
    kernel_fit = bool(kernel.get("fit", False))
    sigma = kernel.get("sigma")
    length_scale = kernel.get("length_scale")
    if linear_case is None and not kernel_fit:
        missing = [
            f"kernel.{key}"
            for key, value in (("sigma", sigma), ("length_scale", length_scale))
            if value is None
        ]
        if missing:
            raise ConfigError(
                "missing required config fields: "
                + ", ".join(missing)
                + " (set kernel.fit to estimate them from observations)"
            )

    truncation = raw.get("truncation", {})
    _require_keys(truncation, "truncation", ("energy", "n_xi", "n_eta"))
    n_xi = truncation.get("n_xi")
    n_eta = truncation.get("n_eta")
    energy = truncation.get("energy")
    if n_xi is not None or n_eta is not None:
        if energy is not None:
            raise ConfigError("truncation takes either energy or n_xi/n_eta, not both")
        if n_xi is None or n_eta is None:
            raise ConfigError("explicit truncation needs both truncation.n_xi and truncation.n_eta")
        n_xi = _int_field(n_xi, "truncation.n_xi", 1)
        n_eta = _int_field(n_eta, "truncation.n_eta", 1)
    else:
        energy = float(energy) if energy is not None else 0.95
        if not 0.0 < energy <= 1.0:
            raise ConfigError("truncation.energy must lie in (0, 1]")

    observations = raw.get("observations", {})
    _require_keys(observations, "observations", ("n_y_obs", "n_u_obs"))

    gammas = raw.get("sigma_r_sq", [1e-2])
    if isinstance(gammas, (int, float)):
        gammas = [gammas]
    gammas = tuple(float(g) for g in gammas)
    if not gammas:
        raise ConfigError("sigma_r_sq must list at least one value")
    if any(g <= 0 for g in gammas):
        raise ConfigError("sigma_r_sq values must be positive")

    sampler = raw.get("sampler", {})
    _require_keys(
        sampler,
        "sampler",
        ("kind", "n_ens", "hmc_samples", "hmc_chains", "hmc_burn_in", "metropolize"),
    )
    kind = sampler.get("kind", "rpickle")
    if kind not in SAMPLER_KINDS:
        raise ConfigError(f"sampler.kind must be one of {SAMPLER_KINDS}, got {kind!r}")
    metropolize = sampler.get("metropolize")
    if metropolize is not None:
        metropolize = bool(metropolize)

    return RunConfig(
        nx=_int_field(mesh.get("nx", 8), "mesh.nx", 1),
        ny=_int_field(mesh.get("ny", 8), "mesh.ny", 1),
        lx=float(mesh.get("lx", 1.0)),
        ly=float(mesh.get("ly", 1.0)),
        bc=bc,
        kernel_fit=kernel_fit,
        kernel_sigma=None if sigma is None else float(sigma),
        kernel_length_scale=None if length_scale is None else float(length_scale),
        energy=energy,
        n_xi=n_xi,
        n_eta=n_eta,
        n_y_obs=_int_field(observations.get("n_y_obs", 16), "observations.n_y_obs", 1),
        n_u_obs=_int_field(observations.get("n_u_obs", 16), "observations.n_u_obs", 1),
        smoothing_iterations=_int_field(
            raw.get("smoothing_iterations", 0), "smoothing_iterations", 0
        ),
        mc_draws=_int_field(raw.get("mc_draws", 4000), "mc_draws", 2),
        gammas=gammas,
        sampler_kind=kind,
        n_ens=_int_field(sampler.get("n_ens", 100), "sampler.n_ens", 1),
        hmc_samples=_int_field(sampler.get("hmc_samples", 1000), "sampler.hmc_samples", 1),
        hmc_chains=_int_field(sampler.get("hmc_chains", 3), "sampler.hmc_chains", 1),
        hmc_burn_in=_int_field(sampler.get("hmc_burn_in", 2000), "sampler.hmc_burn_in", 0),
        metropolize=metropolize,
        base_seed=_int_field(raw.get("base_seed", 0), "base_seed", 0),
        output_dir=str(raw.get("output_dir", "out")),
        linear_case=linear_case,
    )


def load_run_config(path, seed: int | None = None, out: str | None = None) -> RunConfig:
    """Read and validate a config file, applying command-line overrides.

    The seed override lands before hashing, so a rerun with ``--seed``
    stamps a different hash than the file alone would.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        raw["base_seed"] = int(seed)
    if out is not None:
        raw["output_dir"] = str(out)
    return parse_run_config(raw)


def _fmt(x) -> str:
    return repr(float(x))


def _csv_stamp(config: RunConfig) -> dict:
    return {"config_hash": config.config_hash, "base_seed": config.base_seed}


def _json_stamp(config: RunConfig, gamma: float | None = None) -> dict:
    stamp = {
        "config_hash": config.config_hash,
        "base_seed": config.base_seed,
        "run_config": config.science_dict(),
    }
    if gamma is not None:
        stamp["gamma"] = float(gamma)
    return stamp


def _gamma_dir(config: RunConfig, gamma: float) -> str:
    return os.path.join(config.output_dir, f"gamma_{_fmt(gamma)}")


def _require(path: str, stage: str) -> str:
    if not os.path.exists(path):
        raise ConfigError(f"missing artifact {path}; run '{stage}' first")
    return path


def _record_timing(output_dir: str, stage: str, elapsed: float) -> None:
    # Wall times are the one artifact reruns may not reproduce, so they get
    # their own file instead of a manifest field.
    path = os.path.join(output_dir, "timing.json")
    doc = {}
    if os.path.exists(path):
        with open(path) as fh:
            doc = json.load(fh)
    doc[stage] = elapsed
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _random_linear(n_res: int, n_xi: int, n_eta: int, seed: int) -> LinearModel:
    rng = spawn_rng(seed, STREAM_REFERENCE)
    a = rng.standard_normal((n_res, n_xi))
    b = rng.standard_normal((n_res, n_eta)) if n_eta > 0 else None
    c = rng.standard_normal(n_res)
    return LinearModel(a, b, c)


def linear_model_from_config(config: RunConfig) -> LinearModel:
    """The seeded affine test model described by ``config.linear_case``."""
    if config.linear_case is None:
        raise ConfigError("config has no linear_case section")
    dims = config.linear_case
    return _random_linear(dims["n_res"], dims["n_xi"], dims["n_eta"], config.base_seed)


def _flow_model(config: RunConfig):
    """Rebuild the PDE residual model from persisted case and prior files."""
    mesh = build_structured_mesh(config.nx, config.ny, config.lx, config.ly)
    bc = boundary_values(mesh, config.bc)
    case_dir = _require(os.path.join(config.output_dir, "case"), "generate")
    _require(os.path.join(case_dir, "case.json"), "generate")
    case = load_case(case_dir)
    prior_dir = os.path.join(config.output_dir, "prior")
    y_basis = basis_from_json(_require(os.path.join(prior_dir, "y_basis.json"), "build-prior"))
    u_basis = basis_from_json(_require(os.path.join(prior_dir, "u_basis.json"), "build-prior"))
    return ResidualModel(mesh, y_basis, u_basis, bc), case, y_basis


def _sampling_model(config: RunConfig):
    if config.linear_case is not None:
        return linear_model_from_config(config)
    return _flow_model(config)[0]


def _reject_linear(config: RunConfig, stage: str) -> None:
    if config.linear_case is not None:
        raise ConfigError(
            f"linear_case has no synthetic field or prior; '{stage}' applies only to PDE runs"
        )


def cmd_generate(config: RunConfig, threads: int = 1) -> None:
    """Sample the reference experiment and persist it under ``case/``."""
    start = time.perf_counter()
    _reject_linear(config, "generate")
    if config.kernel_sigma is None or config.kernel_length_scale is None:
        raise ConfigError(
            "generate needs explicit kernel.sigma and kernel.length_scale; "
            "kernel.fit only affects build-prior"
        )
    mesh = build_structured_mesh(config.nx, config.ny, config.lx, config.ly)
    bc = boundary_values(mesh, config.bc)
    kernel = KernelParams(sigma=config.kernel_sigma, length_scale=config.kernel_length_scale)
    case = build_synthetic_case(
        mesh,
        kernel,
        bc,
        n_y_obs=config.n_y_obs,
        n_u_obs=config.n_u_obs,
        seed=config.base_seed,
        smoothing_iterations=config.smoothing_iterations,
    )

    case_dir = os.path.join(config.output_dir, "case")
    os.makedirs(case_dir, exist_ok=True)
    save_case(case, mesh, case_dir, meta=_csv_stamp(config))
    manifest = {"stage": "generate", "n_cells": mesh.n_cells, "provenance": case.provenance}
    manifest.update(_json_stamp(config))
    _write_json(os.path.join(case_dir, "manifest.json"), manifest)
    _record_timing(config.output_dir, "generate", time.perf_counter() - start)
    print(f"generate: {mesh.n_cells} cells, {len(case.y_obs)}+{len(case.u_obs)} wells -> {case_dir}")


def cmd_build_prior(config: RunConfig, threads: int = 1) -> None:
    """Condition both expansions on the case's wells; persist under ``prior/``."""
    start = time.perf_counter()
    _reject_linear(config, "build-prior")
    mesh = build_structured_mesh(config.nx, config.ny, config.lx, config.ly)
    bc = boundary_values(mesh, config.bc)
    case_dir = _require(os.path.join(config.output_dir, "case"), "generate")
    _require(os.path.join(case_dir, "case.json"), "generate")
    case = load_case(case_dir)

    if config.kernel_fit:
        kernel = fit_hyperparameters(case.y_obs)
    else:
        kernel = KernelParams(sigma=config.kernel_sigma, length_scale=config.kernel_length_scale)
    cov_y = matern52(mesh.cell_centers, mesh.cell_centers, kernel)
    gp_y = condition_on_cells(np.zeros(mesh.n_cells), cov_y, case.y_obs)
    if config.n_xi is not None:
        y_basis = build_basis(gp_y, energy=None, n_terms=config.n_xi)
    else:
        y_basis = build_basis(gp_y, energy=config.energy)
    u_mean, u_cov = mc_state_prior(
        mesh, y_basis, bc, n_mc=config.mc_draws, seed=config.base_seed, n_workers=threads
    )
    gp_u = condition_on_cells(u_mean, u_cov, case.u_obs)
    if config.n_eta is not None:
        u_basis = build_basis(gp_u, energy=None, n_terms=config.n_eta)
    else:
        u_basis = build_basis(gp_u, energy=config.energy)

    prior_dir = os.path.join(config.output_dir, "prior")
    os.makedirs(prior_dir, exist_ok=True)
    basis_to_json(y_basis, os.path.join(prior_dir, "y_basis.json"), meta=_csv_stamp(config))
    basis_to_json(u_basis, os.path.join(prior_dir, "u_basis.json"), meta=_csv_stamp(config))
    manifest = {
        "stage": "build-prior",
        "kernel": {
            "sigma": kernel.sigma,
            "length_scale": kernel.length_scale,
            "fitted": config.kernel_fit,
        },
        "n_xi": y_basis.n_terms,
        "n_eta": u_basis.n_terms,
        "retained_energy_y": y_basis.retained_energy,
        "retained_energy_u": u_basis.retained_energy,
        "mc_draws": config.mc_draws,
    }
    manifest.update(_json_stamp(config))
    _write_json(os.path.join(prior_dir, "manifest.json"), manifest)
    _record_timing(config.output_dir, "build-prior", time.perf_counter() - start)
    print(
        f"build-prior: n_xi={y_basis.n_terms} n_eta={u_basis.n_terms} "
        f"kernel=(sigma={kernel.sigma:.4g}, l={kernel.length_scale:.4g}) -> {prior_dir}"
    )


def cmd_map(config: RunConfig, threads: int = 1) -> None:
    """One MAP solve per sigma_r_sq value, written to ``gamma_*/map.json``."""
    start = time.perf_counter()
    model = _sampling_model(config)
    results = sweep_gammas(model, config.gammas)
    for gamma, result in results:
        gamma_dir = _gamma_dir(config, gamma)
        os.makedirs(gamma_dir, exist_ok=True)
        path = os.path.join(gamma_dir, "map.json")
        map_result_to_json(result, path, meta=_json_stamp(config, gamma=gamma))
        print(
            f"map: gamma={_fmt(gamma)} loss={result.loss:.6e} "
            f"converged={result.converged} -> {path}"
        )
    _record_timing(config.output_dir, "map", time.perf_counter() - start)


def cmd_sample_rpickle(config: RunConfig, threads: int = 1) -> None:
    """Randomized-loss ensembles over the sigma_r_sq grid."""
    start = time.perf_counter()
    if config.sampler_kind not in ("rpickle", "both"):
        raise ConfigError("sampler.kind excludes rpickle; set it to 'rpickle' or 'both'")
    model = _sampling_model(config)
    ens_config = EnsembleConfig(
        base_seed=config.base_seed, metropolize=config.metropolize, n_workers=threads
    )
    for gamma in config.gammas:
        ensemble = run_ensemble(model, LossParams(sigma_r_sq=gamma), config.n_ens, ens_config)
        gamma_dir = _gamma_dir(config, gamma)
        os.makedirs(gamma_dir, exist_ok=True)
        ensemble_to_csv(ensemble, os.path.join(gamma_dir, "rpickle.csv"), meta=_csv_stamp(config))
        write_manifest(
            ensemble, os.path.join(gamma_dir, "rpickle.json"), extra=_json_stamp(config, gamma=gamma)
        )
        accept = "-" if ensemble.acceptance_rate is None else f"{ensemble.acceptance_rate:.3f}"
        print(
            f"sample-rpickle: gamma={_fmt(gamma)} n={len(ensemble)} "
            f"usable={ensemble.n_usable} acceptance={accept} -> {gamma_dir}"
        )
    _record_timing(config.output_dir, "sample-rpickle", time.perf_counter() - start)


def cmd_sample_hmc(config: RunConfig, threads: int = 1) -> None:
    """HMC chains over the sigma_r_sq grid."""
    start = time.perf_counter()
    if config.sampler_kind not in ("hmc", "both"):
        raise ConfigError("sampler.kind excludes hmc; set it to 'hmc' or 'both'")
    model = _sampling_model(config)
    hmc_config = HmcConfig(
        n_samples=config.hmc_samples,
        n_chains=config.hmc_chains,
        burn_in=config.hmc_burn_in,
    )
    for gamma in config.gammas:
        params = LossParams(sigma_r_sq=gamma)
        chains = run_hmc(model, params, hmc_config, seed=config.base_seed, n_workers=threads)
        gamma_dir = _gamma_dir(config, gamma)
        os.makedirs(gamma_dir, exist_ok=True)
        chains_to_csv(chains, model.n_xi, os.path.join(gamma_dir, "hmc.csv"), meta=_csv_stamp(config))
        write_hmc_manifest(
            chains,
            hmc_config,
            params,
            os.path.join(gamma_dir, "hmc.json"),
            extra=_json_stamp(config, gamma=gamma),
        )
        rates = ", ".join(f"{chain.acceptance_rate:.3f}" for chain in chains)
        print(f"sample-hmc: gamma={_fmt(gamma)} acceptance=[{rates}] -> {gamma_dir}")
    _record_timing(config.output_dir, "sample-hmc", time.perf_counter() - start)


def _map_point_from_json(path: str, n_xi: int) -> CoefficientPair:
    with open(path) as fh:
        doc = json.load(fh)
    xi = np.asarray(doc["xi"], dtype=np.float64)
    eta = np.asarray(doc["eta"], dtype=np.float64)
    if xi.shape[0] != n_xi:
        raise ConfigError(f"map file {path} has {xi.shape[0]} xi terms, model expects {n_xi}")
    return CoefficientPair(xi=xi, eta=eta)


def _diagnose_gamma(model, case, y_basis, config: RunConfig, gamma: float) -> dict:
    """Report files for one gamma; returns the summary row as a dict."""
    gamma_dir = _gamma_dir(config, gamma)
    ensemble = ensemble_from_csv(_require(os.path.join(gamma_dir, "rpickle.csv"), "sample-rpickle"))
    row = {"gamma": _fmt(gamma), "n_usable": str(ensemble.n_usable)}
    if not ensemble.moments_defined:
        warnings.warn(
            f"gamma={_fmt(gamma)}: fewer than two usable samples, skipping field moments",
            UserWarning,
            stacklevel=2,
        )
        row.update({key: "" for key in SUMMARY_COLUMNS[2:]})
        return row

    map_point = _map_point_from_json(
        _require(os.path.join(gamma_dir, "map.json"), "map"), model.n_xi
    )
    params = LossParams(sigma_r_sq=gamma)
    mean_field, std_field = posterior_moments(ensemble, y_basis, block="xi")
    lpp_value = lpp(mean_field, std_field, case.y_ref)
    coverage_value = coverage(mean_field, std_field, case.y_ref)
    rel_l2, l_inf = error_norms(mean_field, case.y_ref)
    _, condition, spectrum = laplace_posterior(model, params, map_point)
    xi_block = ensemble.coefficient_matrix()[:, : model.n_xi]
    curves = {}
    for coord in range(model.n_xi):
        mean_ratios, std_ratios = convergence_ratios(xi_block, coord)
        curves[coord] = {"mean": mean_ratios, "std": std_ratios}
    report = DiagnosticsReport(
        mean_field=mean_field,
        std_field=std_field,
        lpp=lpp_value,
        coverage=coverage_value,
        rel_l2=rel_l2,
        l_inf=l_inf,
        laplace_spectrum=spectrum,
        condition_number=condition,
        convergence_curves=curves,
    )
    report_to_json(report, os.path.join(gamma_dir, "report.json"), meta=_json_stamp(config, gamma=gamma))
    report_to_csv(report, gamma_dir, meta=_csv_stamp(config))
    row.update(
        {
            "lpp": _fmt(lpp_value),
            "coverage": _fmt(coverage_value),
            "rel_l2": _fmt(rel_l2),
            "l_inf": _fmt(l_inf),
            "condition_number": _fmt(condition),
        }
    )
    return row


def cmd_diagnose(config: RunConfig, threads: int = 1) -> None:
    """Per-gamma reports plus ``summary.csv``, one row per sigma_r_sq value."""
    start = time.perf_counter()
    _reject_linear(config, "diagnose")
    if config.sampler_kind == "hmc":
        raise ConfigError(
            "diagnose summarizes the rpickle ensemble; set sampler.kind to 'rpickle' or 'both'"
        )
    model, case, y_basis = _flow_model(config)
    rows = [_diagnose_gamma(model, case, y_basis, config, gamma) for gamma in config.gammas]

    header = ",".join(SUMMARY_COLUMNS)
    lines = [f"# config_hash={config.config_hash}", f"# base_seed={config.base_seed}", header]
    lines += [",".join(row[key] for key in SUMMARY_COLUMNS) for row in rows]
    summary_path = os.path.join(config.output_dir, "summary.csv")
    with open(summary_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(header)
    for row in rows:
        print(",".join(row[key] for key in SUMMARY_COLUMNS))
    print(f"diagnose: {len(rows)} rows -> {summary_path}")
    _record_timing(config.output_dir, "diagnose", time.perf_counter() - start)


def cmd_oracle_check(
    seed: int = 0, n_ens: int = 20_000, cov_tol: float = 0.05, threads: int = 1
) -> bool:
    """Linear-Gaussian consistency suite; prints PASS/FAIL per check.

    On an affine residual the randomized-loss samples are exact posterior
    draws, so the ensemble must reproduce the closed-form moments up to
    Monte Carlo error and the Metropolis filter must accept everything.
    """
    model = _random_linear(30, 5, 4, seed)
    params = LossParams(sigma_r_sq=0.5)
    mean, cov = linear_oracle(model, params)
    print(f"oracle-check: n_ens={n_ens} seed={seed} cov_tol={cov_tol:g}")

    map_result = map_optimize(model, params)
    map_err = float(np.max(np.abs(map_result.coefficients.stacked - mean)))
    checks = [("map vs oracle mean", map_err <= 1e-6, f"max coordinate error {map_err:.3e} (tol 1e-06)")]

    ensemble = run_ensemble(
        model, params, n_ens, EnsembleConfig(base_seed=seed, metropolize=False, n_workers=threads)
    )
    samples = ensemble.coefficient_matrix()
    se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
    worst = float(np.max(np.abs(samples.mean(axis=0) - mean) / se))
    checks.append(("sample mean", worst <= 3.0, f"worst coordinate at {worst:.2f} standard errors (tol 3)"))

    sample_cov = np.cov(samples, rowvar=False)
    rel = float(np.linalg.norm(sample_cov - cov) / np.linalg.norm(cov))
    checks.append(("sample covariance", rel <= cov_tol, f"relative Frobenius error {rel:.4f} (tol {cov_tol:g})"))

    filtered = run_ensemble(
        model, params, 1000, EnsembleConfig(base_seed=seed, metropolize=True, n_workers=threads)
    )
    acc = filtered.acceptance_rate
    checks.append(
        ("metropolis acceptance", acc == 1.0, f"{acc} over 1000 proposals (expected exactly 1.0)")
    )

    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    all_ok = all(ok for _, ok, _ in checks)
    print("oracle-check: all checks passed" if all_ok else "oracle-check: FAILURES above")
    return all_ok


_STAGE_HANDLERS = {
    "generate": cmd_generate,
    "build-prior": cmd_build_prior,
    "map": cmd_map,
    "sample-rpickle": cmd_sample_rpickle,
    "sample-hmc": cmd_sample_hmc,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rpickle",
        description="Randomized-loss posterior sampling pipeline for Darcy-flow inversion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    stage_help = {
        "generate": "sample the synthetic reference case",
        "build-prior": "condition both expansions on the case's wells",
        "map": "MAP solve per sigma_r_sq value",
        "sample-rpickle": "randomized-loss posterior ensembles",
        "sample-hmc": "HMC baseline chains",
        "diagnose": "per-gamma reports and the summary table",
    }
    for name, text in stage_help.items():
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", required=True, help="run configuration JSON file")
        cmd.add_argument("--out", help="output directory (overrides output_dir)")
        cmd.add_argument("--seed", type=int, help="base seed (overrides base_seed)")
        cmd.add_argument("--threads", type=int, default=1, help="worker threads (never changes results)")
    oracle = sub.add_parser("oracle-check", help="built-in linear-Gaussian consistency suite")
    oracle.add_argument("--seed", type=int, default=0, help="base seed for the linear model")
    oracle.add_argument("--n-ens", type=int, default=20_000, help="ensemble size for the moment checks")
    oracle.add_argument("--cov-tol", type=float, default=0.05, help="relative Frobenius tolerance")
    oracle.add_argument("--threads", type=int, default=1, help="worker threads (never changes results)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "oracle-check":
            passed = cmd_oracle_check(
                seed=args.seed, n_ens=args.n_ens, cov_tol=args.cov_tol, threads=args.threads
            )
            return 0 if passed else 2
        config = load_run_config(args.config, seed=args.seed, out=args.out)
        _STAGE_HANDLERS[args.command](config, threads=args.threads)
        return 0
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
