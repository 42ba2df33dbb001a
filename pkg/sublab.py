#!/usr/bin/env python3
from __future__ import annotations

import logging
import typing as t
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from modules.bernstein import BernsteinSpec, bernstein_report, conjugate, jump_sharp_table
from modules.config import Config, ExperimentConfig, resolve_domain, resolve_nonlinearity, resolve_phi
from modules.errors import LabError
from modules.montecarlo import PathConfig, validate
from modules.nonlinearity import ko_checks, transform_diagnostics
from modules.operators import (
    apply_phi_op,
    green_apply,
    green_kernel_ratio_table,
    heat_kernel_ratio_table,
    jd_ratio_table,
    load_field,
    pointwise_agreement,
    poisson_sigma,
    poisson_sigma_profile,
    save_field,
    spectral_identities,
)
from modules.regularity import fractional_check, interior_holder_check, lemma_ratio_suite
from modules.semilinear import (
    ModerateLadder,
    ModerateSolution,
    SupersolutionSpec,
    SolverOptions,
    build_ladder,
    build_supersolution,
    domination_check,
    large_extrapolate,
    ratio_gap,
    solve_moderate,
)
from modules.utils import log_grid, make_artifact_dir, setup_logging, sha256_of, worker_count, write_csv, write_json

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STAGE_ERROR = 1
EXIT_GATE_FAILED = 2
KERNEL_SPREAD_LIMIT = 10.0
VERSIONED_PACKAGES = ("numpy", "scipy", "mpmath", "pydantic", "PyYAML")


def _status(failures: list[str], what: str) -> int:
    for failure in failures:
        LOGGER.error("%s: %s", what, failure)
    return EXIT_GATE_FAILED if failures else EXIT_OK


# ---------------------------------------------------------------------------------------------
# Artifact writers shared by the subcommands and the pipeline


def write_solution(solution: ModerateSolution, directory: Path) -> None:
    save_field(solution.to_field(), directory / f"u_{solution.j}.json")


def write_profiles(solutions: t.Sequence[ModerateSolution], directory: Path) -> None:
    d = solutions[0].domain.d
    write_csv(
        directory / "boundary_profile.csv",
        ["delta", "face", "min_ratio", "max_ratio", "j"],
        [[row.delta, row.face, row.min_ratio, row.max_ratio, s.j] for s in solutions for row in s.boundary_profile],
    )
    write_csv(
        directory / "residuals.csv",
        ["j"] + [f"x{axis + 1}" for axis in range(d)] + ["residual"],
        [[s.j, *r.point, r.value] for s in solutions for r in s.residuals],
    )


def residual_failures(solutions: t.Sequence[ModerateSolution]) -> list[str]:
    return [
        f"u_{s.j} interior residual {s.residual_interior:.4g} exceeds "
        f"{s.residual_tolerance:g} of max f = {s.residual_scale:.4g}"
        for s in solutions
        if not s.residual_ok
    ]


def ladder_failures(ladder: ModerateLadder) -> list[str]:
    failures = residual_failures(ladder.solutions)
    if not ladder.monotone:
        failures.append(f"ladder not monotone, largest relative decrease {ladder.max_decrease:.3e}")
    if not ladder.within_bounds:
        failures.append("some u_j leaves the order interval [0, j Pσ]")
    if not ladder.gaps_decreasing:
        failures.append(f"interior Cauchy gaps not strictly decreasing: {ladder.cauchy_gaps}")
    if ladder.J >= 2:
        profile = ladder.solutions[1].boundary_profile
        near, far = ratio_gap(profile, 2, 0.02), ratio_gap(profile, 2, 0.1)
        if not near < far:
            failures.append(f"|u_2/Pσ − 2| is {near:.4g} at δ=0.02 and {far:.4g} at δ=0.1")
    return failures


# ---------------------------------------------------------------------------------------------
# Subcommands


def bernstein_command(config: Config) -> int:
    spec = resolve_phi(config.phi)
    report = bernstein_report(spec, d=config.d, seed=config.seed)
    for table in report.tables:
        LOGGER.info("%s: min %.4g, max %.4g, spread %.4g", table.label, table.vmin, table.vmax, table.spread)
    if config.report:
        write_json(config.report, report)
    failures = [] if report.passed else [report.certificate.reason or "derived-quantity checks fail"]
    return _status(failures, "bernstein check")


def ko_command(config: Config) -> int:
    nl = resolve_nonlinearity(config.f)
    report = ko_checks(nl, resolve_phi(config.phi))
    if config.report:
        write_json(config.report, {"ko": report, "transforms": transform_diagnostics(nl)})
    return _status(report.failures(), "ko check")


def op_command(config: Config) -> int:
    spec = resolve_phi(config.phi)
    if config.action == "poisson":
        value = poisson_sigma(spec, resolve_domain(config.domain), config.x)
        LOGGER.info("Pσ(%s) = %r", config.x, value)
        if config.out:
            write_json(config.out, {"x": config.x, "phi": spec.label, "poisson_sigma": value})
        return EXIT_OK
    source = load_field(config.field)
    result = apply_phi_op(source, spec) if config.action == "apply" else green_apply(source, spec)
    out = config.out or str(Path(config.field).with_name(f"{Path(config.field).stem}_{config.action}.json"))
    LOGGER.info("wrote %s", save_field(result, out))
    return EXIT_OK


def solve_command(config: Config) -> int:
    spec, nl = resolve_phi(config.phi), resolve_nonlinearity(config.f)
    domain = resolve_domain(config.domain)
    opts = SolverOptions(
        cutoff=config.cutoff,
        nodes_per_half=config.nodes_per_half,
        residual_tolerance=config.residual_tolerance,
        seed=config.seed,
        workers=config.workers,
    )
    out = make_artifact_dir(config.out)
    if config.action == "moderate":
        solution = solve_moderate(config.j, nl, spec, domain, opts)
        write_solution(solution, out)
        write_profiles([solution], out)
        return _status(residual_failures([solution]), "solve moderate")
    ladder = build_ladder(config.J, nl, spec, domain, opts)
    for solution in ladder.solutions:
        write_solution(solution, out)
    write_profiles(ladder.solutions, out)
    supersolution = build_supersolution(nl, spec, domain, opts)
    report = large_extrapolate(ladder, supersolution)
    write_json(out / "large.json", {"ladder": ladder.summary(), "large": report})
    write_csv(
        out / "blowup.csv",
        ["j", "delta", "min_ratio"],
        [[j + 1, report.blowup_delta, ratio] for j, ratio in enumerate(report.blowup_min_ratio)],
    )
    return _status(ladder_failures(ladder), "solve large")


def mc_command(config: Config) -> int:
    domain = resolve_domain(config.domain)
    x = config.x if config.x is not None else domain.center.tolist()
    paths = PathConfig(dt=config.dt, horizon=config.horizon, paths=config.paths, seed=config.seed, workers=config.workers)
    report = validate(BernsteinSpec.stable(config.alpha), domain, x, paths)
    for entry in report.entries:
        LOGGER.info(
            "%s: %.6g ± %.2g against %.6g (z=%.2f)",
            entry.name,
            entry.estimate.mean,
            entry.estimate.stderr,
            entry.oracle,
            entry.z_score,
        )
    if config.report:
        write_json(config.report, report)
    failures = [f"{e.name} outside the oracle band" for e in report.entries if e.gated and not e.passed]
    return _status(failures, "mc validate")


def regularity_command(config: Config) -> int:
    if config.suite == "fractional":
        spec = resolve_phi(config.phi) if config.phi else BernsteinSpec.stable(1.0)
        check = fractional_check(spec, d=config.d or 3)
        if config.report:
            write_csv(config.report, ["spec", "d", "value", "oracle", "rel_error"], check.rows())
        return _status([] if check.passed else [f"relative error {check.rel_error:.3g}"], "regularity check")
    report = lemma_ratio_suite(
        resolve_phi(config.phi),
        suite=config.suite,
        alpha=config.holder_alpha,
        d=config.d or 1,
        seed=config.seed,
        workers=config.workers,
    )
    if config.report:
        write_csv(config.report, ["suite", "member", "scale", "input_norm", "output_norm", "ratio"], report.csv_rows())
    failures = [] if report.passed else [report.reason or f"spreads {report.spreads}"]
    return _status(failures, "regularity check")


# ---------------------------------------------------------------------------------------------
# Pipeline


@dataclass
class PipelineState:
    experiment: ExperimentConfig
    out: Path
    ladder: ModerateLadder | None = None
    supersolution: SupersolutionSpec | None = None
    gates: dict[str, dict[str, t.Any]] = field(default_factory=dict)

    def __post_init__(self: t.Self) -> None:
        self.spec = self.experiment.phi_spec()
        self.nl = self.experiment.nl()
        self.domain = self.experiment.box()
        self.opts = self.experiment.solver_options()


def _ko_stage(state: PipelineState) -> list[str]:
    report = ko_checks(state.nl, state.spec)
    write_json(state.out / "ko_report.json", report)
    return report.failures()


def _spectral_stage(state: PipelineState) -> list[str]:
    report = spectral_identities(state.spec, conjugate(state.spec), state.domain, state.experiment.cutoff)
    write_json(state.out / "profiles" / "spectral_identities.json", report)
    return [] if report.passed else [f"identity errors {report.inverse_error:.3g}, {report.conjugate_error:.3g}"]


def _kernels_stage(state: PipelineState) -> list[str]:
    bounded = [
        jump_sharp_table(state.spec, state.domain.d, log_grid(0.01, 1.0, 9)),
        poisson_sigma_profile(state.spec, state.domain, log_grid(0.02, 0.3, 10)),
        jd_ratio_table(state.spec, state.domain),
    ]
    heat = heat_kernel_ratio_table(state.domain)
    green = green_kernel_ratio_table(state.spec, state.domain)
    tables = bounded + [heat, green]
    write_csv(state.out / "profiles" / "kernel_tables.csv", ["label", "point", "value"], [r for tb in tables for r in tb.rows()])
    failures = [f"{tb.label} spread {tb.spread:.4g}" for tb in bounded if not tb.bounded(KERNEL_SPREAD_LIMIT)]
    if not np.all(np.isfinite(heat.values)) or heat.vmin <= 0:
        failures.append(f"{heat.label} is not finite and positive")
    return failures


def _pointwise_stage(state: PipelineState) -> list[str]:
    report = pointwise_agreement(state.spec, state.domain, seed=state.experiment.seed, rule=state.opts.pointwise)
    columns = [f"x{axis + 1}" for axis in range(state.domain.d)] + ["pointwise", "spectral"]
    write_csv(state.out / "profiles" / "pointwise.csv", columns, report.rows())
    return [] if report.passed else [f"relative error {report.max_error:.3g}"]


def _ladder_stage(state: PipelineState) -> list[str]:
    ladder = build_ladder(state.experiment.J, state.nl, state.spec, state.domain, state.opts)
    state.ladder = ladder
    directory = make_artifact_dir(state.out, "ladder")
    for solution in ladder.solutions:
        write_solution(solution, directory)
    write_profiles(ladder.solutions, make_artifact_dir(state.out, "profiles"))
    failures = ladder_failures(ladder)
    write_json(directory / "ladder.json", {**ladder.summary(), "failures": failures})
    return failures


def _supersolution_stage(state: PipelineState) -> list[str]:
    supersolution = build_supersolution(state.nl, state.spec, state.domain, state.opts)
    state.supersolution = supersolution
    write_json(
        state.out / "supersolution" / "supersolution.json",
        {**supersolution.summary(), "blowup_factor": supersolution.blowup_factor()},
    )
    return [] if supersolution.holds else ["supersolution inequality fails at some check point"]


def _domination_stage(state: PipelineState) -> list[str]:
    report = domination_check(t.cast(ModerateLadder, state.ladder), t.cast(SupersolutionSpec, state.supersolution))
    write_json(state.out / "supersolution" / "domination.json", report)
    return [] if report.passed else [f"u_j exceeds the supersolution by {report.max_excess:.4g}"]


def _blowup_stage(state: PipelineState) -> list[str]:
    report = large_extrapolate(t.cast(ModerateLadder, state.ladder), state.supersolution)
    write_csv(
        state.out / "profiles" / "blowup.csv",
        ["j", "delta", "min_ratio"],
        [[j + 1, report.blowup_delta, ratio] for j, ratio in enumerate(report.blowup_min_ratio)],
    )
    write_json(state.out / "ladder" / "large.json", report)
    failures = []
    if not report.blowup_nondecreasing:
        failures.append("min u_J/Pσ on the shell decreases with J")
    if not report.blowup_linear:
        failures.append("min u_J/Pσ on the shell falls below J/2")
    return failures


def _mc_stage(state: PipelineState) -> list[str]:
    report = validate(
        state.spec,
        state.domain,
        state.experiment.point(),
        state.experiment.path_config(),
        survival_time=state.experiment.survival_time,
    )
    for name in ("green", "survival"):
        write_json(state.out / "mc" / f"{name}.json", report.entry(name))
    ungated = [entry for entry in report.entries if not entry.gated]
    if ungated:
        write_json(state.out / "mc" / "functionals.json", ungated)
    return [f"{e.name} outside the oracle band" for e in report.entries if e.gated and not e.passed]


def _regularity_stage(state: PipelineState) -> list[str]:
    directory = make_artifact_dir(state.out, "regularity")
    experiment = state.experiment
    failures = []
    check = fractional_check(state.spec, d=3)
    write_csv(directory / "fractional_check.csv", ["spec", "d", "value", "oracle", "rel_error"], check.rows())
    if not check.passed:
        failures.append(f"fractional check relative error {check.rel_error:.3g}")
    suite = lemma_ratio_suite(
        experiment.regularity_spec(),
        suite=experiment.regularity_suite,
        alpha=experiment.holder_alpha,
        d=experiment.regularity_d,
        seed=experiment.seed,
        workers=experiment.workers,
    )
    write_csv(
        directory / "ratio_suite.csv", ["suite", "member", "scale", "input_norm", "output_norm", "ratio"], suite.csv_rows()
    )
    if not suite.passed:
        failures.append(f"ratio suite {suite.suite}: {suite.reason or suite.spreads}")
    holder = interior_holder_check(t.cast(ModerateLadder, state.ladder).solutions[0], state.opts, seed=experiment.seed)
    write_csv(
        directory / "interior_holder.csv", ["nodes_per_half", "order", "exponent", "sup_norm", "seminorm"], holder.rows()
    )
    if not holder.stable:
        failures.append(f"interior Hölder estimate moves by {holder.relative_gap:.3g} under refinement")
    return failures


STAGES: tuple[tuple[str, t.Callable[[PipelineState], list[str]], bool], ...] = (
    # (gate, stage, always runs)
    ("ko", _ko_stage, True),
    ("spectral", _spectral_stage, False),
    ("kernels", _kernels_stage, False),
    ("pointwise", _pointwise_stage, False),
    ("ladder", _ladder_stage, True),
    ("supersolution", _supersolution_stage, True),
    ("domination", _domination_stage, True),
    ("blowup", _blowup_stage, True),
    ("mc", _mc_stage, False),
    ("regularity", _regularity_stage, False),
)


def manifest(experiment: ExperimentConfig) -> dict[str, t.Any]:
    """Config, its hash, package versions, seeds and gates. The output directory is left out."""
    payload = experiment.model_dump(mode="json", exclude={"out"})
    versions = {}
    for package in VERSIONED_PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = None
    return {
        "config": payload,
        "config_hash": sha256_of(payload),
        "versions": versions,
        "seeds": {"seed": experiment.seed, "mc_seed": experiment.path_config().seed},
        "gates": experiment.gates,
    }


def run_pipeline(experiment: ExperimentConfig) -> int:
    """
    Run every stage in order and write the artifact directory.

    A stage error or a failed enabled gate stops the pipeline. Artifacts written so far stay,
    and summary.json records the verdicts.

    Returns:
        int: 0 when every enabled gate passes, 2 at a failed gate, 1 at a stage error.
    """
    out = make_artifact_dir(experiment.out)
    write_json(out / "manifest.json", manifest(experiment))
    state = PipelineState(experiment=experiment, out=out)
    status, stopped_at = EXIT_OK, None
    for gate, stage, always in STAGES:
        enabled = gate in experiment.gates
        if not (enabled or always):
            LOGGER.info("skipping %s stage", gate)
            continue
        LOGGER.info("%s stage started", gate)
        try:
            failures = stage(state)
        except LabError as e:
            LOGGER.error("%s stage failed: %s", gate, e)
            state.gates[gate] = {"enabled": enabled, "passed": False, "failures": [f"{type(e).__name__}: {e}"]}
            status, stopped_at = EXIT_STAGE_ERROR, gate
            break
        state.gates[gate] = {"enabled": enabled, "passed": not failures, "failures": failures}
        LOGGER.info("%s stage finished", gate)
        if failures and enabled:
            _status(failures, f"{gate} gate")
            status, stopped_at = EXIT_GATE_FAILED, gate
            break
    write_json(out / "summary.json", {"exit_status": status, "stopped_at": stopped_at, "gates": state.gates})
    LOGGER.info("artifacts in %s, exit status %d", out, status)
    return status


COMMANDS: dict[str, t.Callable[[Config], int]] = {
    "bernstein": bernstein_command,
    "ko": ko_command,
    "op": op_command,
    "solve": solve_command,
    "mc": mc_command,
    "regularity": regularity_command,
}


def main(*args: str) -> int:
    # Parse command line arguments
    config = Config.from_args(True, *args)
    if config.generate_yaml:
        config.generate_yaml_from_parser(file_path="/tmp/arguments.yaml")
        return EXIT_OK
    setup_logging(config.log_file_path, config.verbose)
    config.workers = worker_count(config.workers)

    if config.command == "run":
        return run_pipeline(config.experiment())
    try:
        return COMMANDS[config.command](config)
    except LabError as e:
        LOGGER.error("%s failed: %s", config.command, e)
        return EXIT_STAGE_ERROR


if __name__ == "__main__":
    exit(main())
