from __future__ import annotations

import argparse
import json
import logging
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import typing as t
from pathlib import Path

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from modules.bernstein import BernsteinSpec, load_spec, spec_from_dict
from modules.domain import BoxDomain, load_domain
from modules.montecarlo import PathConfig
from modules.nonlinearity import Nonlinearity, load_nonlinearity, nonlinearity_from_dict
from modules.semilinear import SolverOptions

LOGGER = logging.getLogger(__name__)

MAX_CUTOFF = 32
MAX_NODES_PER_AXIS = 96
MAX_MODES = 32768
GATES = (
    "ko",
    "spectral",
    "kernels",
    "pointwise",
    "ladder",
    "supersolution",
    "domination",
    "blowup",
    "mc",
    "regularity",
)

Reference = dict[str, t.Any] | str


def _read_reference(ref: Reference) -> dict[str, t.Any] | Path:
    """A reference is an inline mapping, an inline JSON object string or a path to a JSON file."""
    if isinstance(ref, dict):
        return ref
    text = ref.strip()
    if text.startswith("{"):
        return json.loads(text)
    return Path(text)


def resolve_phi(ref: Reference) -> BernsteinSpec:
    source = _read_reference(ref)
    return load_spec(source) if isinstance(source, Path) else spec_from_dict(source)


def resolve_nonlinearity(ref: Reference) -> Nonlinearity:
    source = _read_reference(ref)
    return load_nonlinearity(source) if isinstance(source, Path) else nonlinearity_from_dict(source)


def resolve_domain(ref: Reference | None) -> BoxDomain:
    if ref is None:
        return BoxDomain.unit_cube()
    source = _read_reference(ref)
    if isinstance(source, Path):
        return load_domain(source)
    return BoxDomain(d=source["d"], sides=tuple(source["sides"]))


class ExperimentConfig(BaseModel):
    """
    Everything `run` needs. The defaults are the reference experiment: unit cube, stable α=1,
    f(t) = t^1.75, N=16, J=6.
    """

    model_config = ConfigDict(frozen=True)

    phi: Reference = {"family": "stable", "parameters": {"alpha": 1.0}, "label": "stable(1)"}
    nonlinearity: Reference = {"family": "power", "parameters": {"p": 1.75}, "label": "t^1.75"}
    domain: Reference = {"d": 3, "sides": [1.0, 1.0, 1.0]}
    cutoff: int = 16
    nodes_per_half: int = 32
    grading: float = 3.0
    J: int = 6
    theta: float = 0.5
    tol: float = 1e-8
    k_max: int = 500
    check_points: int = 10
    residual_tolerance: float = 1e-2
    mc: PathConfig = PathConfig()
    mc_point: list[float] | None = None
    survival_time: float = 0.1
    regularity_phi: Reference = {"family": "stable", "parameters": {"alpha": 0.3}, "label": "stable(0.3)"}
    regularity_suite: str = "reg0"
    holder_alpha: float = 0.8
    regularity_d: int = 1
    gates: list[str] = list(GATES)
    out: str = "/tmp/sublab"
    workers: int = 1
    seed: int = 0

    @model_validator(mode="after")
    def _check(self: t.Self) -> t.Self:
        unknown = sorted(set(self.gates) - set(GATES))
        if unknown:
            raise ValueError(f"unknown gates {unknown}, expected a subset of {list(GATES)}")
        try:
            domain = self.box()
            self.phi_spec()
            self.nl()
            self.regularity_spec()
        except (OSError, KeyError, ValueError) as e:
            raise ValueError(f"a referenced spec, nonlinearity or domain does not load: {e}") from e
        if not 1 <= self.cutoff <= MAX_CUTOFF:
            raise ValueError(f"cutoff {self.cutoff} outside the budget 1..{MAX_CUTOFF}")
        if not 1 <= 2 * self.nodes_per_half <= MAX_NODES_PER_AXIS:
            raise ValueError(f"{2 * self.nodes_per_half} grid nodes per axis exceed the budget {MAX_NODES_PER_AXIS}")
        if self.cutoff**domain.d > MAX_MODES:
            raise ValueError(f"{self.cutoff}^{domain.d} modes exceed the budget {MAX_MODES}")
        if self.J < 1:
            raise ValueError("J must be at least 1")
        return self

    def phi_spec(self: t.Self) -> BernsteinSpec:
        return resolve_phi(self.phi)

    def nl(self: t.Self) -> Nonlinearity:
        return resolve_nonlinearity(self.nonlinearity)

    def box(self: t.Self) -> BoxDomain:
        return resolve_domain(self.domain)

    def regularity_spec(self: t.Self) -> BernsteinSpec:
        return resolve_phi(self.regularity_phi)

    def solver_options(self: t.Self) -> SolverOptions:
        return SolverOptions(
            cutoff=self.cutoff,
            nodes_per_half=self.nodes_per_half,
            grading=self.grading,
            theta=self.theta,
            tol=self.tol,
            k_max=self.k_max,
            check_points=self.check_points,
            residual_tolerance=self.residual_tolerance,
            seed=self.seed,
            workers=self.workers,
        )

    def path_config(self: t.Self) -> PathConfig:
        return self.mc.model_copy(update={"seed": self.seed, "workers": self.workers})

    def point(self: t.Self) -> list[float]:
        return self.mc_point if self.mc_point is not None else self.box().center.tolist()


def _add_references(parser: argparse.ArgumentParser, phi: bool = True, f: bool = False, domain: bool = True) -> None:
    if phi:
        parser.add_argument("--phi", dest="phi", type=str, default=None, help="Bernstein spec: JSON file or inline JSON")
    if f:
        parser.add_argument("--f", dest="f", type=str, default=None, help="Nonlinearity: JSON file or inline JSON")
    if domain:
        parser.add_argument(
            "--domain", dest="domain", type=str, default=None, help="Box domain: JSON file or inline JSON (unit cube)"
        )


def _get_parser() -> argparse.ArgumentParser:
    """Create the ArgumentParser with one subparser per command.

    Returns:
        argparse.ArgumentParser: ArgumentParser object configured for all cli options.
    """
    parser = argparse.ArgumentParser(description="Numerical lab for the spectral operator φ(−Δ|_D) on boxes.")
    parser.add_argument(
        "--log-file-path",
        dest="log_file_path",
        type=str,
        default="/tmp/sublab.log",
        help="Path to the log file",
    )
    parser.add_argument(
        "--verbose", dest="verbose", default=False, action="store_true", help="Emit debug records on stderr"
    )
    parser.add_argument(
        "--workers", dest="workers", type=int, default=None, help="Worker count (default: SUBLAB_WORKERS or 1)"
    )
    parser.add_argument("--seed", dest="seed", type=int, default=0, help="Seed for every random stream")
    parser.add_argument(
        "--generate-yaml",
        dest="generate_yaml",
        default=False,
        action="store_true",
        help="Generates a reference experiment yaml file instead of running the command",
    )
    parser.add_argument("--yaml", type=str, help="Path to an experiment file (YAML, JSON or TOML) for `run`")

    commands = parser.add_subparsers(dest="command")

    bernstein = commands.add_parser("bernstein", help="Bernstein function checks")
    bernstein.add_argument("action", choices=["check"])
    _add_references(bernstein, domain=False)
    bernstein.add_argument("--d", dest="d", type=int, default=3, help="Dimension of the jump kernel tables")
    bernstein.add_argument("--report", dest="report", type=str, default=None, help="JSON report path")

    ko = commands.add_parser("ko", help="Keller–Osserman checks")
    ko.add_argument("action", choices=["check"])
    _add_references(ko, f=True, domain=False)
    ko.add_argument("--report", dest="report", type=str, default=None, help="JSON report path")

    op = commands.add_parser("op", help="Apply spectral operators")
    op.add_argument("action", choices=["apply", "green", "poisson"])
    _add_references(op)
    op.add_argument("--field", dest="field", type=str, default=None, help="Input field header (apply, green)")
    op.add_argument("--x", dest="x", type=float, nargs="+", default=None, help="Point for poisson")
    op.add_argument("--out", dest="out", type=str, default=None, help="Output path")

    solve = commands.add_parser("solve", help="Semilinear solves")
    solve.add_argument("action", choices=["moderate", "large"])
    _add_references(solve, f=True)
    solve.add_argument("--j", dest="j", type=int, default=1, help="Boundary multiplier for moderate")
    solve.add_argument("--J", dest="J", type=int, default=6, help="Ladder length for large")
    solve.add_argument("--cutoff", dest="cutoff", type=int, default=16, help="Basis cutoff N per axis")
    solve.add_argument("--nodes-per-half", dest="nodes_per_half", type=int, default=32, help="Grid nodes per half axis")
    solve.add_argument(
        "--residual-tolerance",
        dest="residual_tolerance",
        type=float,
        default=1e-2,
        help="Interior residual bound relative to max f(u_j)",
    )
    solve.add_argument("--out", dest="out", type=str, default="/tmp/sublab-solve", help="Output directory")

    mc = commands.add_parser("mc", help="Monte Carlo validation")
    mc.add_argument("action", choices=["validate"])
    mc.add_argument("--alpha", dest="alpha", type=float, default=1.0, help="Stable index α in (0, 2)")
    _add_references(mc, phi=False)
    mc.add_argument("--x", dest="x", type=float, nargs="+", default=None, help="Starting point (default: center)")
    mc.add_argument("--paths", dest="paths", type=int, default=10_000, help="Number of paths")
    mc.add_argument("--dt", dest="dt", type=float, default=1e-4, help="Time step")
    mc.add_argument("--horizon", dest="horizon", type=float, default=4.0, help="Simulation horizon")
    mc.add_argument("--report", dest="report", type=str, default=None, help="JSON report path")

    regularity = commands.add_parser("regularity", help="Regularity harness")
    regularity.add_argument("action", choices=["check"])
    _add_references(regularity, domain=False)
    regularity.add_argument(
        "--suite", dest="suite", choices=["fractional", "reg0", "reg1", "reg2"], default="reg0", help="Suite name"
    )
    regularity.add_argument("--holder-alpha", dest="holder_alpha", type=float, default=0.8, help="Hölder exponent α")
    regularity.add_argument("--d", dest="d", type=int, default=None, help="Dimension (3 for fractional, else 1)")
    regularity.add_argument("--report", dest="report", type=str, default=None, help="CSV report path")

    run = commands.add_parser("run", help="Run the full pipeline")
    run.add_argument("--out", dest="out", type=str, default=None, help="Artifact directory")

    return parser


def _parse_fail(msg: str) -> None:
    LOGGER.error(msg)
    _get_parser().print_help(sys.stderr)
    exit(1)


class Config:
    def __init__(self: t.Self, **kwargs: t.Any) -> None:
        for name in kwargs:
            setattr(self, name, kwargs[name])

    def __contains__(self: t.Self, key: str) -> bool:
        return key in self.__dict__

    @classmethod
    def from_args(cls: type[t.Self], exit_on_error: bool = True, *args: str) -> t.Self:
        """Create Config object from passed arguements or sys.argv

        Args:
            *args (str): strings to be interpreted as command line arguements.

        Returns:
            Config: Config object with all parsed arguements as attributes
        """
        parser = _get_parser()
        config = cls()
        if not args:
            args = None

        parser.parse_args(args=args, namespace=config)

        if config.yaml:
            parser_args = sys.argv[1:] if args is None else args
            # only the command word may accompany --yaml
            if any(arg.startswith("-") and arg.split("=")[0] != "--yaml" for arg in parser_args):
                _parse_fail("When using --yaml, no other arguments should be provided.")
            config._load_yaml()
            config.command = "run"

        config._validate(exit_on_error=exit_on_error)
        return config

    def _load_yaml(self: t.Self) -> None:
        """Read an experiment file (YAML, JSON or TOML by suffix) and add its keys as attributes."""
        try:
            with open(self.yaml, "rb") as handle:
                raw = handle.read()
            if str(self.yaml).endswith(".toml"):
                config_dict = tomllib.loads(raw.decode("utf-8"))
            else:
                config_dict = yaml.safe_load(raw) or {}
            # Convert dash-separated keys to underscore-separated keys
            for key, value in config_dict.items():
                setattr(self, key.replace("-", "_"), value)
            self.experiment_keys = [key.replace("-", "_") for key in config_dict]
            delattr(self, "yaml")

        except FileNotFoundError:
            LOGGER.critical("YAML file not found: %s", self.yaml)
            exit(1)
        except yaml.YAMLError as e:
            LOGGER.critical("Error parsing YAML file", exc_info=e)
            exit(1)
        except tomllib.TOMLDecodeError as e:
            LOGGER.critical("Error parsing TOML file", exc_info=e)
            exit(1)

    def experiment(self: t.Self) -> ExperimentConfig:
        """The ExperimentConfig of `run`: file keys when loaded, else defaults with the global flags."""
        data = {key: getattr(self, key) for key in getattr(self, "experiment_keys", [])}
        if getattr(self, "out", None):
            data.setdefault("out", self.out)
        if getattr(self, "workers", None):
            data.setdefault("workers", self.workers)
        data.setdefault("seed", getattr(self, "seed", 0))
        return ExperimentConfig(**data)

    def _validate(self: t.Self, exit_on_error=True) -> None:
        """
        Ensure that the options the chosen command needs are available.

        - bernstein check, op, regularity check: phi
        - ko check, solve: phi and f
        - op apply|green: field; op poisson: x
        - run: a loadable experiment within the resource budget

        Every missing option is logged at critical level before the program exits.
        """
        if getattr(self, "generate_yaml", False):
            return
        command = getattr(self, "command", None)
        if command is None:
            LOGGER.critical("No command given, expected one of bernstein, ko, op, solve, mc, regularity, run")
            if exit_on_error:
                exit(1)
            return

        required = {
            "phi": "Bernstein spec (--phi) not specified",
            "f": "Nonlinearity (--f) not specified",
            "field": "Input field (--field) not specified",
            "x": "Point (--x) not specified",
        }
        needed: list[str] = []
        match command:
            case "bernstein" | "regularity":
                needed = ["phi"] if getattr(self, "suite", None) != "fractional" or command == "bernstein" else []
            case "ko" | "solve":
                needed = ["phi", "f"]
            case "op":
                needed = ["phi", "x"] if self.action == "poisson" else ["phi", "field"]

        missing_errors = []
        for attr in needed:
            value = getattr(self, attr, None)
            if value is None or (isinstance(value, str) and value.strip() == ""):
                missing_errors.append(required[attr])

        if command == "run":
            try:
                self.experiment()
            except ValidationError as e:
                missing_errors.extend(f"Invalid experiment: {err['msg']}" for err in e.errors())

        if missing_errors:
            for error_msg in missing_errors:
                LOGGER.critical(error_msg)

            if exit_on_error:
                exit(1)

    def generate_yaml_from_parser(self: t.Self, file_path: str | None = None) -> None:
        """
        Write the reference experiment as a YAML file that `--yaml` loads back.
        """
        if file_path is None:
            file_path = "arguments.yaml"
        config_data_attributes = ExperimentConfig().model_dump(mode="json")

        with open(file_path, "w") as f:
            yaml.dump(config_data_attributes, f, indent=2, sort_keys=False)

