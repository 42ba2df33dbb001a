import json
import logging
import sys
from collections.abc import Generator
from pathlib import Path

import pytest
import yaml

from modules.bernstein import Family
from modules.config import Config, ExperimentConfig, resolve_domain, resolve_phi


@pytest.fixture
def config_dict(request: pytest.FixtureRequest) -> Generator[dict, None, None]:
    default_dict = {
        "phi": {"family": "stable", "parameters": {"alpha": 1.0}, "label": "stable(1)"},
        "nonlinearity": {"family": "power", "parameters": {"p": 1.75}, "label": "t^1.75"},
        "domain": {"d": 3, "sides": [1.0, 1.0, 1.0]},
        "cutoff": 8,
        "nodes-per-half": 16,
        "J": 3,
        "out": "/tmp/sublab-test",
    }
    param = getattr(request, "param", None)
    if isinstance(param, dict):
        default_dict.update(param)
    yield default_dict


@pytest.fixture
def yaml_config(tmp_path: Path, config_dict: dict) -> Generator[str, None, None]:
    yamlfile = tmp_path / "config.yaml"
    with open(yamlfile, "w") as file:
        yaml.dump(config_dict, file)
    yield str(yamlfile)


@pytest.fixture
def phi_file(tmp_path: Path) -> str:
    path = tmp_path / "phi.json"
    path.write_text(json.dumps({"family": "stable", "parameters": {"alpha": 0.5}}))
    return str(path)


def assert_config_correct(config_dict: dict, config_obj: Config) -> None:
    for key, item in config_dict.items():
        assert getattr(config_obj, key.replace("-", "_")) == item


def test_yaml_load(config_dict: dict, yaml_config: str) -> None:
    config_obj = Config(yaml=yaml_config)

    config_obj._load_yaml()

    assert_config_correct(config_dict, config_obj)
    assert "yaml" not in config_obj


def test_json_load(tmp_path: Path, config_dict: dict) -> None:
    jsonfile = tmp_path / "config.json"
    jsonfile.write_text(json.dumps(config_dict))
    config_obj = Config(yaml=str(jsonfile))

    config_obj._load_yaml()

    assert_config_correct(config_dict, config_obj)


def test_toml_load(tmp_path: Path) -> None:
    tomlfile = tmp_path / "config.toml"
    tomlfile.write_text('cutoff = 12\nJ = 4\n\n[mc]\npaths = 200\ndt = 0.001\n')
    config_obj = Config(yaml=str(tomlfile))

    config_obj._load_yaml()
    experiment = config_obj.experiment()

    assert experiment.cutoff == 12
    assert experiment.J == 4
    assert experiment.mc.paths == 200


def test_yaml_load_file_not_found(tmp_path: Path, caplog: pytest.LogCaptureFixture) -> None:
    yamlfile = str(tmp_path / "config.yaml")
    config_obj = Config(yaml=yamlfile)

    with pytest.raises(SystemExit):
        config_obj._load_yaml()

    assert caplog.record_tuples == [("modules.config", logging.CRITICAL, "YAML file not found: %s" % yamlfile)]


def test_yaml_load_invalid_file(tmp_path: Path, caplog: pytest.LogCaptureFixture) -> None:
    yamlfile = str(tmp_path / "config.yaml")
    with open(yamlfile, "w") as file:
        file.write("value: !invalid\n")
    config_obj = Config(yaml=yamlfile)

    with pytest.raises(SystemExit):
        config_obj._load_yaml()

    assert caplog.record_tuples == [("modules.config", logging.CRITICAL, "Error parsing YAML file")]


def test_toml_load_invalid_file(tmp_path: Path, caplog: pytest.LogCaptureFixture) -> None:
    tomlfile = str(tmp_path / "config.toml")
    with open(tomlfile, "w") as file:
        file.write("cutoff = = 3\n")
    config_obj = Config(yaml=tomlfile)

    with pytest.raises(SystemExit):
        config_obj._load_yaml()

    assert caplog.record_tuples == [("modules.config", logging.CRITICAL, "Error parsing TOML file")]


def test_cli_yaml_and_args(
    capsys: pytest.CaptureFixture,
    caplog: pytest.LogCaptureFixture,
    monkeypatch: pytest.MonkeyPatch,
) -> None:
    with caplog.at_level(logging.ERROR):
        with monkeypatch.context() as m:
            m.setattr(sys, "argv", ["pytest", "--yaml", "./filename", "--seed", "3"])
            with pytest.raises(SystemExit):
                Config.from_args()

        # Verify the correct error message was logged
        assert caplog.record_tuples == [
            (
                "modules.config",
                logging.ERROR,
                "When using --yaml, no other arguments should be provided.",
            )
        ]

        # Verify that help text was printed to stderr
        output = capsys.readouterr()
        assert "usage:" in output.err


def test_cli_yaml_sets_run_command(yaml_config: str) -> None:
    config = Config.from_args(True, "--yaml", yaml_config)

    assert config.command == "run"
    assert config.experiment().J == 3


@pytest.mark.parametrize(
    "args, expected_logs",
    [
        (["bernstein", "check"], ["Bernstein spec (--phi) not specified"]),
        (["ko", "check", "--phi", "{}"], ["Nonlinearity (--f) not specified"]),
        (["solve", "moderate"], ["Bernstein spec (--phi) not specified", "Nonlinearity (--f) not specified"]),
        (["op", "apply", "--phi", "{}"], ["Input field (--field) not specified"]),
        (["op", "poisson", "--phi", "{}"], ["Point (--x) not specified"]),
        ([], ["No command given, expected one of bernstein, ko, op, solve, mc, regularity, run"]),
    ],
    ids=["bernstein_without_phi", "ko_without_f", "solve_without_both", "apply_without_field", "poisson_without_x", "none"],
)
def test_missing_options_are_reported(
    args: list[str], expected_logs: list[str], caplog: pytest.LogCaptureFixture
) -> None:
    # Act
    Config.from_args(False, "--seed", "0", *args)

    # Assert
    assert [message for _, level, message in caplog.record_tuples if level == logging.CRITICAL] == expected_logs


@pytest.mark.parametrize(
    "args",
    [
        ["mc", "validate"],
        ["regularity", "check", "--suite", "fractional"],
        ["bernstein", "check", "--phi", '{"family": "stable", "parameters": {"alpha": 1.0}}'],
    ],
    ids=["mc_needs_nothing", "fractional_needs_no_phi", "bernstein_with_phi"],
)
def test_valid_commands_do_not_exit(args: list[str], caplog: pytest.LogCaptureFixture) -> None:
    config = Config.from_args(True, *args)

    assert config.command == args[0]
    assert not [r for r in caplog.record_tuples if r[1] == logging.CRITICAL]


def test_run_with_invalid_budget_exits(caplog: pytest.LogCaptureFixture, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(Config, "experiment", lambda self: ExperimentConfig(cutoff=40))

    with pytest.raises(SystemExit):
        Config.from_args(True, "run")

    messages = [message for _, level, message in caplog.record_tuples if level == logging.CRITICAL]
    assert len(messages) == 1
    assert messages[0].startswith("Invalid experiment:")


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"cutoff": 33}, "cutoff 33 outside the budget"),
        ({"nodes_per_half": 49}, "98 grid nodes per axis exceed the budget"),
        ({"gates": ["ko", "plots"]}, "unknown gates ['plots']"),
        ({"J": 0}, "J must be at least 1"),
        ({"phi": "/nonexistent/phi.json"}, "does not load"),
    ],
    ids=["cutoff", "nodes", "gates", "ladder", "missing_file"],
)
def test_experiment_config_rejects(overrides: dict, message: str) -> None:
    with pytest.raises(ValueError, match=message.replace("[", r"\[").replace("]", r"\]")):
        ExperimentConfig(**overrides)


def test_experiment_config_defaults_are_the_reference() -> None:
    experiment = ExperimentConfig()

    assert experiment.phi_spec().alpha == 1.0
    assert experiment.nl().p == 1.75
    assert experiment.box().d == 3
    assert (experiment.cutoff, experiment.J) == (16, 6)
    assert experiment.point() == [0.5, 0.5, 0.5]


def test_experiment_options_carry_seed_and_workers() -> None:
    experiment = ExperimentConfig(seed=7, workers=3, cutoff=8, residual_tolerance=1e-3)

    assert experiment.solver_options().cutoff == 8
    assert experiment.solver_options().seed == 7
    assert experiment.solver_options().residual_tolerance == 1e-3
    assert experiment.path_config().seed == 7
    assert experiment.path_config().workers == 3


def test_resolve_references(phi_file: str) -> None:
    assert resolve_phi(phi_file).alpha == 0.5
    assert resolve_phi('{"family": "tempered_stable", "parameters": {"alpha": 1.0, "theta": 2.0}}').family is (
        Family.TEMPERED_STABLE
    )
    assert resolve_domain(None).sides == (1.0, 1.0, 1.0)
    assert resolve_domain({"d": 2, "sides": [1.0, 2.0]}).volume == 2.0


def test_generate_yaml_round_trips(tmp_path: Path) -> None:
    target = tmp_path / "arguments.yaml"
    Config().generate_yaml_from_parser(str(target))
    config_obj = Config(yaml=str(target))

    config_obj._load_yaml()

    assert config_obj.experiment() == ExperimentConfig()


def test_config_contains() -> None:
    config = Config(command="run")

    assert "command" in config
    assert "yaml" not in config
