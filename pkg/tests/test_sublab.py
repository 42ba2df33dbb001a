import json
from types import SimpleNamespace

import pytest

import sublab
from modules.config import Config, ExperimentConfig
from modules.errors import DomainError, NumericalError

STABLE = '{"family": "stable", "parameters": {"alpha": 1.0}, "label": "stable(1)"}'
POWER = '{"family": "power", "parameters": {"p": 1.75}}'


def _stages(mocker, outcomes):
    """Stub STAGES with one mock per (gate, result, always); a result may be an exception."""
    stubs = {}
    stages = []
    for gate, result, always in outcomes:
        stub = mocker.MagicMock(name=gate)
        if isinstance(result, Exception):
            stub.side_effect = result
        else:
            stub.return_value = result
        stubs[gate] = stub
        stages.append((gate, stub, always))
    mocker.patch.object(sublab, "STAGES", tuple(stages))
    return stubs


def _summary(out):
    return json.loads((out / "summary.json").read_text())


def test_pipeline_passes(tmp_path, mocker):
    # Arrange
    stubs = _stages(mocker, [("ko", [], True), ("ladder", [], True), ("mc", [], False)])
    experiment = ExperimentConfig(out=str(tmp_path))
    # Act
    status = sublab.run_pipeline(experiment)
    # Assert
    assert status == sublab.EXIT_OK
    assert all(stub.call_count == 1 for stub in stubs.values())
    summary = _summary(tmp_path)
    assert summary["stopped_at"] is None
    assert summary["gates"]["ladder"] == {"enabled": True, "passed": True, "failures": []}
    assert (tmp_path / "manifest.json").exists()


def test_pipeline_stops_at_failed_gate(tmp_path, mocker, caplog):
    stubs = _stages(mocker, [("ko", ["KO1 fails"], True), ("ladder", [], True)])

    status = sublab.run_pipeline(ExperimentConfig(out=str(tmp_path)))

    assert status == sublab.EXIT_GATE_FAILED
    assert stubs["ladder"].call_count == 0
    assert _summary(tmp_path)["stopped_at"] == "ko"
    assert "ko gate: KO1 fails" in caplog.text


def test_pipeline_reports_stage_errors(tmp_path, mocker):
    _stages(mocker, [("ko", [], True), ("ladder", NumericalError("Picard iteration stalled"), True)])

    status = sublab.run_pipeline(ExperimentConfig(out=str(tmp_path)))

    summary = _summary(tmp_path)
    assert status == sublab.EXIT_STAGE_ERROR
    assert summary["exit_status"] == 1
    assert summary["gates"]["ladder"]["failures"] == ["NumericalError: Picard iteration stalled"]


def test_disabled_gates(tmp_path, mocker):
    # Arrange
    stubs = _stages(mocker, [("ko", ["KO2 inconclusive"], True), ("mc", [], False), ("ladder", [], True)])
    experiment = ExperimentConfig(out=str(tmp_path), gates=["ladder"])
    # Act
    status = sublab.run_pipeline(experiment)
    # Assert
    assert status == sublab.EXIT_OK
    assert stubs["mc"].call_count == 0
    assert _summary(tmp_path)["gates"]["ko"] == {"enabled": False, "passed": False, "failures": ["KO2 inconclusive"]}


def test_manifest_is_deterministic():
    first = sublab.manifest(ExperimentConfig(out="/tmp/a", seed=4))
    second = sublab.manifest(ExperimentConfig(out="/tmp/b", seed=4))

    assert first == second
    assert "out" not in first["config"]
    assert first["seeds"] == {"seed": 4, "mc_seed": 4}
    assert first["config_hash"] != sublab.manifest(ExperimentConfig(seed=5))["config_hash"]


def test_main_generate_yaml(mocker):
    generate = mocker.patch.object(Config, "generate_yaml_from_parser")

    assert sublab.main("--generate-yaml") == sublab.EXIT_OK
    generate.assert_called_once_with(file_path="/tmp/arguments.yaml")


@pytest.mark.parametrize(
    "p, status",
    [(1.75, sublab.EXIT_OK), (1.2, sublab.EXIT_GATE_FAILED)],
    ids=["ko_holds", "ko1_fails"],
)
def test_main_ko_check(p, status, tmp_path):
    # Arrange
    report = tmp_path / "ko.json"
    f = json.dumps({"family": "power", "parameters": {"p": p}})
    # Act
    result = sublab.main(
        "--log-file-path", str(tmp_path / "sublab.log"), "ko", "check", "--phi", STABLE, "--f", f, "--report", str(report)
    )
    # Assert
    assert result == status
    assert set(json.loads(report.read_text())) == {"ko", "transforms"}


def test_main_poisson_of_brownian_motion(tmp_path):
    out = tmp_path / "poisson.json"
    identity = '{"family": "identity"}'
    interval = '{"d": 1, "sides": [1.0]}'

    result = sublab.main(
        "--log-file-path",
        str(tmp_path / "sublab.log"),
        "op",
        "poisson",
        "--phi",
        identity,
        "--domain",
        interval,
        "--x",
        "0.3",
        "--out",
        str(out),
    )

    assert result == sublab.EXIT_OK
    assert json.loads(out.read_text())["poisson_sigma"] == pytest.approx(1.0, rel=1e-5)


def test_main_maps_lab_errors_to_exit_one(tmp_path, mocker):
    mocker.patch("sublab.poisson_sigma", side_effect=DomainError("P^φ_D σ is infinite on the boundary"))

    result = sublab.main("--log-file-path", str(tmp_path / "sublab.log"), "op", "poisson", "--phi", STABLE, "--x", "0", "0.5", "0.5")

    assert result == sublab.EXIT_STAGE_ERROR


def _solution(j, residual, tolerance=1e-2, scale=1.0):
    return SimpleNamespace(
        j=j,
        residual_interior=residual,
        residual_scale=scale,
        residual_tolerance=tolerance,
        residual_ok=residual <= tolerance * scale,
    )


def test_residual_failures():
    solutions = [_solution(1, 1e-4), _solution(2, 0.3)]

    failures = sublab.residual_failures(solutions)

    assert len(failures) == 1
    assert failures[0].startswith("u_2 interior residual 0.3 exceeds 0.01")


@pytest.mark.parametrize("residual, count", [(1e-4, 0), (0.5, 1)], ids=["small_residual", "large_residual"])
def test_ladder_failures_gate_residuals(residual, count):
    ladder = SimpleNamespace(
        solutions=[_solution(1, residual)],
        J=1,
        monotone=True,
        within_bounds=True,
        gaps_decreasing=True,
        cauchy_gaps=[],
        max_decrease=0.0,
    )

    assert len(sublab.ladder_failures(ladder)) == count


@pytest.mark.parametrize(
    "residual, status",
    [(1e-4, sublab.EXIT_OK), (0.5, sublab.EXIT_GATE_FAILED)],
    ids=["residual_ok", "residual_too_large"],
)
def test_main_solve_moderate_exit_status(residual, status, tmp_path, mocker, caplog):
    # Arrange
    solve = mocker.patch("sublab.solve_moderate", return_value=_solution(1, residual))
    mocker.patch("sublab.write_solution")
    mocker.patch("sublab.write_profiles")
    # Act
    result = sublab.main(
        "--log-file-path",
        str(tmp_path / "sublab.log"),
        "solve",
        "moderate",
        "--phi",
        STABLE,
        "--f",
        POWER,
        "--residual-tolerance",
        "0.05",
        "--out",
        str(tmp_path / "solve"),
    )
    # Assert
    assert result == status
    assert solve.call_args.args[4].residual_tolerance == 0.05
    assert ("interior residual" in caplog.text) is (status == sublab.EXIT_GATE_FAILED)


def test_pipeline_on_unit_square(tmp_path):
    # Arrange
    experiment = ExperimentConfig(
        domain={"d": 2, "sides": [1.0, 1.0]},
        cutoff=8,
        nodes_per_half=12,
        J=2,
        check_points=2,
        gates=["ko", "domination"],
        out=str(tmp_path),
    )
    # Act
    status = sublab.run_pipeline(experiment)
    # Assert
    summary = _summary(tmp_path)
    assert status == sublab.EXIT_OK
    assert summary["stopped_at"] is None
    assert set(summary["gates"]) == {"ko", "ladder", "supersolution", "domination", "blowup"}
    assert summary["gates"]["domination"]["passed"]
    assert not summary["gates"]["ladder"]["enabled"]
    for artifact in (
        "manifest.json",
        "ko_report.json",
        "ladder/u_1.json",
        "ladder/u_2.json",
        "ladder/ladder.json",
        "ladder/large.json",
        "profiles/boundary_profile.csv",
        "profiles/residuals.csv",
        "profiles/blowup.csv",
        "supersolution/supersolution.json",
        "supersolution/domination.json",
    ):
        assert (tmp_path / artifact).exists(), artifact
    ladder = json.loads((tmp_path / "ladder" / "ladder.json").read_text())
    assert ladder["J"] == 2
    assert len(ladder["residual_ok"]) == 2
    assert not (tmp_path / "mc").exists()
