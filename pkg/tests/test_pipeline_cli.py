import json
from pathlib import Path

import pandas as pd
import pytest
import yaml

from trajconsensus import cli, pipeline
from trajconsensus.errors import ConfigurationError
from trajconsensus.pipeline import RunConfig, run_pipeline


def _run(*argv):
    return cli.main([str(a) for a in argv])


def test_head_on_end_to_end(tmp_path, capsys):
    out = tmp_path / "o"
    code = _run("run", "--out", out, "--policy", "ingest.scenario=head_on", "--policy", "flow.enabled=false")
    assert code == 0
    text = capsys.readouterr().out
    assert "encounters: 1" in text
    assert "min TTC: 5.000 s" in text
    for stage in pipeline.STAGES:
        man = json.loads((out / stage / "manifest.json").read_text())
        assert man["complete"]
        for name, digest in man["outputs"].items():
            assert pipeline.sha256_file(out / stage / name) == digest
    run = json.loads((out / "run_manifest.json").read_text())
    assert run["run_config"]["ingest"]["scenario"] == "head_on"
    assert run["assumptions"] and set(run["stages"]) == set(pipeline.STAGES)
    assert not (out / "error.json").exists()
    assert not list(out.glob(".*.partial"))


def test_missing_geometry_fails_before_compute(tmp_path, capsys):
    src = tmp_path / "t.csv"
    pd.DataFrame({"id": ["a"] * 5, "time": [0, 0.1, 0.2, 0.3, 0.4], "x": range(5), "y": 0.0, "vx": 10.0,
                  "vy": 0.0, "ax": 0.0, "ay": 0.0, "class": "HDV", "lane": "L1"}).to_csv(src, index=False)
    out = tmp_path / "o"
    assert _run("run", "--input", src, "--out", out) == 1
    assert "geometry" in capsys.readouterr().err
    assert not (out / "ingest").exists()
    err = json.loads((out / "error.json").read_text())
    assert err["exit_code"] == 1 and err["error"] == "ConfigurationError"
    assert _run("run", "--input", src, "--out", out, "--policy", "flow.enabled=false") == 0
    assert not (out / "error.json").exists()


def test_validation_errors_exit_1(tmp_path):
    out = tmp_path / "o"
    assert _run("run", "--out", out) == 1
    assert _run("run", "--out", out, "--input", tmp_path / "missing.csv") == 1
    assert _run("run", "--out", out, "--policy", "nonsense=3") == 1
    assert _run("run", "--out", out, "--policy", "pet_missing") == 1
    assert _run("run", "--out", out, "--policy", "ingest.scenario=head_on", "--policy", "safety.pet_threshold=-1") == 1
    assert _run("run", "--out", out, "--policy", "ingest.scenario=head_on", "--policy", "pet_missing=maybe") == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("colour: red\n")
    assert _run("run", "--out", out, "--config", bad) == 1


def _staged(tmp_path, *stages, extra=()):
    out = tmp_path / "o"
    base = ["--out", out, "--policy", "ingest.scenario=crossing_pet", "--policy", "flow.enabled=false", *extra]
    for s in stages:
        assert _run(s, *base) == 0, s
    return out, base


def test_missing_dependency_exit_3(tmp_path):
    out, base = _staged(tmp_path, "ingest", "interactions")
    assert _run("consensus", *base) == 3
    err = json.loads((out / "error.json").read_text())
    assert err["error"] == "MissingDependencyError" and err["stage"] == "consensus"
    assert _run("safety", *base) == 0


def test_stale_upstream_refused(tmp_path):
    out, base = _staged(tmp_path, "ingest", "interactions")
    csv = out / "interactions" / "interactions.csv"
    csv.write_text(csv.read_text() + "\n")
    assert _run("safety", *base) == 3
    assert "StaleArtifactError" in (out / "error.json").read_text()
    # rebuilding ingest invalidates interactions built on the old ingest
    assert _run("interactions", *base) == 0
    assert _run("ingest", *base, "--policy", "ingest.dt=0.2") == 0
    assert _run("safety", *base) == 3


def test_upstream_setting_drift_is_noted(tmp_path):
    out, base = _staged(tmp_path, "ingest", "interactions")
    assert _run("safety", *base, "--policy", "interactions.radius=25", "--policy", "pet_threshold=4") == 0
    notes = json.loads((out / "safety" / "manifest.json").read_text())["notes"]
    assert any("radius" in n for n in notes)
    assert json.loads((out / "safety" / "manifest.json").read_text())["config"]["pet_threshold"] == 4.0


def test_runtime_error_exit_2_and_partial_removed(tmp_path, monkeypatch):
    out, base = _staged(tmp_path, "ingest")

    def boom(ctx):
        ctx.path("half_written.csv").write_text("x\n")
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(pipeline.STAGE_FUNCS, "interactions", boom)
    assert _run("interactions", *base) == 2
    assert not (out / "interactions").exists()
    assert not (out / ".interactions.partial").exists()
    err = json.loads((out / "error.json").read_text())
    assert err["exit_code"] == 2 and "traceback" in err


def test_run_with_stage_subset(tmp_path):
    out, base = _staged(tmp_path, "ingest")
    assert _run("run", *base, "--stage", "interactions", "--stage", "safety") == 0
    assert (out / "safety" / "encounters.csv").is_file()
    assert not (out / "vru").exists()


def test_run_manifest_reexecutes_identically(tmp_path):
    a = tmp_path / "a"
    assert _run("run", "--out", a, "--policy", "ingest.scenario=suite", "--policy", "random_pairs=3",
                "--seed", "11", "--threads", "1") == 0
    b = tmp_path / "b"
    assert _run("run", "--config", a / "run_manifest.json", "--out", b) == 0
    for stage in pipeline.STAGES:
        ma = json.loads((a / stage / "manifest.json").read_text())
        mb = json.loads((b / stage / "manifest.json").read_text())
        assert ma["outputs"] == mb["outputs"], stage


def test_config_round_trip_and_overrides(tmp_path):
    cfg = RunConfig()
    cfg.override("pet_missing", "strict")
    cfg.override("flow.enabled", "false")
    cfg.override("vru.turn_directions", "[turning-left, turning-right]")
    cfg.override("seed", "5")
    assert cfg.consensus.pet_missing == "strict" and cfg.flow.enabled is False
    assert cfg.vru.turn_directions == ["turning-left", "turning-right"]
    again = RunConfig.from_dict(yaml.safe_load(yaml.safe_dump(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    with pytest.raises(ConfigurationError):
        cfg.override("flow.enabled", "maybe")
    with pytest.raises(ConfigurationError):
        cfg.override("violation_frames", "2.5")
    with pytest.raises(ConfigurationError):
        cfg.override("bogus.key", "1")
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"safety": 3})


def test_run_pipeline_api(tmp_path):
    cfg = RunConfig.from_dict({"ingest": {"scenario": "platoon_queue"}, "out": str(tmp_path / "o"), "threads": 1})
    out = run_pipeline(cfg)
    flow = json.loads((out / "flow" / "flow_summary.json").read_text())
    assert flow["enabled"]
    gains = pd.read_csv(out / "flow" / "gains.csv")
    assert gains["gain"].tolist() == [0.0]
    hw = pd.read_csv(out / "flow" / "headways.csv")
    assert hw[hw.boundary == "exit"]["headway"].round(9).tolist() == [3.16]


def test_synth_subcommand(tmp_path, capsys):
    assert _run("synth", "--list") == 0
    assert "head_on" in capsys.readouterr().out
    out = tmp_path / "o"
    assert _run("synth", "--out", out, "--scenario", "crosswalk_cooccupancy", "--random-pairs", "2") == 0
    syn = out / "synth"
    assert (syn / "tracks.csv").is_file() and (syn / "geometry.yaml").is_file()
    assert yaml.safe_load((syn / "scenarios.yaml").read_text())["random_pairs"] == 2
    assert _run("synth", "--out", out) == 1
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"ingest": {"input": [str(syn / "tracks.csv")],
                                              "geometry": str(syn / "geometry.yaml")},
                                   "flow": {"enabled": False}}))
    assert _run("run", "--config", cfg, "--out", tmp_path / "r") == 0
    co = pd.read_csv(tmp_path / "r" / "safety" / "co_occupancy.csv")
    assert len(co) == 1


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    text = capsys.readouterr().out
    for name in (*pipeline.STAGES, "synth", "run"):
        assert name in text
