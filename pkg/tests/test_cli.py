import json
import os
import signal
import subprocess
import sys
from pathlib import Path

import pytest

from poseleak.cli import EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

SMALL = {
    "suite": {"n_scenes": 3, "n_classes": 6, "objects_per_scene": [2, 3], "genuine_queries_per_scene": 20},
    "server": {"profile": "tier_high"},
}


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def manifest(out) -> dict:
    return json.loads((Path(out) / "manifest.json").read_text())


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundle")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["gen", "--config", str(cfg), "--seed", "42", "--out", str(root / "gen")]) == EXIT_OK
    return root / "gen" / "bundle"


# -- gen ---------------------------------------------------------------------------------


def test_gen_is_reproducible_and_manifested(tmp_path, cfg):
    for name in ("a", "b"):
        assert main(["gen", "--config", cfg, "--seed", "42", "--out", str(tmp_path / name)]) == EXIT_OK
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a" / "bundle").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b" / "bundle").rglob("*") if p.is_file())
    assert files_a == files_b and files_a
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    ma, mb = manifest(tmp_path / "a"), manifest(tmp_path / "b")
    assert ma["status"] == "ok" and ma["seeds"] == {"seed": 42}
    assert ma["config_hash"] == mb["config_hash"]
    assert {Path(p).name for p in ma["artifacts"]} >= {"suite.json"}
    assert len(ma["artifacts"]) == len(files_a)
    assert cfg in ma["inputs"]


def test_global_flags_after_subcommand(tmp_path, cfg):
    assert main(["--seed", "5", "gen", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    assert manifest(tmp_path)["seeds"]["seed"] == 5


def test_zero_instance_bundle(tmp_path):
    p = tmp_path / "empty.json"
    p.write_text(json.dumps({"suite": {"n_scenes": 2, "objects_per_scene": [0, 0]}}))
    assert main(["gen", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_OK
    scene = json.loads((tmp_path / "o" / "bundle" / "scenes" / "scene1" / "scene.json").read_text())
    assert scene["instances"] == []


def test_env_seed_and_flag_precedence(tmp_path, cfg, monkeypatch):
    monkeypatch.setenv("POSEATTACK_SEED", "17")
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "env")]) == EXIT_OK
    assert manifest(tmp_path / "env")["seeds"]["seed"] == 17
    assert main(["gen", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "flag")]) == EXIT_OK
    assert manifest(tmp_path / "flag")["seeds"]["seed"] == 3


# -- exit codes ----------------------------------------------------------------------------


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"suite": {"n_rooms": 3}}))
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"]["code"] == "ConfigError"
    assert manifest(tmp_path / "o")["status"] == "config_error"
    assert main(["gen", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "m")]) == EXIT_CONFIG
    assert main(["frobnicate"]) == EXIT_CONFIG
    ok = tmp_path / "ok.json"
    ok.write_text(json.dumps(SMALL))
    # the two remaining scenes share an object, so it never has an absent run
    train = ["train", "--config", str(ok), "--seed", "42", "--exclude-scene", "scene1", "--out", str(tmp_path / "t")]
    assert main(train) == EXIT_CONFIG
    assert main(["defense-sweep", "--min-objects", "0:3", "--out", str(tmp_path / "d")]) == EXIT_CONFIG


def test_bad_env_seed_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("POSEATTACK_SEED", "many")
    assert main(["gen", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_placement_overflow_exits_3(tmp_path):
    p = tmp_path / "tight.json"
    p.write_text(json.dumps({"suite": {"n_scenes": 1, "objects_per_scene": [8, 8], "bounds": [[0, 0, 0], [1.5, 1.5, 3]]}}))
    assert main(["gen", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert manifest(tmp_path / "o")["status"] == "runtime_error"


def test_unreachable_endpoint_exits_3(tmp_path, bundle, capsys):
    code = main(["attack", "--bundle", str(bundle), "--endpoint", "127.0.0.1:1", "--out", str(tmp_path)])
    assert code == EXIT_RUNTIME
    assert "ServerUnreachable" in capsys.readouterr().err


def test_acceptance_failure_exits_4(tmp_path, bundle, monkeypatch):
    monkeypatch.delenv("POSEATTACK_ENDPOINT", raising=False)
    code = main(["attack", "--bundle", str(bundle), "--in-process", "--min-pr", "1.01", "--out", str(tmp_path)])
    assert code == EXIT_ACCEPTANCE
    assert manifest(tmp_path)["status"] == "acceptance_failure"


# -- in-process pipeline ---------------------------------------------------------------------


def test_in_process_attack_train_classify(tmp_path, bundle, monkeypatch):
    monkeypatch.delenv("POSEATTACK_ENDPOINT", raising=False)
    out = tmp_path / "attack"
    assert main(["attack", "--bundle", str(bundle), "--seed", "1", "--out", str(out)]) == EXIT_OK
    header = (out / "presence.tsv").read_text().splitlines()[0].split("\t")
    assert header[0] == "scene"
    assert {"30deg_0.5m:P", "10deg_0.25m:R", "60deg_2m:P"} <= set(header)
    m = manifest(out)
    for name in ("presence.tsv", "presence.json", "runs.json", "reconstructions/scene1.json", "responses/scene1.jsonl"):
        assert str(out / name) in m["artifacts"]

    assert main(["train", "--bundle", str(bundle), "--exclude-scene", "scene3", "--out", str(tmp_path / "t")]) == EXIT_OK
    stats = tmp_path / "t" / "stats.json"
    assert {r["threshold_preset"] for r in json.loads(stats.read_text())} == {"10deg_0.25m", "30deg_0.5m", "60deg_2m"}

    # the held-out scene is the one evaluated
    recon = out / "reconstructions" / "scene3.json"
    args = ["classify", "--reconstruction", str(recon), "--stats", str(stats), "--bundle", str(bundle)]
    assert main(args + ["--out", str(tmp_path / "c")]) == EXIT_OK
    decisions = json.loads((tmp_path / "c" / "decisions.json").read_text())
    assert decisions and all(d["verdict"] in ("present", "absent") for d in decisions)
    assert (tmp_path / "c" / "precision_recall.json").is_file()

    log = out / "responses" / "scene3.jsonl"
    args = ["replay", "--log", str(log), "--bundle", str(bundle), "--reconstruction", str(recon), "--check"]
    assert main(args + ["--seed", "1", "--out", str(tmp_path / "r")]) == EXIT_OK


def test_defense_sweep_endpoints(tmp_path, bundle):
    out = tmp_path / "sweep"
    assert main(["defense-sweep", "--bundle", str(bundle), "--min-objects", "1,50", "--out", str(out)]) == EXIT_OK
    rows = json.loads((out / "sweep.json").read_text())["rows"]
    first, last = rows
    assert (first["genuine_accept"], first["malicious_accept"]) == (1.0, 1.0)
    assert (last["genuine_accept"], last["malicious_accept"]) == (0.0, 0.0)
    assert (out / "sweep.tsv").read_text().startswith("min_objects\t")


# -- serve -------------------------------------------------------------------------------------


def _spawn_server(tmp_path, bundle, *extra):
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    cmd = [sys.executable, "-m", "poseleak", "serve", "--bundle", str(bundle), "--endpoint", "127.0.0.1:0"]
    proc = subprocess.Popen(
        cmd + ["--out", str(tmp_path / "serve"), *extra], stdout=subprocess.PIPE, stderr=subprocess.PIPE, env=env, text=True
    )
    ready = json.loads(proc.stdout.readline())
    assert ready["event"] == "ready"
    return proc, ready["endpoint"]


def test_serve_health_attack_and_signal(tmp_path, bundle, monkeypatch):
    from poseleak.attacker import SocketTransport

    proc, endpoint = _spawn_server(tmp_path, bundle, "--seed", "4", "--defense", "--min-objects", "1")
    try:
        with SocketTransport(endpoint) as t:
            assert json.loads(t.request_line('{"v":1,"type":"health"}'))["status"] == "ok"
            assert json.loads(t.request_line("nonsense"))["error"]["code"] == "MalformedRequest"
        monkeypatch.setenv("POSEATTACK_ENDPOINT", endpoint)
        out = tmp_path / "remote"
        assert main(["attack", "--bundle", str(bundle), "--seed", "4", "--out", str(out)]) == EXIT_OK
        recon = json.loads((out / "reconstruction.json").read_text())
        assert recon["scene_id"] == "scene1" and recon["n_requests"] > 0
        assert Path(recon["log_path"]).is_file()

        # same seed, second client: byte-identical response stream
        out2 = tmp_path / "remote2"
        assert main(["attack", "--bundle", str(bundle), "--seed", "4", "--out", str(out2)]) == EXIT_OK
        assert (out / "responses.jsonl").read_bytes() == (out2 / "responses.jsonl").read_bytes()

        # a second server on the same port fails with a structured error
        port_taken = subprocess.run(
            [sys.executable, "-m", "poseleak", "serve", "--bundle", str(bundle), "--endpoint", endpoint, "--out", str(tmp_path / "dup")],
            capture_output=True,
            text=True,
            timeout=60,
        )
        assert port_taken.returncode == EXIT_RUNTIME
        assert json.loads(port_taken.stderr.strip().splitlines()[-1])["error"]["code"] == "AddressInUse"
    finally:
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=30) == EXIT_OK
    m = manifest(tmp_path / "serve")
    assert m["status"] == "ok"
    assert m["config"]["run"]["server"]["defense"] == {"enabled": True, "min_objects": 1}
