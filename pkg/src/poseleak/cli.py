"""Command-line front door.

Every command writes ``manifest.json`` into ``--out`` listing its resolved
configuration, seeds, input digests and every artifact it produced.

Exit codes: 0 success, 2 configuration error, 3 runtime failure,
4 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import errno
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from .alignment import AlignmentParams
from .attacker import (
    AttackPlan,
    InProcessTransport,
    ServerUnreachable,
    TrainingScenario,
    connect,
    ground_truth_placements,
    read_log,
    replay,
    run_attack,
    train_from_scenarios,
)
from .classifier import (
    PRESETS,
    classify,
    precision_recall,
    preset_name,
    stats_from_records,
    stats_to_records,
)
from .config import ENDPOINT_ENV, ConfigError, RunConfig, RunManifest, load_config, resolve_endpoint, resolve_seed
from .experiments import (
    attack_suite,
    defense_sweep,
    evaluate_presence,
    format_sweep,
    format_presence_table,
    ideal_threshold_exists,
    sweep_is_monotone,
    sweep_records,
    presence_table_record,
)
from .locserver import PROTOCOL_VERSION, LocalizationService, encode, serve
from .scenegen import PlacementOverflow, Suite, generate_suite, read_bundle, write_bundle

log = logging.getLogger("poseleak")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 2, 3, 4


class AcceptanceFailure(RuntimeError):
    pass


class _ArgParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": {"code": kind, "message": message}}, sort_keys=True) + "\n")
    return code


class _Run:
    """Shared plumbing: resolved config, output dir and manifest."""

    def __init__(self, args, argv):
        cfg = load_config(args.config)
        self.seed = resolve_seed(args.seed, cfg.seed)
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        self.cfg: RunConfig = cfg.with_seed(self.seed)
        self.out = Path(args.out or Path("runs") / args.command)
        self.out.mkdir(parents=True, exist_ok=True)
        options = {k: v for k, v in vars(args).items() if k not in ("func", "out", "config", "seed", "command")}
        self.manifest = RunManifest(
            command=args.command,
            argv=list(argv),
            config={"run": self.cfg.to_dict(), "options": options},
            seeds={"seed": self.seed},
        )
        if args.config:
            self.manifest.add_input(args.config)

    def write_text(self, name: str, text: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.manifest.add_artifact(p)
        return p

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=1, sort_keys=True) + "\n")

    def write_manifest(self) -> None:
        # flags may have edited the config after load; record what actually ran
        self.manifest.config["run"] = self.cfg.to_dict()
        self.manifest.write(self.out)

    def close(self, status="ok") -> None:
        self.manifest.finish(status)
        self.write_manifest()


def _load_suite(run: _Run, bundle: str | None) -> Suite:
    if bundle is None:
        return generate_suite(run.cfg.suite)
    if not (Path(bundle) / "suite.json").is_file():
        raise ConfigError(f"not a scenario bundle: {bundle}")
    run.manifest.add_input(bundle)
    return read_bundle(bundle)


def _parse_range(spec: str | None) -> list[int] | None:
    """``"1:8"`` (inclusive) or ``"1,2,5"``."""
    if spec is None:
        return None
    try:
        if ":" in spec:
            lo, hi = spec.split(":")
            vals = list(range(int(lo), int(hi) + 1))
        else:
            vals = [int(v) for v in spec.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad range {spec!r}") from exc
    if not vals or min(vals) < 1:
        raise ConfigError("min_objects values must be positive integers")
    return vals


# -- commands -----------------------------------------------------------------


def cmd_gen(args, run: _Run) -> int:
    suite = generate_suite(run.cfg.suite)
    for p in write_bundle(run.out / "bundle", suite):
        run.manifest.add_artifact(p)
    print(json.dumps({"bundle": str(run.out / "bundle"), "scenes": [s.scene_id for s in suite.scenes]}))
    return EXIT_OK


def cmd_serve(args, run: _Run) -> int:
    suite = _load_suite(run, args.bundle)
    scene = suite.scene(args.scene) if args.scene else suite.scenes[0]
    server = run.cfg.server
    if args.profile:
        server.profile = args.profile
    if args.scale_withheld is not None:
        server.scale_withheld = args.scale_withheld
    if args.audit:
        server.audit = True
    for key, val in (("enabled", args.defense), ("fraction_x", args.fraction_x), ("min_objects", args.min_objects)):
        if val is not None:
            server.defense[key] = val
    try:
        server.__post_init__()
        profile = server.robustness()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    config = server.server_config(run.seed)
    endpoint = resolve_endpoint(args.endpoint, server.endpoint)
    run.manifest.config["options"]["endpoint"] = endpoint
    srv = serve(endpoint, scene, profile, config=config, background=True)
    host, port = srv.server_address[:2]
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print(json.dumps({"event": "ready", "endpoint": f"{host}:{port}", "scene_id": scene.scene_id}), flush=True)
    run.manifest.status = "serving"
    run.write_manifest()
    try:
        while not stop.wait(0.2):
            pass
    finally:
        srv.shutdown()
        srv.server_close()
    return EXIT_OK


def _plan(run: _Run, suite: Suite, preset: str, stats=None) -> AttackPlan:
    a = run.cfg.attack
    return AttackPlan(
        [suite.models[c.class_id] for c in suite.catalog],
        preset,
        mode=a.mode,
        stats=stats,
        max_iters=a.max_iters,
        seed=run.seed,
    )


def _load_stats(path: str | None, preset: str):
    if path is None:
        return None
    try:
        recs = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read stats file {path}: {exc}") from exc
    keyed = stats_from_records(recs)
    return {oid: s for (oid, p), s in keyed.items() if p == preset}


def cmd_attack(args, run: _Run) -> int:
    suite = _load_suite(run, args.bundle)
    preset = preset_name(args.preset or run.cfg.attack.preset)
    endpoint = None if args.in_process else (args.endpoint or os.environ.get(ENDPOINT_ENV) or run.cfg.server.endpoint)
    if endpoint is None:
        return _attack_suite(args, run, suite, preset)

    if args.stats:
        run.manifest.add_input(args.stats)
    stats = _load_stats(args.stats, preset)
    plan = _plan(run, suite, preset, stats)
    plan.endpoint = endpoint
    with connect(endpoint) as transport:
        hello = json.loads(transport.request_line(encode({"v": PROTOCOL_VERSION, "type": "hello"})))
        scene_id = hello.get("scene_id")
        scene = next((s for s in suite.scenes if s.scene_id == scene_id), None)
        gt = ground_truth_placements(scene, run.cfg.server.scale_withheld) if scene else None
        log_path = run.out / "responses.jsonl"
        recon = run_attack(plan, transport, gt, log_path)
    run.manifest.add_artifact(log_path)
    run.write_json("reconstruction.json", recon.to_record())
    if scene is not None and stats:
        present = scene.classes()
        pairs = [(o.verdict, oid in present) for oid, o in sorted(recon.objects.items()) if o.verdict != "unclassified"]
        if pairs:
            pr = precision_recall(pairs)
            head = ["scene", f"{preset}:P", f"{preset}:R"]
            row = [scene.scene_id, f"{pr.precision:.2f}", f"{pr.recall:.2f}"]
            run.write_text("presence.tsv", "\t".join(head) + "\n" + "\t".join(row) + "\n")
            run.write_json("presence.json", {"scene_id": scene.scene_id, "preset": preset, "result": pr.__dict__})
    print(json.dumps({"scene_id": scene_id, "mode": recon.mode, "n_requests": recon.n_requests}))
    return EXIT_OK


def _attack_suite(args, run: _Run, suite: Suite, preset: str) -> int:
    """Attack every scene in-process and report leave-one-scene-out P/R."""
    server = run.cfg.server
    presets = [preset] + [p for p in PRESETS if p != preset]
    runs = attack_suite(suite, server.robustness(), server.server_config(run.seed), presets, run.cfg.attack.mode)
    for sid, recon in sorted(runs.reconstructions.items()):
        run.write_text(f"responses/{sid}.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in recon.log))
        run.write_json(f"reconstructions/{sid}.json", recon.to_record())
    run.write_json("runs.json", {p: [r._asdict() for r in rs] for p, rs in runs.runs.items()})
    table = evaluate_presence(runs, list(PRESETS))
    run.write_text("presence.tsv", format_presence_table(table))
    run.write_json("presence.json", presence_table_record(table))
    sys.stdout.write(format_presence_table(table))
    if args.min_pr is not None:
        pooled = table.pooled[preset]
        if pooled.precision < args.min_pr or pooled.recall < args.min_pr:
            raise AcceptanceFailure(
                f"pooled P/R {pooled.precision:.3f}/{pooled.recall:.3f} below {args.min_pr} at {preset}"
            )
    return EXIT_OK


def cmd_train(args, run: _Run) -> int:
    suite = _load_suite(run, args.bundle)
    presets = [preset_name(p) for p in args.presets.split(",")] if args.presets else list(PRESETS)
    server = run.cfg.server
    profile, config = server.robustness(), server.server_config(run.seed)
    scenes = [s for s in suite.scenes if s.scene_id != args.exclude_scene]
    records = []
    for preset in presets:
        scenarios = [
            TrainingScenario(
                s.scene_id,
                InProcessTransport(LocalizationService(s, profile, config)),
                {c.class_id: c.class_id in s.classes() for c in suite.catalog},
            )
            for s in scenes
        ]
        try:
            stats = train_from_scenarios(scenarios, _plan(run, suite, preset), preset, args.exclude_scene)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        records += stats_to_records(stats)
    run.write_json("stats.json", records)
    lines = ["object_id\tpreset\teps_present\teps_absent\tn_train_present\tn_train_absent"]
    for r in records:
        ep = "-" if r["eps_present"] is None else f"{r['eps_present']:.4f}"
        lines.append(
            f"{r['object_id']}\t{r['threshold_preset']}\t{ep}\t{r['eps_absent']:.4f}\t{r['n_train_present']}\t{r['n_train_absent']}"
        )
    run.write_text("stats.tsv", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_classify(args, run: _Run) -> int:
    run.manifest.add_input(args.reconstruction)
    run.manifest.add_input(args.stats)
    try:
        recon = json.loads(Path(args.reconstruction).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read reconstruction {args.reconstruction}: {exc}") from exc
    preset = preset_name(args.preset or recon["preset"])
    stats = _load_stats(args.stats, preset)
    truth = None
    if args.bundle:
        suite = _load_suite(run, args.bundle)
        scene = next((s for s in suite.scenes if s.scene_id == recon.get("scene_id")), None)
        truth = scene.classes() if scene else None
    decisions, pairs = [], []
    for oid, obj in sorted(recon["objects"].items()):
        if oid not in stats:
            continue
        d = classify(obj["epsilon"] if obj["epsilon"] is not None else 0.0, stats[oid])
        rec = d.__dict__ | {"preset": preset}
        if truth is not None:
            rec["truth"] = "present" if oid in truth else "absent"
            pairs.append((d, oid in truth))
        decisions.append(rec)
    run.write_json("decisions.json", decisions)
    cols = ["object_id", "epsilon_observed", "verdict", "rule_used"] + (["truth"] if truth is not None else [])
    run.write_text("decisions.tsv", "\n".join(["\t".join(cols)] + ["\t".join(str(d[c]) for c in cols) for d in decisions]) + "\n")
    if pairs:
        pr = precision_recall(pairs)
        run.write_json("precision_recall.json", pr.__dict__)
    return EXIT_OK


def cmd_defense_sweep(args, run: _Run) -> int:
    suite = _load_suite(run, args.bundle)
    server = run.cfg.server
    if args.profile:
        server.profile = args.profile
    fraction = args.fraction_x if args.fraction_x is not None else run.cfg.sweep.fraction_x
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction_x must lie in (0, 1]")
    rng = _parse_range(args.min_objects) or run.cfg.sweep.min_objects
    rows = defense_sweep(suite, server.robustness(), fraction, rng, server.server_config(run.seed))
    run.write_text("sweep.tsv", format_sweep(rows))
    run.write_json("sweep.json", {"fraction_x": fraction, "rows": sweep_records(rows)})
    sys.stdout.write(format_sweep(rows))
    if args.check:
        if not sweep_is_monotone(rows):
            raise AcceptanceFailure("acceptance curves are not non-increasing in min_objects")
        if ideal_threshold_exists(rows):
            raise AcceptanceFailure("a threshold separates genuine from malicious queries cleanly")
    return EXIT_OK


def cmd_replay(args, run: _Run) -> int:
    suite = _load_suite(run, args.bundle)
    run.manifest.add_input(args.log)
    recon = None
    if args.reconstruction:
        run.manifest.add_input(args.reconstruction)
        recon = json.loads(Path(args.reconstruction).read_text())
    preset = preset_name(args.preset or (recon["preset"] if recon else run.cfg.attack.preset))
    mode = args.mode or (recon["mode"] if recon else "rigid")
    if mode not in ("rigid", "sim3"):
        raise ConfigError(f"replay mode must be rigid or sim3, got {mode!r}")
    try:
        entries = read_log(args.log)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot read response log {args.log}: {exc}") from exc
    models = [suite.models[c.class_id] for c in suite.catalog]
    res = replay(entries, models, AlignmentParams(*PRESETS[preset]), mode, run.cfg.attack.max_iters, run.seed)
    out = {oid: (r.to_record() if r is not None else None) for oid, r in res.items()}
    run.write_json("replay.json", {"preset": preset, "mode": mode, "objects": out})
    if args.check:
        if recon is None:
            raise ConfigError("--check needs --reconstruction")
        bad = [
            oid
            for oid, obj in recon["objects"].items()
            if (res.get(oid).epsilon if res.get(oid) is not None else None) != obj["epsilon"]
        ]
        if bad:
            raise AcceptanceFailure(f"replayed epsilon differs for {bad}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _global_flags(parser, default):
    parser.add_argument("--config", default=default, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=default, help="master seed (else $POSEATTACK_SEED, else config)")
    parser.add_argument("--out", default=default, help="output directory (default runs/<command>)")
    parser.add_argument("-v", "--verbose", action="store_true", default=default)


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = _ArgParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)

    p = _ArgParser(prog="poseleak", description=__doc__.split("\n")[0])
    _global_flags(p, None)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_ArgParser)

    s = sub.add_parser("gen", parents=[common], help="generate a scenario bundle")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("serve", parents=[common], help="run the localization server for one scene")
    s.add_argument("--bundle", help="scenario bundle (default: generate from config)")
    s.add_argument("--scene", help="scene id (default: first)")
    s.add_argument("--endpoint", help="host:port (else $POSEATTACK_ENDPOINT)")
    s.add_argument("--profile", choices=["tier_high", "tier_mid", "tier_low"])
    s.add_argument("--scale-withheld", type=float)
    s.add_argument("--audit", action="store_true")
    s.add_argument("--defense", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--fraction-x", type=float)
    s.add_argument("--min-objects", type=int)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("attack", parents=[common], help="attack a server, or every bundle scene in-process")
    s.add_argument("--bundle")
    s.add_argument("--endpoint", help="attack a running server (else $POSEATTACK_ENDPOINT)")
    s.add_argument("--in-process", action="store_true", help="ignore endpoints; attack all scenes in-process")
    s.add_argument("--preset", choices=list(PRESETS))
    s.add_argument("--stats", help="trained stats file for presence verdicts")
    s.add_argument("--min-pr", type=float, help="fail (exit 4) if pooled P or R falls below this")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("train", parents=[common], help="learn per-object inlier-ratio medians")
    s.add_argument("--bundle")
    s.add_argument("--exclude-scene", help="scene held out for evaluation")
    s.add_argument("--presets", help="comma-separated presets (default all)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("classify", parents=[common], help="presence verdicts for a reconstruction")
    s.add_argument("--reconstruction", required=True)
    s.add_argument("--stats", required=True)
    s.add_argument("--preset", choices=list(PRESETS))
    s.add_argument("--bundle", help="bundle with ground truth for P/R")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("defense-sweep", parents=[common], help="acceptance rates versus min_objects")
    s.add_argument("--bundle")
    s.add_argument("--profile", choices=["tier_high", "tier_mid", "tier_low"])
    s.add_argument("--fraction-x", type=float)
    s.add_argument("--min-objects", help='range "1:8" or list "1,2,4"')
    s.add_argument("--check", action="store_true", help="exit 4 unless curves are monotone and no clean threshold exists")
    s.set_defaults(func=cmd_defense_sweep)

    s = sub.add_parser("replay", parents=[common], help="recompute alignments from a response log")
    s.add_argument("--log", required=True)
    s.add_argument("--bundle")
    s.add_argument("--reconstruction", help="reconstruction to compare against")
    s.add_argument("--preset", choices=list(PRESETS))
    s.add_argument("--mode", choices=["rigid", "sim3"])
    s.add_argument("--check", action="store_true", help="exit 4 if replayed epsilon differs")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    run = args = None
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
        run = _Run(args, argv)
        code = args.func(args, run)
        run.close("ok")
        return code
    except ConfigError as exc:
        code = _fail(EXIT_CONFIG, "ConfigError", str(exc))
        status = "config_error"
    except AcceptanceFailure as exc:
        code = _fail(EXIT_ACCEPTANCE, "AcceptanceFailure", str(exc))
        status = "acceptance_failure"
    except PlacementOverflow as exc:
        code = _fail(EXIT_RUNTIME, "PlacementOverflow", str(exc))
        status = "runtime_error"
    except ServerUnreachable as exc:
        code = _fail(EXIT_RUNTIME, "ServerUnreachable", str(exc))
        status = "runtime_error"
    except OSError as exc:
        kind = "AddressInUse" if exc.errno == errno.EADDRINUSE else type(exc).__name__
        code = _fail(EXIT_RUNTIME, kind, str(exc))
        status = "runtime_error"
    except KeyError as exc:
        code = _fail(EXIT_CONFIG, "ConfigError", f"unknown id {exc}")
        status = "config_error"
    if run is not None:
        run.close(status)
    elif args is not None:
        # failed before the run was set up; still leave a manifest behind
        m = RunManifest(args.command, argv, {"config_path": args.config}, {}, status=status)
        m.finish(status)
        m.write(args.out or Path("runs") / args.command)
    return code


if __name__ == "__main__":
    sys.exit(main())
