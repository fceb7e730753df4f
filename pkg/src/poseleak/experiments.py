"""Evaluation harnesses shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .alignment import AlignmentParams
from .attacker import AttackPlan, InProcessTransport, ground_truth_placements, replay, run_attack
from .classifier import (
    PRESETS,
    PRResult,
    TrainingRun,
    leave_one_scene_out,
    precision_recall_by_scene,
    random_guess_precision,
)
from .locserver import (
    LocalizationService,
    LocalizeRequest,
    RobustnessProfile,
    ServerConfig,
    _best_match,
    count_supporting_objects,
    request_rng,
    synth_inlier_histogram,
)
from .scenegen import Suite

__all__ = [
    "SuiteRuns",
    "attack_suite",
    "PresenceTable",
    "evaluate_presence",
    "format_presence_table",
    "SweepRow",
    "defense_sweep",
    "format_sweep",
    "sweep_records",
    "sweep_is_monotone",
    "ideal_threshold_exists",
    "presence_table_record",
]


@dataclass
class SuiteRuns:
    """Inlier ratios for every (scene, object) pair under every preset."""

    runs: dict[str, list[TrainingRun]]
    reconstructions: dict[str, object]
    n_requests: int


def attack_suite(
    suite: Suite,
    profile: RobustnessProfile,
    config: ServerConfig = ServerConfig(),
    presets=tuple(PRESETS),
    mode: str = "auto",
) -> SuiteRuns:
    """Attack every scene once with every catalog object.

    The first preset is evaluated live; the others by replaying the logged
    responses, so all presets see the same server answers.
    """
    models = [suite.models[c.class_id] for c in suite.catalog]
    runs: dict[str, list[TrainingRun]] = {p: [] for p in presets}
    recons = {}
    n_requests = 0
    for scene in suite.scenes:
        service = LocalizationService(scene, profile, config)
        plan = AttackPlan(models, presets[0], mode=mode, seed=config.seed)
        gt = ground_truth_placements(scene, config.scale_withheld)
        recon = run_attack(plan, InProcessTransport(service), ground_truth=gt)
        recons[scene.scene_id] = recon
        n_requests += recon.n_requests
        present = scene.classes()
        for p in presets:
            if p == presets[0]:
                eps = {oid: o.epsilon for oid, o in recon.objects.items()}
            else:
                res = replay(recon.log, models, AlignmentParams(*PRESETS[p]), recon.mode, seed=config.seed)
                eps = {oid: (r.epsilon if r is not None else None) for oid, r in res.items()}
            for oid in sorted(eps):
                e = eps[oid] if eps[oid] is not None else 0.0
                runs[p].append(TrainingRun(oid, scene.scene_id, e, "present" if oid in present else "absent"))
    return SuiteRuns(runs, recons, n_requests)


@dataclass
class PresenceTable:
    per_scene: dict[str, dict[str, PRResult]]  # preset -> scene -> result
    pooled: dict[str, PRResult]
    random_guess: dict[str, float]  # scene -> expected precision of guessing


def evaluate_presence(suite_runs: SuiteRuns, presets=None) -> PresenceTable:
    """Leave-one-scene-out precision/recall per scene and pooled, per preset."""
    presets = presets or list(suite_runs.runs)
    per_scene, pooled = {}, {}
    for p in presets:
        rows = leave_one_scene_out(suite_runs.runs[p], p)
        per_scene[p], pooled[p] = precision_recall_by_scene(rows)
    first = suite_runs.runs[presets[0]]
    scenes = sorted({r.scene_id for r in first})
    guess = {s: random_guess_precision(r.label == "present" for r in first if r.scene_id == s) for s in scenes}
    return PresenceTable(per_scene, pooled, guess)


def format_presence_table(table: PresenceTable, sep: str = "\t") -> str:
    """Scenes as rows; a P and R column per preset."""
    presets = list(table.pooled)
    head = ["scene"] + [f"{p}:{m}" for p in presets for m in ("P", "R")] + ["random_guess_P"]
    lines = [sep.join(head)]
    scenes = sorted(table.random_guess)
    for s in scenes:
        row = [s]
        for p in presets:
            r = table.per_scene[p].get(s)
            row += [f"{r.precision:.2f}", f"{r.recall:.2f}"] if r else ["-", "-"]
        row.append(f"{table.random_guess[s]:.2f}")
        lines.append(sep.join(row))
    row = ["pooled"]
    for p in presets:
        row += [f"{table.pooled[p].precision:.2f}", f"{table.pooled[p].recall:.2f}"]
    row.append(f"{np.mean(list(table.random_guess.values())):.2f}")
    lines.append(sep.join(row))
    return "\n".join(lines) + "\n"


@dataclass
class SweepRow:
    min_objects: int
    genuine_accept: float
    malicious_accept: float


def _supports(suite: Suite, profile: RobustnessProfile, config: ServerConfig, fraction_x: float, scenes=None):
    """Supporting-object counts of localizable genuine and malicious queries."""
    genuine, malicious = [], []
    model = config.histogram
    for scene in suite.scenes:
        if scenes is not None and scene.scene_id not in scenes:
            continue
        for image_id, pose in suite.genuine[scene.scene_id].entries:
            req = LocalizeRequest(image_id, f"genuine/{scene.scene_id}", None, pose, kind="genuine")
            hist = synth_inlier_histogram(
                req, scene, request_rng(config.seed, req.session_id, req.query_id, "inliers", scene.scene_id), None, model
            )
            genuine.append(count_supporting_objects(hist, fraction_x))
        for cid in sorted(scene.classes()):
            inst = _best_match(scene, cid)
            for image_id, pose in suite.models[cid].local_poses.entries:
                req = LocalizeRequest(image_id, f"attack/{cid}", cid, pose)
                hist = synth_inlier_histogram(
                    req, scene, request_rng(config.seed, req.session_id, req.query_id, "inliers", scene.scene_id), inst, model
                )
                malicious.append(count_supporting_objects(hist, fraction_x))
    return np.array(genuine), np.array(malicious)


def defense_sweep(
    suite: Suite,
    profile: RobustnessProfile,
    fraction_x: float = 0.10,
    min_objects_range=None,
    config: ServerConfig = ServerConfig(),
    scenes=None,
) -> list[SweepRow]:
    """Acceptance rate of genuine and malicious queries per ``min_objects``.

    Malicious queries are the attacker's shots of objects present in the scene
    (only those can localize and therefore need filtering).
    """
    g, m = _supports(suite, profile, config, fraction_x, scenes)
    if min_objects_range is None:
        top = int(max(g.max(initial=0), m.max(initial=0)))
        min_objects_range = range(1, top + 2)
    return [
        SweepRow(int(k), float((g >= k).mean()) if g.size else 0.0, float((m >= k).mean()) if m.size else 0.0)
        for k in min_objects_range
    ]


def format_sweep(rows: list[SweepRow], sep: str = "\t") -> str:
    lines = [sep.join(["min_objects", "genuine_accept", "malicious_accept", "malicious_reject"])]
    lines += [
        sep.join([str(r.min_objects), f"{r.genuine_accept:.4f}", f"{r.malicious_accept:.4f}", f"{1 - r.malicious_accept:.4f}"])
        for r in rows
    ]
    return "\n".join(lines) + "\n"


def sweep_records(rows: list[SweepRow]) -> list[dict]:
    return [{**asdict(r), "malicious_reject": 1.0 - r.malicious_accept} for r in rows]


def sweep_is_monotone(rows: list[SweepRow]) -> bool:
    g = [r.genuine_accept for r in rows]
    m = [r.malicious_accept for r in rows]
    return all(a >= b for a, b in zip(g, g[1:])) and all(a >= b for a, b in zip(m, m[1:]))


def ideal_threshold_exists(rows: list[SweepRow], genuine_min=0.95, malicious_max=0.05) -> bool:
    return any(r.genuine_accept >= genuine_min and r.malicious_accept <= malicious_max for r in rows)


def presence_table_record(table: PresenceTable) -> dict:
    return {
        "per_scene": {p: {s: asdict(r) for s, r in rows.items()} for p, rows in table.per_scene.items()},
        "pooled": {p: asdict(r) for p, r in table.pooled.items()},
        "random_guess": table.random_guess,
    }


def with_similarity(suite_config, similarity: float):
    return replace(suite_config, similarity=(similarity, similarity))
