"""Object presence decisions from alignment inlier ratios.

Per object, the median inlier ratio over training scenes where it is present
(``eps_present``) and absent (``eps_absent``) is learned. A new ratio is
called present when it is strictly closer to ``eps_present``; without a
present reference, when it strictly exceeds ``eps_absent``.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, NamedTuple

__all__ = [
    "PRESETS",
    "preset_name",
    "MissingAbsentData",
    "TrainingRun",
    "PresenceStats",
    "PresenceDecision",
    "PRResult",
    "lower_median",
    "train_stats",
    "classify",
    "precision_recall",
    "precision_recall_by_scene",
    "random_guess_precision",
    "leave_one_scene_out",
    "stats_to_records",
    "stats_from_records",
]

# (rotation deg, translation m) inlier regimes
PRESETS: dict[str, tuple[float, float]] = {
    "10deg_0.25m": (10.0, 0.25),
    "30deg_0.5m": (30.0, 0.5),
    "60deg_2m": (60.0, 2.0),
}


def preset_name(preset: tuple[float, float] | str) -> str:
    if isinstance(preset, str):
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        return preset
    for name, value in PRESETS.items():
        if tuple(float(v) for v in preset) == value:
            return name
    raise ValueError(f"{preset!r} is not one of the threshold presets")


class MissingAbsentData(ValueError):
    """An object has no absent-labeled training run."""


class TrainingRun(NamedTuple):
    object_id: str
    scene_id: str
    epsilon: float
    label: str  # "present" | "absent"


@dataclass(frozen=True)
class PresenceStats:
    object_id: str
    eps_present: float | None
    eps_absent: float
    threshold_preset: str
    n_train_present: int
    n_train_absent: int


@dataclass(frozen=True)
class PresenceDecision:
    object_id: str
    epsilon_observed: float
    verdict: str  # "present" | "absent"
    rule_used: str  # "two-sided" | "fallback"


@dataclass(frozen=True)
class PRResult:
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision_undefined: bool = False
    recall_undefined: bool = False


def lower_median(values: Iterable[float]) -> float:
    v = sorted(values)
    if not v:
        raise ValueError("median of empty sequence")
    return v[(len(v) - 1) // 2]


def train_stats(runs: Iterable[TrainingRun], preset) -> dict[str, PresenceStats]:
    name = preset_name(preset)
    pos: dict[str, list[float]] = defaultdict(list)
    neg: dict[str, list[float]] = defaultdict(list)
    objects = []
    for run in runs:
        run = TrainingRun(*run)
        if not 0.0 <= run.epsilon <= 1.0:
            raise ValueError(f"epsilon out of range: {run.epsilon}")
        if run.label == "present":
            pos[run.object_id].append(run.epsilon)
        elif run.label == "absent":
            neg[run.object_id].append(run.epsilon)
        else:
            raise ValueError(f"bad label {run.label!r}")
        if run.object_id not in objects:
            objects.append(run.object_id)

    stats = {}
    for obj in sorted(objects):
        if not neg[obj]:
            raise MissingAbsentData(f"object {obj!r} has no absent-labeled runs")
        stats[obj] = PresenceStats(
            object_id=obj,
            eps_present=lower_median(pos[obj]) if pos[obj] else None,
            eps_absent=lower_median(neg[obj]),
            threshold_preset=name,
            n_train_present=len(pos[obj]),
            n_train_absent=len(neg[obj]),
        )
    return stats


def classify(epsilon: float, stats: PresenceStats) -> PresenceDecision:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon out of range: {epsilon}")
    if stats.eps_present is None:
        present = epsilon > stats.eps_absent
        rule = "fallback"
    else:
        present = abs(epsilon - stats.eps_present) < abs(epsilon - stats.eps_absent)
        rule = "two-sided"
    return PresenceDecision(stats.object_id, epsilon, "present" if present else "absent", rule)


def precision_recall(pairs: Iterable[tuple[PresenceDecision | str, bool | str]]) -> PRResult:
    """Precision and recall of presence verdicts; 0 with a flag when undefined."""
    tp = fp = fn = tn = 0
    n = 0
    for decision, truth in pairs:
        n += 1
        pred = (decision.verdict if isinstance(decision, PresenceDecision) else decision) == "present"
        actual = truth == "present" if isinstance(truth, str) else bool(truth)
        if pred and actual:
            tp += 1
        elif pred:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    if n == 0:
        raise ValueError("precision_recall needs at least one decision")
    p_undef = tp + fp == 0
    r_undef = tp + fn == 0
    return PRResult(
        precision=0.0 if p_undef else tp / (tp + fp),
        recall=0.0 if r_undef else tp / (tp + fn),
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
        precision_undefined=p_undef,
        recall_undefined=r_undef,
    )


def precision_recall_by_scene(rows) -> tuple[dict[str, PRResult], PRResult]:
    """``rows`` are ``(scene_id, decision, truth)``; returns per-scene and pooled results."""
    rows = list(rows)
    by_scene: dict[str, list] = defaultdict(list)
    for scene_id, decision, truth in rows:
        by_scene[scene_id].append((decision, truth))
    per_scene = {s: precision_recall(v) for s, v in sorted(by_scene.items())}
    pooled = precision_recall((d, t) for _, d, t in rows)
    return per_scene, pooled


def random_guess_precision(truths: Iterable[bool]) -> float:
    """Expected precision of guessing at random: the prevalence of present objects."""
    truths = [bool(t) for t in truths]
    return sum(truths) / len(truths) if truths else 0.0


def leave_one_scene_out(runs: Iterable[TrainingRun], preset) -> list[tuple[str, PresenceDecision, bool]]:
    """Evaluate each scene with stats trained on every other scene.

    Objects lacking absent-labeled runs in a fold are skipped for that scene.
    """
    runs = [TrainingRun(*r) for r in runs]
    scenes = sorted({r.scene_id for r in runs})
    rows = []
    for held_out in scenes:
        train = [r for r in runs if r.scene_id != held_out]
        assert all(r.scene_id != held_out for r in train)
        objects = {r.object_id for r in train if r.label == "absent"}
        stats = train_stats((r for r in train if r.object_id in objects), preset)
        for r in runs:
            if r.scene_id == held_out and r.object_id in stats:
                decision = classify(r.epsilon, stats[r.object_id])
                rows.append((held_out, decision, r.label == "present"))
    return rows


def stats_to_records(stats: dict[str, PresenceStats]) -> list[dict]:
    return [asdict(s) for _, s in sorted(stats.items())]


def stats_from_records(records: Iterable[dict]) -> dict[tuple[str, str], PresenceStats]:
    """Keyed by ``(object_id, preset)``."""
    out = {}
    for rec in records:
        s = PresenceStats(**rec)
        out[(s.object_id, s.threshold_preset)] = s
    return out
