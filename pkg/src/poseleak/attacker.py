"""Attack orchestration: query, align, classify, reconstruct."""

from __future__ import annotations

import json
import socket
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .alignment import (
    AlignmentParams,
    AlignmentResult,
    PoseSet,
    best_single_camera_alignment,
    ransac_sim3_alignment,
)
from .classifier import PRESETS, PresenceStats, TrainingRun, classify, preset_name, train_stats
from .geometry import Pose, SimTransform, rotation_angle_deg
from .locserver import (
    PROTOCOL_VERSION,
    LocalizationService,
    LocalizeRequest,
    LocalizeResponse,
    encode,
    parse_endpoint,
    _h64,
)
from .scenegen import ObjectModel, SceneSpec

__all__ = [
    "ServerUnreachable",
    "LeakageError",
    "InProcessTransport",
    "SocketTransport",
    "connect",
    "AttackPlan",
    "ObjectReconstruction",
    "SceneReconstruction",
    "run_attack",
    "align_object",
    "replay",
    "read_log",
    "placement_error",
    "ground_truth_placements",
    "TrainingScenario",
    "train_from_scenarios",
]


class ServerUnreachable(ConnectionError):
    pass


class LeakageError(AssertionError):
    """The evaluated scene leaked into a training fold."""


class Transport(Protocol):
    def request_line(self, line: str) -> str: ...


class InProcessTransport:
    """Talks to a service object through the same line encoding as the socket."""

    def __init__(self, service: LocalizationService):
        self._session = service.open_session()

    def request_line(self, line: str) -> str:
        return self._session.handle_line(line)

    def close(self):
        pass


class SocketTransport:
    def __init__(self, endpoint: str, timeout: float = 10.0):
        host, port = parse_endpoint(endpoint)
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ServerUnreachable(f"cannot reach {endpoint}: {exc}") from exc
        self._rfile = self._sock.makefile("rb")

    def request_line(self, line: str) -> str:
        try:
            self._sock.sendall((line + "\n").encode("utf-8"))
            reply = self._rfile.readline()
        except OSError as exc:
            raise ServerUnreachable(str(exc)) from exc
        if not reply:
            raise ServerUnreachable("server closed the connection")
        return reply.decode("utf-8").rstrip("\n")

    def close(self):
        self._rfile.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connect(endpoint: str) -> SocketTransport:
    return SocketTransport(endpoint)


@dataclass
class AttackPlan:
    models: list[ObjectModel]
    preset: str = "30deg_0.5m"
    params: dict[str, AlignmentParams] = field(default_factory=dict)
    mode: str = "auto"  # auto | rigid | sim3
    stats: dict[str, PresenceStats] | None = None
    endpoint: str | None = None
    session_prefix: str = "attack"
    max_iters: int = 500
    seed: int = 0

    def __post_init__(self):
        self.preset = preset_name(self.preset)
        if self.mode not in ("auto", "rigid", "sim3"):
            raise ValueError(f"bad mode {self.mode!r}")
        for m in self.models:
            if len(m.local_poses) == 0:
                raise ValueError(f"object model {m.class_id} has no poses")

    def params_for(self, object_id: str) -> AlignmentParams:
        return self.params.get(object_id) or AlignmentParams(*PRESETS[self.preset])


@dataclass
class ObjectReconstruction:
    object_id: str
    verdict: str  # present | absent | unclassified
    epsilon: float | None
    placement: SimTransform | None
    localization_rate: float
    n_queries: int
    n_localized: int
    rule_used: str | None = None
    estimate: SimTransform | None = None
    placement_error: tuple[float, float, float] | None = None
    failure: str | None = None
    alignment: AlignmentResult | None = None

    def to_record(self) -> dict:
        return {
            "object_id": self.object_id,
            "verdict": self.verdict,
            "epsilon": self.epsilon,
            "placement": self.placement.to_record() if self.placement else None,
            "estimate": self.estimate.to_record() if self.estimate else None,
            "localization_rate": self.localization_rate,
            "n_queries": self.n_queries,
            "n_localized": self.n_localized,
            "rule_used": self.rule_used,
            "placement_error": (
                dict(zip(("rot_deg", "trans_m", "scale_ratio"), self.placement_error))
                if self.placement_error
                else None
            ),
            "failure": self.failure,
            "alignment": self.alignment.to_record() if self.alignment else None,
        }


@dataclass
class SceneReconstruction:
    objects: dict[str, ObjectReconstruction]
    mode: str
    preset: str
    scene_id: str | None = None
    n_requests: int = 0
    log: list[dict] = field(default_factory=list)
    log_path: str | None = None

    def to_record(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "mode": self.mode,
            "preset": self.preset,
            "n_requests": self.n_requests,
            "log_path": self.log_path,
            "objects": {k: v.to_record() for k, v in sorted(self.objects.items())},
        }


def placement_error(est: SimTransform, gt: SimTransform) -> tuple[float, float, float]:
    """(rotation deg, object-origin displacement, scale ratio) of an estimate."""
    return (
        rotation_angle_deg(est.R @ gt.R.T),
        float(np.linalg.norm(est.t - gt.t)),
        est.scale / gt.scale,
    )


def ground_truth_placements(scene: SceneSpec, scale_withheld: float | None = None) -> dict[str, SimTransform]:
    """Best-matching instance placement per class, in the frame the server reports."""
    best: dict[str, tuple[float, SimTransform]] = {}
    for inst in scene.instances:
        if inst.class_id not in best or inst.similarity > best[inst.class_id][0]:
            best[inst.class_id] = (inst.similarity, inst.placement)
    out = {cid: T for cid, (_, T) in best.items()}
    if scale_withheld is not None:
        k = scale_withheld
        out = {cid: SimTransform(T.R, T.t * k, T.scale * k) for cid, T in out.items()}
    return out


def align_object(model: ObjectModel, server_set: PoseSet, params: AlignmentParams, mode: str, max_iters=500, seed=0):
    """Run the alignment for one object; None when too few poses came back."""
    need = 2 if mode == "sim3" else 1
    if len(server_set) < need:
        return None
    if mode == "sim3":
        rng = np.random.default_rng([seed, _h64(model.class_id)])
        return ransac_sim3_alignment(model.local_poses, server_set, params, max_iters, rng)
    return best_single_camera_alignment(model.local_poses, server_set, params)


def _assemble(
    model: ObjectModel,
    server_set: PoseSet,
    plan: AttackPlan,
    mode: str,
    gt: SimTransform | None,
) -> ObjectReconstruction:
    oid = model.class_id
    n_q = len(model.local_poses)
    res = align_object(model, server_set, plan.params_for(oid), mode, plan.max_iters, plan.seed)
    out = ObjectReconstruction(oid, "unclassified", None, None, len(server_set) / n_q, n_q, len(server_set))
    if res is None:
        # nothing to align counts as zero consistency
        out.failure = "InsufficientResponses"
        if plan.stats is not None and oid in plan.stats:
            decision = classify(0.0, plan.stats[oid])
            out.verdict, out.rule_used = decision.verdict, decision.rule_used
        return out
    out.epsilon = res.epsilon
    out.estimate = res.transform
    out.alignment = res
    if plan.stats is not None and oid in plan.stats:
        decision = classify(res.epsilon, plan.stats[oid])
        out.verdict, out.rule_used = decision.verdict, decision.rule_used
    if out.verdict == "present":
        out.placement = res.transform
    if gt is not None:
        out.placement_error = placement_error(res.transform, gt)
    return out


def _handshake(transport) -> dict:
    reply = json.loads(transport.request_line(encode({"v": PROTOCOL_VERSION, "type": "hello"})))
    if reply.get("type") != "hello":
        raise ServerUnreachable(f"unexpected handshake reply: {reply}")
    return reply


def run_attack(
    plan: AttackPlan,
    transport: Transport | None = None,
    ground_truth: dict[str, SimTransform] | None = None,
    log_path: str | Path | None = None,
) -> SceneReconstruction:
    """Query every local pose of every object once, then align and classify.

    Every response line is logged verbatim before it is parsed.
    """
    own = transport is None
    if own:
        if plan.endpoint is None:
            raise ServerUnreachable("no endpoint and no transport given")
        transport = connect(plan.endpoint)
    try:
        hello = _handshake(transport)
        mode = plan.mode
        if mode == "auto":
            mode = "sim3" if hello.get("scale_withheld") else "rigid"

        log: list[dict] = []
        server_sets: dict[str, PoseSet] = {}
        n_requests = 0
        for model in sorted(plan.models, key=lambda m: m.class_id):
            session = f"{plan.session_prefix}/{model.class_id}"
            entries = []
            for image_id, pose in model.local_poses.entries:
                req = LocalizeRequest(image_id, session, model.class_id, pose, model.object_class.appearance_seed)
                raw = transport.request_line(encode(req.to_wire()))
                n_requests += 1
                log.append({"object_id": model.class_id, "query_id": image_id, "response": raw})
                msg = json.loads(raw)
                if msg.get("status") == "localized":
                    entries.append((image_id, LocalizeResponse.from_wire(msg).pose))
            server_sets[model.class_id] = PoseSet(entries, "scene")
    finally:
        if own:
            transport.close()

    if log_path is not None:
        Path(log_path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
    gt = ground_truth or {}
    objects = {
        m.class_id: _assemble(m, server_sets[m.class_id], plan, mode, gt.get(m.class_id) if ground_truth else None)
        for m in plan.models
    }
    return SceneReconstruction(
        objects,
        mode,
        plan.preset,
        hello.get("scene_id"),
        n_requests,
        log,
        str(log_path) if log_path is not None else None,
    )


def read_log(path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]


def replay(
    log: Iterable[dict],
    models: Iterable[ObjectModel],
    params: AlignmentParams | dict[str, AlignmentParams],
    mode: str = "rigid",
    max_iters: int = 500,
    seed: int = 0,
) -> dict[str, AlignmentResult | None]:
    """Recompute alignments offline from a logged response stream."""
    models = {m.class_id: m for m in models}
    entries: dict[str, list[tuple[str, Pose]]] = {oid: [] for oid in models}
    for rec in log:
        msg = json.loads(rec["response"])
        if msg.get("status") == "localized" and rec["object_id"] in entries:
            entries[rec["object_id"]].append((rec["query_id"], LocalizeResponse.from_wire(msg).pose))
    out = {}
    for oid, model in sorted(models.items()):
        p = params[oid] if isinstance(params, dict) else params
        out[oid] = align_object(model, PoseSet(entries[oid], "scene"), p, mode, max_iters, seed)
    return out


@dataclass
class TrainingScenario:
    scene_id: str
    transport: Transport
    labels: dict[str, bool]  # object_id -> present


def train_from_scenarios(
    scenarios: list[TrainingScenario],
    plan: AttackPlan,
    preset=None,
    exclude_scene: str | None = None,
) -> dict[str, PresenceStats]:
    """Attack each training scenario and learn per-object inlier-ratio medians.

    ``exclude_scene`` is the scene under evaluation; it must not be among the
    training scenarios.
    """
    if len(scenarios) < 2:
        raise ValueError("training needs at least two scenarios")
    if exclude_scene is not None and any(s.scene_id == exclude_scene for s in scenarios):
        raise LeakageError(f"evaluation scene {exclude_scene!r} is in the training fold")
    preset = preset_name(preset or plan.preset)
    train_plan = AttackPlan(plan.models, preset, plan.params, plan.mode, None, None, plan.session_prefix, plan.max_iters, plan.seed)
    runs = []
    for sc in scenarios:
        recon = run_attack(train_plan, sc.transport)
        for oid, obj in recon.objects.items():
            eps = obj.epsilon if obj.epsilon is not None else 0.0
            runs.append(TrainingRun(oid, sc.scene_id, eps, "present" if sc.labels.get(oid) else "absent"))
    return train_stats(runs, preset)
