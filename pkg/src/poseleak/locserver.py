"""Simulated visual localization service.

Queries carry a pose surrogate instead of an image: the attacker's class id
and the query's pose in the attacker's local object frame (or, for ordinary
users, the true scene-frame camera pose). The server decides whether the
"image" localizes, and if so returns a noisy scene-frame pose. An optional
filter rejects queries whose inlier support sits on too few scene objects.

Wire format: one JSON object per line, UTF-8, over a stream socket.
"""

from __future__ import annotations

import hashlib
import json
import logging
import socketserver
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import NoiseSpec, Pose, SimTransform, apply_transform, perturb, yaw_rotation
from .scenegen import PlacedInstance, SceneSpec

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1

__all__ = [
    "PROTOCOL_VERSION",
    "ProtocolError",
    "RobustnessProfile",
    "PROFILES",
    "get_profile",
    "DefenseConfig",
    "HistogramModel",
    "ServerConfig",
    "LocalizeRequest",
    "LocalizeResponse",
    "LocalizationService",
    "ServiceSession",
    "localize",
    "synth_inlier_histogram",
    "defense_filter",
    "count_supporting_objects",
    "serve",
    "encode",
    "request_rng",
]


class ProtocolError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


def encode(msg: dict) -> str:
    """Canonical line encoding (sorted keys, no whitespace)."""
    return json.dumps(msg, sort_keys=True, separators=(",", ":"))


def _h64(s: str) -> int:
    return int.from_bytes(hashlib.sha256(s.encode("utf-8")).digest()[:8], "little")


def request_rng(
    seed: int, session_id: str, query_id: str, stream: str = "pose", scene_id: str = ""
) -> np.random.Generator:
    """Per-request generator; independent of request order and other sessions."""
    return np.random.default_rng(
        [seed & (2**64 - 1), _h64(scene_id), _h64(session_id), _h64(query_id), _h64(stream)]
    )


# -- robustness model ---------------------------------------------------------


@dataclass(frozen=True)
class RobustnessProfile:
    """How readily the server localizes look-alike objects, and how badly."""

    profile_id: str
    base_success: float
    similarity_exponent: float
    noise: NoiseSpec
    cross_class_confusion: float

    def __post_init__(self):
        if not 0.0 <= self.base_success <= 1.0 or not 0.0 <= self.cross_class_confusion <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        if not self.similarity_exponent > 0:
            raise ValueError("similarity_exponent must be positive")

    def success_probability(self, similarity: float) -> float:
        return self.base_success * similarity**self.similarity_exponent


def _check_tier_ordering(profiles: dict[str, RobustnessProfile]) -> None:
    tiers = [profiles[k] for k in ("tier_high", "tier_mid", "tier_low") if k in profiles]
    grid = np.linspace(0.0, 1.0, 101)
    for hi, lo in zip(tiers, tiers[1:]):
        for s in grid:
            if hi.success_probability(s) < lo.success_probability(s) - 1e-12:
                raise ValueError(f"{hi.profile_id} must dominate {lo.profile_id} at similarity {s:.2f}")


PROFILES: dict[str, RobustnessProfile] = {
    "tier_high": RobustnessProfile("tier_high", 0.95, 1.0, NoiseSpec(2.0, 0.05, 0.30), 0.70),
    "tier_mid": RobustnessProfile("tier_mid", 0.90, 2.0, NoiseSpec(5.0, 0.15, 0.40), 0.60),
    "tier_low": RobustnessProfile("tier_low", 0.85, 3.0, NoiseSpec(10.0, 0.30, 0.50), 0.50),
}
_check_tier_ordering(PROFILES)


def get_profile(profile_id: str, **overrides) -> RobustnessProfile:
    """Named profile with field overrides; noise overrides go in ``noise=dict(...)``."""
    if profile_id not in PROFILES:
        raise ValueError(f"unknown profile {profile_id!r}")
    prof = PROFILES[profile_id]
    noise = overrides.pop("noise", None)
    if noise is not None:
        if isinstance(noise, dict):
            noise = replace(prof.noise, **noise)
        overrides["noise"] = noise
    prof = replace(prof, **overrides)
    _check_tier_ordering({**PROFILES, profile_id: prof})
    return prof


@dataclass(frozen=True)
class DefenseConfig:
    enabled: bool = False
    fraction_x: float = 0.10
    min_objects: int = 1

    def __post_init__(self):
        if not 0.0 < self.fraction_x <= 1.0:
            raise ValueError("fraction_x must lie in (0, 1]")
        if int(self.min_objects) < 1:
            raise ValueError("min_objects must be a positive integer")


@dataclass(frozen=True)
class HistogramModel:
    """Generative parameters for per-object inlier counts behind a query."""

    base_inliers: int = 200
    # object-focused shots
    dominant_frac: tuple[float, float] = (0.6, 1.0)
    visibility_radius: float = 1.5
    neighbor_visible_prob: float = 0.6
    neighbor_frac: tuple[float, float] = (0.0, 0.3)
    background_frac: tuple[float, float] = (0.0, 0.2)
    # room shots
    fov_half_angle_deg: float = 40.0
    view_range: float = 5.0
    genuine_frac: tuple[float, float] = (0.3, 1.0)
    genuine_background_frac: tuple[float, float] = (0.05, 0.5)
    include_background: bool = True


@dataclass(frozen=True)
class ServerConfig:
    seed: int = 0
    # undisclosed global factor on returned translations; None = metric output
    scale_withheld: float | None = None
    audit: bool = False
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    histogram: HistogramModel = field(default_factory=HistogramModel)


# -- messages -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LocalizeRequest:
    query_id: str
    session_id: str
    class_id: str | None
    pose: Pose
    appearance_seed: int = 0
    kind: str = "object"  # "object" (local-frame pose) | "genuine" (scene-frame pose)
    protocol_version: int = PROTOCOL_VERSION

    def to_wire(self) -> dict:
        surrogate = {"class_id": self.class_id, "appearance_seed": self.appearance_seed, "pose": self.pose.to_record()}
        if self.kind != "object":
            surrogate["kind"] = self.kind
        return {
            "v": self.protocol_version,
            "session_id": self.session_id,
            "query_id": self.query_id,
            "surrogate": surrogate,
        }

    @classmethod
    def from_wire(cls, msg: dict) -> "LocalizeRequest":
        try:
            sur = msg["surrogate"]
            kind = sur.get("kind", "object")
            if kind not in ("object", "genuine"):
                raise ProtocolError("MalformedRequest", f"unknown surrogate kind {kind!r}")
            class_id = sur.get("class_id")
            if kind == "object" and not isinstance(class_id, str):
                raise ProtocolError("MalformedRequest", "object surrogate needs a class_id")
            return cls(
                query_id=str(msg["query_id"]),
                session_id=str(msg["session_id"]),
                class_id=class_id,
                pose=Pose.from_record(sur["pose"]),
                appearance_seed=int(sur.get("appearance_seed", 0)),
                kind=kind,
                protocol_version=int(msg["v"]),
            )
        except ProtocolError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError("MalformedRequest", f"bad localize request: {exc}") from None


@dataclass(frozen=True, eq=False)
class LocalizeResponse:
    query_id: str
    status: str  # localized | not_localized | rejected_by_defense
    pose: Pose | None = None
    diagnostics: dict | None = None

    def __post_init__(self):
        if (self.pose is not None) != (self.status == "localized"):
            raise ValueError("pose must be present iff status is 'localized'")

    def to_wire(self) -> dict:
        msg = {"v": PROTOCOL_VERSION, "query_id": self.query_id, "status": self.status}
        if self.pose is not None:
            msg["pose"] = self.pose.to_record()
        if self.diagnostics is not None:
            msg["diagnostics"] = self.diagnostics
        return msg

    @classmethod
    def from_wire(cls, msg: dict) -> "LocalizeResponse":
        pose = Pose.from_record(msg["pose"]) if msg.get("pose") is not None else None
        return cls(msg["query_id"], msg["status"], pose, msg.get("diagnostics"))


# -- server-side model ----------------------------------------------------------


def _best_match(scene: SceneSpec, class_id: str | None) -> PlacedInstance | None:
    best = None
    for inst in scene.instances:
        if inst.class_id == class_id and (best is None or inst.similarity > best.similarity):
            best = inst
    return best


def synth_inlier_histogram(
    req: LocalizeRequest,
    scene: SceneSpec,
    rng: np.random.Generator,
    matched: PlacedInstance | None = None,
    model: HistogramModel = HistogramModel(),
) -> dict[str, int]:
    """Inlier counts per scene object behind a localized query.

    Object-focused queries put most inliers on the matched instance, with a
    few on neighbors inside the visibility radius and on the floor/walls.
    Room shots spread comparable counts over every instance in the field of
    view. Background pseudo-objects are keyed ``bg/floor`` and ``bg/wall``.
    """
    hist: dict[str, int] = {}
    base = model.base_inliers
    if req.kind == "genuine":
        C = req.pose.center
        forward = req.pose.R[2]
        cos_fov = np.cos(np.radians(model.fov_half_angle_deg))
        for inst in scene.instances:
            v = inst.placement.t - C
            d = float(np.linalg.norm(v))
            u = rng.uniform(*model.genuine_frac)
            if d <= model.view_range and (d == 0.0 or float(v @ forward) / d >= cos_fov):
                hist[inst.instance_id] = max(1, int(round(base * u)))
        if model.include_background:
            for name in ("bg/floor", "bg/wall"):
                hist[name] = max(1, int(round(base * rng.uniform(*model.genuine_background_frac))))
        return hist

    if matched is None:
        matched = _best_match(scene, req.class_id)
    if matched is None:
        return hist
    top = max(1, int(round(base * rng.uniform(*model.dominant_frac))))
    hist[matched.instance_id] = top
    for inst in scene.instances:
        if inst is matched:
            continue
        vis = rng.random()
        frac = rng.uniform(*model.neighbor_frac)
        d = float(np.linalg.norm((inst.placement.t - matched.placement.t)[:2]))
        if d <= model.visibility_radius and vis < model.neighbor_visible_prob:
            c = int(round(top * frac))
            if c > 0:
                hist[inst.instance_id] = c
    if model.include_background:
        for name in ("bg/floor", "bg/wall"):
            c = int(round(top * rng.uniform(*model.background_frac)))
            if c > 0:
                hist[name] = c
    return hist


def count_supporting_objects(hist: dict[str, int], fraction_x: float) -> int:
    """Objects with at least ``fraction_x`` of the top object's inliers."""
    if not hist:
        return 0
    m = max(hist.values())
    return sum(1 for c in hist.values() if c >= fraction_x * m)


def defense_filter(hist: dict[str, int], cfg: DefenseConfig) -> str:
    """``"accept"`` or ``"reject"``; too few supporting objects means malicious."""
    if not hist:
        return "reject"
    k = count_supporting_objects(hist, cfg.fraction_x)
    return "reject" if k < cfg.min_objects else "accept"


def _misregistration(seed: int, class_id: str | None, inst: PlacedInstance) -> SimTransform:
    """Fixed wrong alignment of an attacker object onto a different instance.

    Repeatable per (class, instance), so confusions with the same instance
    agree with each other the way a systematic mismatch would.
    """
    rng = np.random.default_rng([seed & (2**64 - 1), _h64(str(class_id)), _h64(inst.instance_id), _h64("confusion")])
    yaw = rng.uniform(-np.pi, np.pi)
    off = rng.normal(size=2) * 0.3 * max(inst.extent)
    return SimTransform(yaw_rotation(yaw), np.r_[off, 0.0])


@dataclass
class _Outcome:
    response: LocalizeResponse
    histogram: dict[str, int] | None
    instance_id: str | None


def _localize(
    req: LocalizeRequest, scene: SceneSpec, profile: RobustnessProfile, config: ServerConfig
) -> _Outcome:
    rng = request_rng(config.seed, req.session_id, req.query_id, "pose", scene.scene_id)
    u_conf, u_pick, u_succ = rng.random(3)

    not_localized = _Outcome(LocalizeResponse(req.query_id, "not_localized"), None, None)
    if req.kind == "genuine":
        inst = None
        sim = 1.0
        gt = req.pose
    else:
        best = _best_match(scene, req.class_id)
        best_sim = best.similarity if best is not None else 0.0
        others = [i for i in scene.instances if i is not best]
        if others and u_conf < profile.cross_class_confusion * (1.0 - best_sim):
            inst = others[int(u_pick * len(others))]
            sim = inst.similarity
            placement = _misregistration(config.seed, req.class_id, inst).then(inst.placement)
        elif best is not None:
            inst, sim, placement = best, best_sim, best.placement
        else:
            return not_localized
        gt = apply_transform(placement, req.pose)

    if u_succ >= profile.success_probability(sim):
        return not_localized

    lo, hi = scene.bounds_array
    pose = perturb(gt, profile.noise.scaled(2.0 - sim), rng, (lo, hi))

    hist = None
    if config.defense.enabled or config.audit:
        hist = synth_inlier_histogram(
            req, scene, request_rng(config.seed, req.session_id, req.query_id, "inliers", scene.scene_id),
            inst,
            config.histogram,
        )
    diagnostics = {"inliers": dict(sorted(hist.items()))} if (config.audit and hist is not None) else None
    if config.defense.enabled and defense_filter(hist, config.defense) == "reject":
        return _Outcome(
            LocalizeResponse(req.query_id, "rejected_by_defense", None, diagnostics),
            hist,
            inst.instance_id if inst else None,
        )
    if config.scale_withheld is not None:
        pose = Pose(pose.R, pose.t * config.scale_withheld)
    return _Outcome(
        LocalizeResponse(req.query_id, "localized", pose, diagnostics), hist, inst.instance_id if inst else None
    )


def localize(
    req: LocalizeRequest, scene: SceneSpec, profile: RobustnessProfile, config: ServerConfig = ServerConfig()
) -> LocalizeResponse:
    """Answer one query; a pure function of its arguments.

    The best same-class instance is matched unless a confusion roll (more
    likely for poor look-alikes) swaps in some other instance. Success has
    probability ``base_success * similarity**exponent``; the returned pose is
    the ground-truth scene pose corrupted with noise scaled by
    ``2 - similarity``.
    """
    return _localize(req, scene, profile, config).response


# -- service / protocol ---------------------------------------------------------


class LocalizationService:
    """Immutable scene + settings; per-connection state lives in :class:`ServiceSession`."""

    def __init__(self, scene: SceneSpec, profile: RobustnessProfile, config: ServerConfig = ServerConfig()):
        self.scene = scene
        self.profile = profile
        self.config = config

    def hello(self) -> dict:
        return {
            "v": PROTOCOL_VERSION,
            "type": "hello",
            "scene_id": self.scene.scene_id,
            "scale_withheld": self.config.scale_withheld is not None,
            "defense": self.config.defense.enabled,
        }

    def open_session(self) -> "ServiceSession":
        return ServiceSession(self)


class ServiceSession:
    """One client connection: tracks query ids so none is answered twice."""

    def __init__(self, service: LocalizationService):
        self.service = service
        self._seen: set[tuple[str, str]] = set()

    def handle(self, msg) -> dict:
        query_id = msg.get("query_id") if isinstance(msg, dict) else None
        try:
            if not isinstance(msg, dict):
                raise ProtocolError("MalformedRequest", "request must be a JSON object")
            if msg.get("v") != PROTOCOL_VERSION:
                raise ProtocolError("UnsupportedVersion", f"expected v={PROTOCOL_VERSION}")
            kind = msg.get("type", "localize")
            if kind == "health":
                return {"v": PROTOCOL_VERSION, "type": "health", "status": "ok"}
            if kind == "hello":
                return self.service.hello()
            if kind != "localize":
                raise ProtocolError("MalformedRequest", f"unknown request type {kind!r}")
            scene_id = msg.get("scene_id")
            if scene_id is not None and scene_id != self.service.scene.scene_id:
                raise ProtocolError("UnknownScene", f"scene {scene_id!r} is not served here")
            req = LocalizeRequest.from_wire(msg)
            key = (req.session_id, req.query_id)
            if key in self._seen:
                raise ProtocolError("DuplicateQuery", f"query {req.query_id!r} already answered")
            self._seen.add(key)
            return localize(req, self.service.scene, self.service.profile, self.service.config).to_wire()
        except ProtocolError as exc:
            out = {"v": PROTOCOL_VERSION, "status": "error", "error": {"code": exc.code, "message": exc.message}}
            if isinstance(query_id, str):
                out["query_id"] = query_id
            return out

    def handle_line(self, line: str) -> str:
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            err = {
                "v": PROTOCOL_VERSION,
                "status": "error",
                "error": {"code": "MalformedRequest", "message": f"invalid JSON: {exc.msg}"},
            }
            return encode(err)
        return encode(self.handle(msg))


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        session = self.server.service.open_session()
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            self.wfile.write((session.handle_line(line) + "\n").encode("utf-8"))
            self.wfile.flush()


class _ThreadingServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = False


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    return host or "127.0.0.1", int(port)


def serve(
    endpoint: str,
    scene: SceneSpec,
    profile: RobustnessProfile,
    defense_cfg: DefenseConfig | None = None,
    config: ServerConfig | None = None,
    background: bool = False,
) -> socketserver.ThreadingTCPServer:
    """Bind a line-protocol server. Blocks unless ``background`` is set.

    With port 0 an ephemeral port is chosen; read it from ``server.server_address``.
    Raises ``OSError`` if the address is taken.
    """
    config = config or ServerConfig()
    if defense_cfg is not None:
        config = replace(config, defense=defense_cfg)
    srv = _ThreadingServer(parse_endpoint(endpoint), _Handler)
    srv.service = LocalizationService(scene, profile, config)
    log.info("serving %s on %s:%d", scene.scene_id, *srv.server_address[:2])
    if background:
        threading.Thread(target=srv.serve_forever, daemon=True).start()
    else:
        srv.serve_forever()
    return srv
