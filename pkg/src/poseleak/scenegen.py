"""Synthetic scenes, object instances and attacker query trajectories.

A scene is a box-shaped room with upright object instances on the floor.
Each object's local frame is centered on the object, so an instance's
placement transform is exactly the object's pose in the scene.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .alignment import PoseSet, read_pose_set, write_pose_set
from .geometry import Pose, SimTransform, apply_transform, look_at, yaw_rotation

__all__ = [
    "PlacementOverflow",
    "ObjectClass",
    "PlacedInstance",
    "SceneSpec",
    "ObjectModel",
    "SceneConfig",
    "SuiteConfig",
    "Suite",
    "default_catalog",
    "generate_scene",
    "generate_query_trajectory",
    "make_object_model",
    "generate_genuine_queries",
    "generate_suite",
    "ground_truth_pose",
    "write_bundle",
    "read_bundle",
]

MAX_REJECTIONS = 10_000


class PlacementOverflow(RuntimeError):
    """Instances could not be placed without overlap inside the bounds."""


@dataclass(frozen=True)
class ObjectClass:
    class_id: str
    extent: tuple[float, float, float]
    appearance_seed: int = 0

    def __post_init__(self):
        if len(self.extent) != 3 or min(self.extent) <= 0:
            raise ValueError(f"extent must be three positive lengths, got {self.extent}")

    @property
    def size(self) -> float:
        return float(max(self.extent))

    @property
    def footprint_radius(self) -> float:
        return 0.5 * float(np.hypot(self.extent[0], self.extent[1]))


@dataclass(frozen=True, eq=False)
class PlacedInstance:
    instance_id: str
    class_id: str
    placement: SimTransform
    similarity: float
    extent: tuple[float, float, float]

    def __post_init__(self):
        if not 0.0 <= self.similarity <= 1.0:
            raise ValueError("similarity must lie in [0, 1]")

    def footprint(self) -> np.ndarray:
        """Corners of the yawed xy footprint, counter-clockwise."""
        hx, hy = 0.5 * self.extent[0], 0.5 * self.extent[1]
        local = np.array([[-hx, -hy, 0.0], [hx, -hy, 0.0], [hx, hy, 0.0], [-hx, hy, 0.0]])
        return self.placement.apply(local)[:, :2]

    def to_record(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "class_id": self.class_id,
            "placement": self.placement.to_record(),
            "similarity": self.similarity,
            "extent": list(self.extent),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PlacedInstance":
        return cls(
            rec["instance_id"],
            rec["class_id"],
            SimTransform.from_record(rec["placement"]),
            float(rec["similarity"]),
            tuple(rec["extent"]),
        )


@dataclass(frozen=True, eq=False)
class SceneSpec:
    scene_id: str
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]]
    instances: tuple[PlacedInstance, ...]
    rng_seed: int

    @property
    def bounds_array(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.bounds[0], dtype=float), np.asarray(self.bounds[1], dtype=float)

    def classes(self) -> set[str]:
        return {inst.class_id for inst in self.instances}

    def instance(self, instance_id: str) -> PlacedInstance:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)

    def to_record(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
            "instances": [i.to_record() for i in self.instances],
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SceneSpec":
        lo, hi = rec["bounds"]
        return cls(
            rec["scene_id"],
            (tuple(lo), tuple(hi)),
            tuple(PlacedInstance.from_record(r) for r in rec["instances"]),
            int(rec["rng_seed"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=1, sort_keys=True)


@dataclass(eq=False)
class ObjectModel:
    """Attacker-side object: local query poses around an origin-centered object."""

    object_class: ObjectClass
    local_poses: PoseSet
    metric_scale_known: bool = True
    scale_corruption: float = 1.0

    @property
    def class_id(self) -> str:
        return self.object_class.class_id

    def __post_init__(self):
        if len(self.local_poses) < 8:
            raise ValueError("an object model needs at least 8 poses")


@dataclass
class SceneConfig:
    scene_id: str = "scene"
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.0, 0.0, 0.0),
        (6.0, 6.0, 3.0),
    )
    class_ids: list[str] = field(default_factory=list)
    similarity: tuple[float, float] = (0.8, 0.8)
    seed: int = 0
    margin: float = 0.05


@dataclass
class SuiteConfig:
    n_scenes: int = 7
    n_classes: int = 10
    objects_per_scene: tuple[int, int] = (4, 6)
    similarity: tuple[float, float] = (0.8, 0.8)
    poses_per_model: int = 30
    genuine_queries_per_scene: int = 60
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.0, 0.0, 0.0),
        (6.0, 6.0, 3.0),
    )
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        d = dict(d)
        for key in ("objects_per_scene", "similarity"):
            if key in d:
                d[key] = tuple(d[key])
        if "bounds" in d:
            d["bounds"] = tuple(tuple(b) for b in d["bounds"])
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def default_catalog(n_classes: int, seed: int = 0) -> list[ObjectClass]:
    """Furniture-sized object classes with seeded extents."""
    rng = np.random.default_rng([seed, 0xCA7])
    out = []
    for k in range(n_classes):
        ext = rng.uniform([0.4, 0.4, 0.4], [1.2, 1.0, 1.2])
        out.append(ObjectClass(f"obj{k:02d}", tuple(float(round(e, 3)) for e in ext), int(rng.integers(2**31))))
    return out


def _footprints_disjoint(c1, r1, c2, r2) -> bool:
    return float(np.hypot(*(np.asarray(c1) - np.asarray(c2)))) > r1 + r2


def generate_scene(config: SceneConfig, catalog: dict[str, ObjectClass] | list[ObjectClass]) -> SceneSpec:
    """Place one upright instance per requested class by rejection sampling.

    Footprints are kept apart by their bounding circles, so the yawed boxes
    never intersect.
    """
    if not isinstance(catalog, dict):
        catalog = {c.class_id: c for c in catalog}
    rng = np.random.default_rng([config.seed, 0x5CE])
    lo = np.asarray(config.bounds[0], dtype=float)
    hi = np.asarray(config.bounds[1], dtype=float)

    placed: list[PlacedInstance] = []
    circles: list[tuple[np.ndarray, float]] = []
    rejections = 0
    for k, cid in enumerate(config.class_ids):
        cls = catalog[cid]
        r = cls.footprint_radius + config.margin
        if cls.extent[2] > hi[2] - lo[2] or 2 * r > min(hi[:2] - lo[:2]):
            raise PlacementOverflow(f"{cid} does not fit in the scene bounds")
        while True:
            xy = rng.uniform(lo[:2] + r, hi[:2] - r)
            yaw = rng.uniform(-np.pi, np.pi)
            sim = rng.uniform(*config.similarity)
            if all(_footprints_disjoint(xy, r, c, rc) for c, rc in circles):
                break
            rejections += 1
            if rejections >= MAX_REJECTIONS:
                raise PlacementOverflow(
                    f"gave up after {MAX_REJECTIONS} rejections placing {cid} in {config.scene_id}"
                )
        center = np.array([xy[0], xy[1], lo[2] + 0.5 * cls.extent[2]])
        placed.append(
            PlacedInstance(
                f"{config.scene_id}/{cid}#{k}",
                cid,
                SimTransform(yaw_rotation(yaw), center),
                float(sim),
                tuple(cls.extent),
            )
        )
        circles.append((xy, r))
    return SceneSpec(config.scene_id, (tuple(lo.tolist()), tuple(hi.tolist())), tuple(placed), config.seed)


def generate_query_trajectory(model: ObjectClass | ObjectModel, n: int, rng: np.random.Generator) -> PoseSet:
    """Noisy orbit around the object origin, ids in temporal order.

    Ring radius is 1.5-2.5x the object size, heights are jittered, and every
    camera looks at a point within 0.15x the object size of the origin.
    """
    if n < 2:
        raise ValueError("a trajectory needs at least two poses")
    cls = model.object_class if isinstance(model, ObjectModel) else model
    size = cls.size
    phase = rng.uniform(0, 2 * np.pi)
    sweep = rng.uniform(1.0, 2.0) * np.pi
    entries = []
    for k in range(n):
        ang = phase + sweep * k / (n - 1) + rng.normal(0, 0.05)
        radius = size * rng.uniform(1.5, 2.5)
        height = size * rng.uniform(-0.1, 0.9)
        C = np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        jitter = rng.normal(size=3)
        jitter *= 0.15 * size * rng.random() / np.linalg.norm(jitter)
        entries.append((f"{cls.class_id}_{k:04d}", look_at(C, jitter)))
    return PoseSet(entries, "local")


def make_object_model(cls: ObjectClass, n: int, seed: int, scale_corruption: float = 1.0) -> ObjectModel:
    rng = np.random.default_rng([seed, cls.appearance_seed, 0x0B7])
    poses = generate_query_trajectory(cls, n, rng)
    if scale_corruption != 1.0:
        poses = PoseSet(
            [(i, Pose.from_center(p.R, p.center * scale_corruption)) for i, p in poses.entries], "local"
        )
    return ObjectModel(cls, poses, metric_scale_known=scale_corruption == 1.0, scale_corruption=scale_corruption)


def ground_truth_pose(local_pose: Pose, instance: PlacedInstance) -> Pose:
    """Scene-frame pose the server returns for a local pose at zero noise."""
    return apply_transform(instance.placement, local_pose)


def generate_genuine_queries(scene: SceneSpec, n: int, rng: np.random.Generator) -> PoseSet:
    """Ordinary-user photos: a camera somewhere in the room.

    Half of the shots look across the room at eye height; the rest are
    close-ups aimed at a single instance, which see little else.
    """
    lo, hi = scene.bounds_array
    entries = []
    for k in range(n):
        if scene.instances and rng.random() < 0.5:
            inst = scene.instances[int(rng.integers(len(scene.instances)))]
            target = inst.placement.t
            ang = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(0.8, 1.6) * max(inst.extent)
            C = target + np.array([dist * np.cos(ang), dist * np.sin(ang), rng.uniform(0.1, 0.6)])
            C = np.clip(C, lo + 0.05, hi - 0.05)
        else:
            C = np.array(
                [rng.uniform(lo[0] + 0.3, hi[0] - 0.3), rng.uniform(lo[1] + 0.3, hi[1] - 0.3), rng.uniform(1.2, 1.8)]
            )
            yaw = rng.uniform(-np.pi, np.pi)
            target = C + np.array([np.cos(yaw), np.sin(yaw), -rng.uniform(0.2, 0.6)])
        entries.append((f"genuine_{k:04d}", look_at(C, target)))
    return PoseSet(entries, "scene")


@dataclass(eq=False)
class Suite:
    config: SuiteConfig
    catalog: list[ObjectClass]
    scenes: list[SceneSpec]
    models: dict[str, ObjectModel]
    genuine: dict[str, PoseSet]

    def scene(self, scene_id: str) -> SceneSpec:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise KeyError(scene_id)


def generate_suite(config: SuiteConfig) -> Suite:
    """Scenes drawing a random subset of a shared catalog, plus attacker models."""
    catalog = default_catalog(config.n_classes, config.seed)
    rng = np.random.default_rng([config.seed, 0x5717E])
    scenes, genuine = [], {}
    for k in range(config.n_scenes):
        lo_n, hi_n = config.objects_per_scene
        m = int(rng.integers(lo_n, hi_n + 1)) if hi_n > 0 else 0
        m = min(m, len(catalog))
        picks = sorted(rng.choice(len(catalog), size=m, replace=False).tolist()) if m else []
        sc = SceneConfig(
            scene_id=f"scene{k + 1}",
            bounds=config.bounds,
            class_ids=[catalog[i].class_id for i in picks],
            similarity=config.similarity,
            seed=int(rng.integers(2**31)),
        )
        scene = generate_scene(sc, catalog)
        scenes.append(scene)
        genuine[scene.scene_id] = generate_genuine_queries(
            scene, config.genuine_queries_per_scene, np.random.default_rng([sc.seed, 0x6E4])
        )
    models = {c.class_id: make_object_model(c, config.poses_per_model, config.seed) for c in catalog}
    return Suite(config, catalog, scenes, models, genuine)


def write_bundle(path, suite: Suite) -> list[Path]:
    """Write a scenario bundle; returns every file written."""
    root = Path(path)
    (root / "models").mkdir(parents=True, exist_ok=True)
    written = []
    meta = {
        "config": suite.config.to_dict(),
        "catalog": [asdict(c) for c in suite.catalog],
        "scenes": [s.scene_id for s in suite.scenes],
        "models": {
            cid: {"metric_scale_known": m.metric_scale_known, "scale_corruption": m.scale_corruption}
            for cid, m in sorted(suite.models.items())
        },
    }
    p = root / "suite.json"
    p.write_text(json.dumps(meta, indent=1, sort_keys=True))
    written.append(p)
    for cid, model in sorted(suite.models.items()):
        p = root / "models" / f"{cid}.jsonl"
        write_pose_set(p, model.local_poses)
        written.append(p)
    for scene in suite.scenes:
        d = root / "scenes" / scene.scene_id
        (d / "queries").mkdir(parents=True, exist_ok=True)
        p = d / "scene.json"
        p.write_text(scene.to_json())
        written.append(p)
        p = d / "queries" / "genuine.jsonl"
        write_pose_set(p, suite.genuine[scene.scene_id])
        written.append(p)
    return written


def read_bundle(path) -> Suite:
    root = Path(path)
    meta = json.loads((root / "suite.json").read_text())
    config = SuiteConfig.from_dict(meta["config"])
    catalog = [ObjectClass(c["class_id"], tuple(c["extent"]), c["appearance_seed"]) for c in meta["catalog"]]
    by_id = {c.class_id: c for c in catalog}
    models = {}
    for cid, info in meta["models"].items():
        poses = read_pose_set(root / "models" / f"{cid}.jsonl", "local")
        models[cid] = ObjectModel(by_id[cid], poses, info["metric_scale_known"], info["scale_corruption"])
    scenes, genuine = [], {}
    for sid in meta["scenes"]:
        d = root / "scenes" / sid
        scenes.append(SceneSpec.from_record(json.loads((d / "scene.json").read_text())))
        genuine[sid] = read_pose_set(d / "queries" / "genuine.jsonl", "scene")
    return Suite(config, catalog, scenes, models, genuine)
