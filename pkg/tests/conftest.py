import numpy as np

from poseleak.alignment import PoseSet
from poseleak.geometry import NoiseSpec, Pose, SimTransform, apply_transform, look_at, perturb, random_rotation


def random_rigid(rng, spread=3.0) -> SimTransform:
    return SimTransform(random_rotation(rng), rng.normal(0, spread, 3), 1.0)


def orbit_poses(rng, n, radius=1.5, prefix="img") -> PoseSet:
    """Cameras on a jittered ring looking at the local origin."""
    entries = []
    for k in range(n):
        a = 2 * np.pi * k / n + rng.uniform(-0.2, 0.2)
        C = np.array([radius * np.cos(a), radius * np.sin(a), rng.uniform(-0.3, 0.8)])
        entries.append((f"{prefix}{k:03d}", look_at(C, rng.normal(0, 0.05, 3))))
    return PoseSet(entries, "local")


def random_poses(rng, n, prefix="img") -> PoseSet:
    return PoseSet([(f"{prefix}{k:03d}", Pose(random_rotation(rng), rng.normal(0, 2, 3))) for k in range(n)], "local")


def transformed(T: SimTransform, local: PoseSet) -> PoseSet:
    return PoseSet([(i, apply_transform(T, p)) for i, p in local.entries], "scene")


def random_scene_pose(rng, lo=-5.0, hi=5.0) -> Pose:
    return Pose.from_center(random_rotation(rng), rng.uniform(lo, hi, 3))


def noisy(rng, server: PoseSet, spec: NoiseSpec) -> PoseSet:
    return PoseSet([(i, perturb(p, spec, rng)) for i, p in server.entries], "scene")


def oracle_instance(seed):
    """Random instances of mixed difficulty, including exact ties."""
    rng = np.random.default_rng(seed)
    kind = seed % 4
    n = int(rng.integers(2 if kind == 1 else 1, 21))
    local = orbit_poses(rng, n)
    T = random_rigid(rng)
    if kind == 0:  # noisy with outliers
        server = noisy(rng, transformed(T, local), NoiseSpec(4.0, 0.12, 0.35))
    elif kind == 1:  # two equally supported transforms
        T2 = random_rigid(rng)
        ids = local.ids()
        rng.shuffle(ids)
        half = set(ids[: n // 2])
        d1, d2 = transformed(T, local).as_dict(), transformed(T2, local).as_dict()
        server = PoseSet([(i, d2[i] if i in half else d1[i]) for i in local.ids()], "scene")
        if n % 2:
            server = PoseSet([(i, p) for i, p in server.entries if i != ids[-1]], "scene")
    elif kind == 2:  # every hypothesis explains only itself
        server = PoseSet([(i, random_scene_pose(rng)) for i in local.ids()], "scene")
    else:  # residuals straddling the thresholds
        server = noisy(rng, transformed(T, local), NoiseSpec(7.0, 0.15, 0.0))
    return local, server


# -- acceptance reporting ----------------------------------------------------------------------

_ACCEPTANCE: dict[str, str] = {}


def record_acceptance(cid: str, ok: bool, detail: str) -> str:
    line = f"{cid} {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE[cid] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(_ACCEPTANCE, key=lambda c: int(c[1:])):
            terminalreporter.write_line(_ACCEPTANCE[cid])
