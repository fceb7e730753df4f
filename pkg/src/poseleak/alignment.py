"""Robust alignment of a local pose set to server-returned poses.

Every corresponding pair (local pose, server pose) of the same image yields a
complete local-to-scene frame hypothesis. All hypotheses are scored by how
many other pairs they explain within rotation/translation thresholds; the
best one is refined by averaging the relative transforms of its inliers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from .geometry import (
    Pose,
    SimTransform,
    chordal_mean_rotation,
    rotation_angle_deg,
    rotation_angles_deg,
)

__all__ = [
    "EmptyIntersection",
    "DegenerateBaseline",
    "PoseSet",
    "AlignmentParams",
    "AlignmentResult",
    "hypothesis_from_pair",
    "pair_residuals",
    "best_single_camera_alignment",
    "exhaustive_oracle_alignment",
    "sim3_from_two_pairs",
    "ransac_sim3_alignment",
    "read_pose_set",
    "write_pose_set",
]


class EmptyIntersection(ValueError):
    """The two pose sets share no image id."""


class DegenerateBaseline(ValueError):
    """Two camera centers coincide, so scale is unobservable."""


@dataclass
class PoseSet:
    entries: list[tuple[str, Pose]]
    frame_label: str = "local"

    def __post_init__(self):
        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image_id in PoseSet")
        if self.frame_label not in ("local", "scene"):
            raise ValueError(f"bad frame_label {self.frame_label!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [i for i, _ in self.entries]

    def as_dict(self) -> dict[str, Pose]:
        return dict(self.entries)

    def to_records(self) -> list[dict]:
        return [{"image_id": i, **p.to_record()} for i, p in self.entries]

    @classmethod
    def from_records(cls, records: Iterable[dict], frame_label: str = "local") -> "PoseSet":
        return cls([(r["image_id"], Pose.from_record(r)) for r in records], frame_label)


def write_pose_set(path, pose_set: PoseSet) -> None:
    with open(path, "w") as f:
        for rec in pose_set.to_records():
            f.write(json.dumps(rec) + "\n")


def read_pose_set(path, frame_label: str = "local") -> PoseSet:
    lines = Path(path).read_text().splitlines()
    return PoseSet.from_records((json.loads(l) for l in lines if l.strip()), frame_label)


@dataclass(frozen=True)
class AlignmentParams:
    delta_r_deg: float
    delta_t_m: float

    def __post_init__(self):
        for v in (self.delta_r_deg, self.delta_t_m):
            if not (math.isfinite(v) and v > 0):
                raise ValueError("alignment thresholds must be positive and finite")


@dataclass
class AlignmentResult:
    transform: SimTransform
    inlier_ids: frozenset[str]
    epsilon: float
    hypothesis_id: str
    per_pair_residuals: list[tuple[str, float, float]]
    n_matched: int
    hypothesis_transform: SimTransform | None = None
    hypothesis_partner: str | None = None
    extra: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = {
            "transform": self.transform.to_record(),
            "inlier_ids": sorted(self.inlier_ids),
            "epsilon": self.epsilon,
            "hypothesis_id": self.hypothesis_id,
            "n_matched": self.n_matched,
            "per_pair_residuals": [
                {"image_id": i, "delta_r_deg": dr, "delta_t_m": dt}
                for i, dr, dt in self.per_pair_residuals
            ],
        }
        if self.hypothesis_partner is not None:
            rec["hypothesis_partner"] = self.hypothesis_partner
        return rec


def hypothesis_from_pair(local: Pose, server: Pose) -> SimTransform:
    """Local-to-scene map implied by one image: ``R = R̂ᵀR``, ``t = R̂ᵀ(t - t̂)``."""
    return SimTransform(server.R.T @ local.R, server.R.T @ (local.t - server.t), 1.0)


def pair_residuals(local: Pose, server: Pose, T: SimTransform) -> tuple[float, float]:
    """Rotation (deg) and translation (m) disagreement of one pair under ``T``.

    The translation term ``‖R̂ᵀt̂ - s R Rⱼᵀtⱼ + t‖`` is the distance between the
    server camera center and the mapped local center; it is divided by the
    scale so it stays in the local model's metric units.
    """
    dr = rotation_angle_deg(local.R @ T.R.T @ server.R.T)
    v = server.R.T @ server.t - T.scale * (T.R @ (local.R.T @ local.t)) + T.t
    return dr, float(np.linalg.norm(v)) / T.scale


def _shared(local: PoseSet, server: PoseSet) -> list[str]:
    srv = server.as_dict()
    ids = sorted(i for i in local.ids() if i in srv)
    if not ids:
        raise EmptyIntersection("local and server pose sets share no image_id")
    return ids


def _stack(local: PoseSet, server: PoseSet, ids: list[str]):
    loc, srv = local.as_dict(), server.as_dict()
    Rl = np.stack([loc[i].R for i in ids])
    tl = np.stack([loc[i].t for i in ids])
    Rs = np.stack([srv[i].R for i in ids])
    ts = np.stack([srv[i].t for i in ids])
    return Rl, tl, Rs, ts


def _residuals_against(Rl, tl, Rs, ts, R, t, s=1.0):
    """Residuals of all pairs against one hypothesis (vectorized)."""
    D = Rl @ R.T @ Rs.transpose(0, 2, 1)
    dr = rotation_angles_deg(D)
    srv_term = np.einsum("nji,nj->ni", Rs, ts)  # R̂ᵀ t̂
    loc_term = np.einsum("nji,nj->ni", Rl, tl)  # Rᵀ t
    v = srv_term - s * (loc_term @ R.T) + t
    return dr, np.linalg.norm(v, axis=1) / s


def _refine(Rl, tl, Rs, ts, idx, scale=1.0) -> SimTransform:
    R_each = Rs[idx].transpose(0, 2, 1) @ Rl[idx]
    R = chordal_mean_rotation(R_each)
    # per-inlier t_est = Ĉ_j - s R_est_j C_j
    C_loc = -np.einsum("nji,nj->ni", Rl[idx], tl[idx])
    C_srv = -np.einsum("nji,nj->ni", Rs[idx], ts[idx])
    t_each = C_srv - scale * np.einsum("nij,nj->ni", R_each, C_loc)
    return SimTransform(R, t_each.mean(axis=0), scale)


def best_single_camera_alignment(
    local: PoseSet, server: PoseSet, params: AlignmentParams
) -> AlignmentResult:
    """Score every single-pair hypothesis; keep the one with most inliers.

    Only image ids present in both sets take part. Hypotheses are visited in
    lexicographic image_id order and replaced only on a strictly larger inlier
    count, so ties go to the smallest id. ``epsilon`` is the winner's inlier
    count over the number of matched pairs, computed before refinement.
    """
    ids = _shared(local, server)
    Rl, tl, Rs, ts = _stack(local, server, ids)
    n = len(ids)

    R_est = Rs.transpose(0, 2, 1) @ Rl
    t_est = np.einsum("nji,nj->ni", Rs, tl - ts)

    # (i, j): hypothesis i evaluated on pair j
    D = Rl[None] @ R_est.transpose(0, 2, 1)[:, None] @ Rs.transpose(0, 2, 1)[None]
    dr = rotation_angles_deg(D)
    srv_term = np.einsum("nji,nj->ni", Rs, ts)
    loc_term = np.einsum("nji,nj->ni", Rl, tl)
    v = srv_term[None] - np.einsum("iab,jb->ija", R_est, loc_term) + t_est[:, None]
    dt = np.linalg.norm(v, axis=2)

    inl = (dr < params.delta_r_deg) & (dt < params.delta_t_m)
    counts = inl.sum(axis=1)
    best = int(np.argmax(counts))  # first maximum = smallest id

    idx = np.flatnonzero(inl[best])
    hyp = SimTransform(R_est[best], t_est[best])
    return AlignmentResult(
        transform=_refine(Rl, tl, Rs, ts, idx),
        inlier_ids=frozenset(ids[k] for k in idx),
        epsilon=len(idx) / n,
        hypothesis_id=ids[best],
        per_pair_residuals=[(ids[j], float(dr[best, j]), float(dt[best, j])) for j in range(n)],
        n_matched=n,
        hypothesis_transform=hyp,
    )


def exhaustive_oracle_alignment(
    local: PoseSet, server: PoseSet, params: AlignmentParams
) -> AlignmentResult:
    """Literal loop-by-loop transcription of the hypothesize-and-verify scheme.

    Kept deliberately naive and free of the helpers above so it can serve as
    an independent check of :func:`best_single_camera_alignment`.
    """
    loc = dict(local.entries)
    srv = dict(server.entries)
    ids = sorted(set(loc) & set(srv))
    if not ids:
        raise EmptyIntersection("local and server pose sets share no image_id")
    N = len(ids)

    def angle(M):
        c = (M[0][0] + M[1][1] + M[2][2] - 1.0) / 2.0
        return math.degrees(math.acos(max(-1.0, min(1.0, c))))

    best_inliers: list[int] = []
    best_i = None
    best_R = best_t = None
    for i in range(N):
        Ri, ti = loc[ids[i]].R, loc[ids[i]].t
        Rhi, thi = srv[ids[i]].R, srv[ids[i]].t
        R_est = Rhi.T @ Ri
        t_est = Rhi.T @ (ti - thi)
        inliers = []
        for j in range(N):
            Rj, tj = loc[ids[j]].R, loc[ids[j]].t
            Rhj, thj = srv[ids[j]].R, srv[ids[j]].t
            d_r = angle(Rj @ R_est.T @ Rhj.T)
            d_t = math.sqrt(sum(x * x for x in (Rhj.T @ thj - R_est @ Rj.T @ tj + t_est)))
            if d_r < params.delta_r_deg and d_t < params.delta_t_m:
                inliers.append(j)
        if best_i is None or len(inliers) > len(best_inliers):
            best_inliers, best_i, best_R, best_t = inliers, i, R_est, t_est

    residuals = []
    for j in range(N):
        Rj, tj = loc[ids[j]].R, loc[ids[j]].t
        Rhj, thj = srv[ids[j]].R, srv[ids[j]].t
        d_t = math.sqrt(sum(x * x for x in (Rhj.T @ thj - best_R @ Rj.T @ tj + best_t)))
        residuals.append((ids[j], angle(Rj @ best_R.T @ Rhj.T), d_t))

    # quaternion-eigen average through scipy's conversions, not ours
    A = np.zeros((4, 4))
    t_sum = np.zeros(3)
    for j in best_inliers:
        Rj, tj = loc[ids[j]].R, loc[ids[j]].t
        Rhj, thj = srv[ids[j]].R, srv[ids[j]].t
        q = ScipyRotation.from_matrix(Rhj.T @ Rj).as_quat()
        A += np.outer(q, q)
        t_sum += Rhj.T @ (tj - thj)
    R_avg = ScipyRotation.from_quat(np.linalg.eigh(A)[1][:, -1]).as_matrix()
    return AlignmentResult(
        transform=SimTransform(R_avg, t_sum / len(best_inliers)),
        inlier_ids=frozenset(ids[j] for j in best_inliers),
        epsilon=len(best_inliers) / N,
        hypothesis_id=ids[best_i],
        per_pair_residuals=residuals,
        n_matched=N,
        hypothesis_transform=SimTransform(best_R, best_t),
    )


def sim3_from_two_pairs(local_a: Pose, server_a: Pose, local_b: Pose, server_b: Pose) -> SimTransform:
    """Similarity hypothesis from two images.

    Scale comes from the ratio of camera-center baselines, rotation from pair
    ``a`` alone, and translation makes pair ``a``'s centers coincide. With
    rigid input this equals ``hypothesis_from_pair(local_a, server_a)``.
    """
    base_local = np.linalg.norm(local_a.center - local_b.center)
    if base_local <= 1e-9:
        raise DegenerateBaseline("local camera centers coincide")
    s = np.linalg.norm(server_a.center - server_b.center) / base_local
    if s <= 0.0:
        raise DegenerateBaseline("server camera centers coincide")
    R = server_a.R.T @ local_a.R
    return SimTransform(R, server_a.center - s * (R @ local_a.center), s)


def ransac_sim3_alignment(
    local: PoseSet,
    server: PoseSet,
    params: AlignmentParams,
    max_iters: int = 500,
    rng: np.random.Generator | None = None,
) -> AlignmentResult:
    """Two-pair similarity hypotheses scored like the rigid case.

    Pairs are enumerated exhaustively (in id order) when there are at most
    ``max_iters`` of them, otherwise sampled with ``rng``. The winning inlier
    set is refined: rotation by chordal mean, scale as the ratio of RMS
    camera-center spreads about the inlier centroids, translation by the mean
    of the per-inlier translations at that scale.
    """
    ids = _shared(local, server)
    n = len(ids)
    if n < 2:
        raise EmptyIntersection("similarity alignment needs at least two shared ids")
    loc, srv = local.as_dict(), server.as_dict()
    Rl, tl, Rs, ts = _stack(local, server, ids)

    all_pairs = n * (n - 1) // 2
    if all_pairs <= max_iters:
        candidates = list(combinations(range(n), 2))
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        candidates = []
        for _ in range(max_iters):
            a, b = rng.choice(n, size=2, replace=False)
            candidates.append((int(a), int(b)))

    best = None
    for a, b in candidates:
        try:
            T = sim3_from_two_pairs(loc[ids[a]], srv[ids[a]], loc[ids[b]], srv[ids[b]])
        except DegenerateBaseline:
            continue
        dr, dt = _residuals_against(Rl, tl, Rs, ts, T.R, T.t, T.scale)
        mask = (dr < params.delta_r_deg) & (dt < params.delta_t_m)
        count = int(mask.sum())
        if best is None or count > best[0]:
            best = (count, a, b, T, mask, dr, dt)
    if best is None:
        raise DegenerateBaseline("every sampled pair has a degenerate baseline")

    count, a, b, T, mask, dr, dt = best
    idx = np.flatnonzero(mask)
    scale = T.scale
    if len(idx) >= 2:
        C_loc = -np.einsum("nji,nj->ni", Rl[idx], tl[idx])
        C_srv = -np.einsum("nji,nj->ni", Rs[idx], ts[idx])
        d_loc = C_loc - C_loc.mean(axis=0)
        d_srv = C_srv - C_srv.mean(axis=0)
        spread_loc = float(np.sqrt((d_loc**2).sum(axis=1).mean()))
        spread_srv = float(np.sqrt((d_srv**2).sum(axis=1).mean()))
        if spread_loc > 1e-12 and spread_srv > 0:
            scale = spread_srv / spread_loc
    return AlignmentResult(
        transform=_refine(Rl, tl, Rs, ts, idx, scale),
        inlier_ids=frozenset(ids[k] for k in idx),
        epsilon=len(idx) / n,
        hypothesis_id=ids[a],
        per_pair_residuals=[(ids[j], float(dr[j]), float(dt[j])) for j in range(n)],
        n_matched=n,
        hypothesis_transform=T,
        hypothesis_partner=ids[b],
    )
