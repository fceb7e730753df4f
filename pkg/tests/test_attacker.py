import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poseleak.alignment import AlignmentParams
from poseleak.attacker import (
    AttackPlan,
    InProcessTransport,
    LeakageError,
    ServerUnreachable,
    TrainingScenario,
    ground_truth_placements,
    placement_error,
    read_log,
    replay,
    run_attack,
    train_from_scenarios,
)
from poseleak.classifier import PresenceStats
from poseleak.geometry import SimTransform, random_rotation, rotation_angle_deg, yaw_rotation
from poseleak.locserver import LocalizationService, ServerConfig, get_profile
from poseleak.scenegen import SuiteConfig, generate_suite

NOISELESS = dict(sigma_rot_deg=0.0, sigma_trans_m=0.0, outlier_rate=0.0)
EXACT = get_profile("tier_high", base_success=1.0, cross_class_confusion=0.0, noise=NOISELESS)
CLEAN = get_profile("tier_high", cross_class_confusion=0.0)


def small_suite(seed=0, n_scenes=1, per_scene=(3, 3), similarity=(0.8, 0.8), n_classes=6):
    return generate_suite(
        SuiteConfig(n_scenes=n_scenes, n_classes=n_classes, objects_per_scene=per_scene, similarity=similarity, seed=seed)
    )


def attack(suite, scene, profile, config=ServerConfig(), preset="30deg_0.5m", mode="rigid", stats=None, **kw):
    models = [suite.models[c.class_id] for c in suite.catalog]
    plan = AttackPlan(models, preset, mode=mode, stats=stats, seed=config.seed)
    service = LocalizationService(scene, profile, config)
    gt = ground_truth_placements(scene, config.scale_withheld)
    return run_attack(plan, InProcessTransport(service), ground_truth=gt, **kw)


def separable_stats(suite, preset="30deg_0.5m"):
    return {c.class_id: PresenceStats(c.class_id, 0.9, 0.0, preset, 1, 1) for c in suite.catalog}


# -- run_attack ------------------------------------------------------------------------------


def test_noise_free_closure():
    suite = small_suite(similarity=(1.0, 1.0))
    scene = suite.scenes[0]
    rec = attack(suite, scene, EXACT, stats=separable_stats(suite))
    for oid in scene.classes():
        obj = rec.objects[oid]
        assert obj.verdict == "present"
        assert obj.epsilon == 1.0
        rot, trans, scale = obj.placement_error
        assert rot <= 1e-6 and trans <= 1e-6 and scale == 1.0
        assert obj.placement is obj.estimate


def test_absent_object_is_not_localized():
    suite = small_suite()
    scene = suite.scenes[0]
    rec = attack(suite, scene, CLEAN, stats=separable_stats(suite))
    absent = [c.class_id for c in suite.catalog if c.class_id not in scene.classes()]
    assert absent
    for oid in absent:
        obj = rec.objects[oid]
        assert obj.localization_rate == 0.0 and obj.n_localized == 0
        assert obj.verdict == "absent" and obj.placement is None
        assert obj.failure == "InsufficientResponses"
        assert obj.placement_error is None


def test_without_stats_only_epsilon_is_reported():
    suite = small_suite()
    rec = attack(suite, suite.scenes[0], CLEAN)
    for obj in rec.objects.values():
        assert obj.verdict == "unclassified" and obj.placement is None


def test_query_budget():
    suite = small_suite()
    rec = attack(suite, suite.scenes[0], CLEAN)
    assert rec.n_requests == sum(len(m.local_poses) for m in suite.models.values())
    keys = [(r["object_id"], r["query_id"]) for r in rec.log]
    assert len(keys) == len(set(keys)) == rec.n_requests


def test_reconstruction_is_deterministic(tmp_path):
    suite = small_suite(seed=2)
    a = attack(suite, suite.scenes[0], CLEAN, ServerConfig(seed=9), log_path=tmp_path / "a.jsonl")
    b = attack(suite, suite.scenes[0], CLEAN, ServerConfig(seed=9), log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    strip = lambda r: {**r.to_record(), "log_path": None}  # noqa: E731
    assert json.dumps(strip(a), sort_keys=True) == json.dumps(strip(b), sort_keys=True)


@pytest.mark.parametrize("mode", ["rigid", "sim3"])
def test_log_replay_reproduces_epsilon(tmp_path, mode):
    suite = small_suite(seed=4)
    cfg = ServerConfig(seed=4, scale_withheld=1.7 if mode == "sim3" else None)
    rec = attack(suite, suite.scenes[0], CLEAN, cfg, mode=mode, log_path=tmp_path / "log.jsonl")
    res = replay(read_log(tmp_path / "log.jsonl"), suite.models.values(), AlignmentParams(30, 0.5), mode, seed=4)
    for oid, obj in rec.objects.items():
        if obj.epsilon is None:
            assert res[oid] is None
        else:
            assert res[oid].epsilon == obj.epsilon
            assert res[oid].inlier_ids == obj.alignment.inlier_ids


def test_auto_mode_follows_handshake():
    suite = small_suite(seed=1)
    scene = suite.scenes[0]
    assert attack(suite, scene, CLEAN, mode="auto").mode == "rigid"
    rec = attack(suite, scene, CLEAN, ServerConfig(scale_withheld=2.0), mode="auto")
    assert rec.mode == "sim3"
    for oid in scene.classes():
        assert rec.objects[oid].placement_error[2] == pytest.approx(1.0, abs=0.05)


def test_sim3_needs_two_responses():
    suite = small_suite(seed=1)
    prof = get_profile("tier_low", base_success=0.05, cross_class_confusion=0.0)
    seen_single = False
    for seed in range(20):
        rec = attack(suite, suite.scenes[0], prof, ServerConfig(seed=seed), mode="sim3")
        for obj in rec.objects.values():
            if obj.n_localized < 2:
                assert obj.failure == "InsufficientResponses" and obj.epsilon is None
            else:
                assert obj.epsilon is not None
            seen_single |= obj.n_localized == 1
    assert seen_single


def test_missing_endpoint_is_unreachable():
    suite = small_suite()
    with pytest.raises(ServerUnreachable):
        run_attack(AttackPlan(list(suite.models.values())))
    with pytest.raises(ServerUnreachable):
        run_attack(AttackPlan(list(suite.models.values()), endpoint="127.0.0.1:1"))


def test_plan_validation():
    suite = small_suite()
    with pytest.raises(ValueError):
        AttackPlan(list(suite.models.values()), "20deg_1m")
    with pytest.raises(ValueError):
        AttackPlan(list(suite.models.values()), mode="affine")


@pytest.mark.slow
@pytest.mark.parametrize("preset", ["30deg_0.5m", "10deg_0.25m"])
def test_default_noise_places_present_objects(preset):
    ok = 0
    for seed in range(100):
        suite = small_suite(seed=seed, n_classes=10)
        scene = suite.scenes[0]
        rec = attack(suite, scene, CLEAN, ServerConfig(seed=seed), preset=preset)
        errs = [rec.objects[oid].placement_error for oid in scene.classes()]
        ok += all(rot < 5.0 and trans < 0.2 for rot, trans, _ in errs)
    assert ok >= 95


# -- placement_error -------------------------------------------------------------------------


def test_placement_error_identity():
    T = SimTransform(yaw_rotation(0.4), [1.0, 2.0, 0.3])
    assert placement_error(T, T) == (0.0, 0.0, 1.0)


def test_placement_error_yaw_about_origin():
    gt = SimTransform(yaw_rotation(0.4), [1.0, 2.0, 0.3])
    est = SimTransform(gt.R @ yaw_rotation(np.radians(10)), gt.t)
    rot, trans, scale = placement_error(est, gt)
    assert rot == pytest.approx(10.0, abs=1e-9)
    assert (trans, scale) == (0.0, 1.0)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_placement_error_matches_matrix_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = SimTransform(random_rotation(rng), rng.normal(0, 3, 3), rng.uniform(0.3, 3))
    est = SimTransform(random_rotation(rng), rng.normal(0, 3, 3), rng.uniform(0.3, 3))
    Me, Mg = est.matrix(), gt.matrix()
    se, sg = np.cbrt(np.linalg.det(Me[:3, :3])), np.cbrt(np.linalg.det(Mg[:3, :3]))
    rel = (Me[:3, :3] / se) @ (Mg[:3, :3] / sg).T
    origin = np.array([0, 0, 0, 1.0])
    rot, trans, scale = placement_error(est, gt)
    assert rot == pytest.approx(rotation_angle_deg(rel), abs=1e-7)
    assert trans == pytest.approx(np.linalg.norm(Me @ origin - Mg @ origin), abs=1e-9)
    assert scale == pytest.approx(se / sg, rel=1e-9)


def test_ground_truth_with_withheld_scale():
    suite = small_suite()
    scene = suite.scenes[0]
    plain = ground_truth_placements(scene)
    scaled = ground_truth_placements(scene, 2.0)
    for cid in plain:
        np.testing.assert_allclose(scaled[cid].t, 2 * plain[cid].t)
        assert scaled[cid].scale == 2.0


# -- training --------------------------------------------------------------------------------


def scenarios(suite, profile=CLEAN, seed=0):
    out = []
    for scene in suite.scenes:
        service = LocalizationService(scene, profile, ServerConfig(seed=seed))
        labels = {c.class_id: c.class_id in scene.classes() for c in suite.catalog}
        out.append(TrainingScenario(scene.scene_id, InProcessTransport(service), labels))
    return out


def test_singleton_training_uses_the_runs_themselves():
    suite = small_suite(seed=11, n_scenes=2, per_scene=(2, 2), n_classes=4)
    a, b = suite.scenes
    # disjoint scenes: every object has one present and one absent run
    assert not a.classes() & b.classes()
    singletons = a.classes() | b.classes()
    models = [suite.models[c.class_id] for c in suite.catalog]
    plan = AttackPlan(models, "30deg_0.5m", mode="rigid")
    stats = train_from_scenarios(scenarios(suite), plan)
    eps = {}
    for sc in scenarios(suite):
        rec = run_attack(plan, sc.transport)
        for oid, obj in rec.objects.items():
            eps[(oid, sc.labels[oid])] = obj.epsilon if obj.epsilon is not None else 0.0
    for oid in singletons:
        assert stats[oid].eps_present == eps[(oid, True)]
        assert stats[oid].eps_absent == eps[(oid, False)]


def test_training_refuses_evaluation_scene():
    suite = small_suite(n_scenes=3)
    plan = AttackPlan(list(suite.models.values()))
    with pytest.raises(LeakageError):
        train_from_scenarios(scenarios(suite), plan, exclude_scene="scene2")


def test_training_needs_two_scenarios():
    suite = small_suite(n_scenes=1)
    with pytest.raises(ValueError):
        train_from_scenarios(scenarios(suite), AttackPlan(list(suite.models.values())))
