import json
import math

import numpy as np
import pytest

from pushxfer import pushsim as ps
from pushxfer.contact import OBJECT_ENVIRONMENT, ROBOT_OBJECT
from pushxfer.density import Bandwidths, eval_feature_kernel, eval_motion_kernel
from pushxfer.errors import AllVetoed, LostContact, UnsupportedCondition
from pushxfer.features import SurfaceFeature
from pushxfer.geom import (
    Pose,
    RigidMotion,
    compose,
    inverse,
    motion_between,
    object_to_local_motion,
    qangle,
    qfrom_axis_angle,
    qyaw,
    random_pose,
    random_quaternion,
    relative_pose,
)
from pushxfer.motion import (
    Expert,
    MotionKernel,
    MotionModel,
    PredictConfig,
    PredictionTrace,
    expert_conditional,
    expert_log_conditional,
    poe_score,
    poe_scores,
    predict,
    record_rollout,
)

BW = Bandwidths(0.05, 5.0, 3.0, 0.05, 5.0)  # wide enough that brute-force values do not underflow
SMALL = PredictConfig(candidates=20, seeds=10, iterations=40, keep=5)


def small_pose(rng, scale=0.05):
    return Pose(scale * rng.standard_normal(3), qfrom_axis_angle(rng.standard_normal(3), 0.3 * rng.standard_normal()))


def random_kernels(rng, n):
    return [MotionKernel(small_pose(rng), rng.standard_normal(2), RigidMotion(small_pose(rng).p, small_pose(rng).q),
                         float(rng.uniform(0.2, 1))) for _ in range(n)]


def brute_conditional(kernels, m_b, u, r, h, bw):
    m_v = object_to_local_motion(m_b, h)
    c = SurfaceFeature(u, np.asarray(r, float))
    num = den = 0.0
    wsum = sum(k.weight for k in kernels)
    for k in kernels:
        kc = eval_feature_kernel(c, SurfaceFeature(k.u, k.r), bw) * k.weight / wsum
        num += kc * eval_motion_kernel(m_v, k.m, bw)
        den += kc
    return num / den


def test_single_kernel_collapses_to_motion_kernel(rng):
    k = random_kernels(rng, 1)[0]
    model = MotionModel.from_kernels([k], "linear", ROBOT_OBJECT, BW)
    h = small_pose(rng, 0.2)
    m_b = RigidMotion(small_pose(rng).p, small_pose(rng).q)
    val = expert_conditional(model, m_b, (k.u, k.r), h)
    m_v = object_to_local_motion(m_b, h)
    assert val == pytest.approx(eval_motion_kernel(m_v, k.m, BW), rel=1e-12)


def test_matches_brute_force_double_sum(rng):
    ks = random_kernels(rng, 50)
    model = MotionModel.from_kernels(ks, "linear", ROBOT_OBJECT, BW)
    for _ in range(5):
        u, r = small_pose(rng), rng.standard_normal(2)
        h = small_pose(rng, 0.2)
        m_b = RigidMotion(small_pose(rng).p, small_pose(rng).q)
        got = expert_conditional(model, m_b, (u, r), h)
        assert got == pytest.approx(brute_conditional(ks, m_b, u, r, h, BW), rel=1e-12)


def test_far_condition_is_vetoed(rng):
    model = MotionModel.from_kernels(random_kernels(rng, 5), "linear", ROBOT_OBJECT, Bandwidths())
    far = Pose([5.0, 5.0, 5.0], qyaw(1.0))
    with pytest.raises(UnsupportedCondition):
        expert_conditional(model, RigidMotion.identity(), (far, [0.0, 0.0]), Pose.identity())
    e = Expert(model, (far, [0.0, 0.0]), Pose.identity())
    assert e.vetoed
    assert poe_score([e], RigidMotion.identity()) == -math.inf


def test_conditional_integrates_to_one(rng):
    ks = random_kernels(rng, 4)
    model = MotionModel.from_kernels(ks, "linear", ROBOT_OBJECT, Bandwidths(0.05, 5.0, 3.0, 0.03, 3.0))
    e = Expert(model, (ks[0].u, ks[0].r), Pose.identity())
    n = 400_000
    lo = model.density.mp.min(axis=0) - 0.2
    hi = model.density.mp.max(axis=0) + 0.2
    P = rng.uniform(lo, hi, size=(n, 3))
    Q = random_quaternion(rng, size=n)
    vol = np.prod(hi - lo) * 2 * math.pi**2
    est = np.exp(e.log_likelihood(P, Q)).mean() * vol
    assert est == pytest.approx(1.0, abs=0.05)


def test_local_motion_conversion_matches_geom(rng):
    model = MotionModel.from_kernels(random_kernels(rng, 3), "linear", ROBOT_OBJECT, BW)
    h = random_pose(rng)
    e = Expert(model, (small_pose(rng), [0.0, 0.0]), h)
    m_b = random_pose(rng, 0.1)
    vp, vq = e.local_motions(m_b.p[None], m_b.q[None])
    assert Pose(vp[0], vq[0]).allclose(object_to_local_motion(m_b, h), atol=1e-12)
    bp, bq = e.object_motions(vp, vq)
    assert Pose(bp[0], bq[0]).allclose(m_b, atol=1e-12)


def test_poe_semantics(rng):
    ks = random_kernels(rng, 10)
    model = MotionModel.from_kernels(ks, "linear", ROBOT_OBJECT, BW)
    a = Expert(model, (ks[0].u, ks[0].r), small_pose(rng, 0.1))
    b = Expert(model, (ks[1].u, ks[1].r), small_pose(rng, 0.1))
    m = RigidMotion(ks[0].m.p, ks[0].m.q)
    assert poe_score([a], m) == pytest.approx(expert_log_conditional(model, m, (ks[0].u, ks[0].r), a.h))
    assert poe_score([a, b], m) == pytest.approx(a.log_likelihood(m.p, m.q)[0] + b.log_likelihood(m.p, m.q)[0])
    # scaling one expert by a constant shifts every log score equally
    P = np.array([k.m.p for k in ks])
    Q = np.array([k.m.q for k in ks])
    base = poe_scores([a, b], P, Q)
    scaled = a.log_likelihood(P, Q) + math.log(7.5) + b.log_likelihood(P, Q)
    assert np.argmax(base) == np.argmax(scaled)


def test_flat_environment_expert_keeps_argmax(rng):
    ks = random_kernels(rng, 10)
    ro = MotionModel.from_kernels(ks, "linear", ROBOT_OBJECT, BW)
    flat = MotionModel.from_kernels(ks, "linear", OBJECT_ENVIRONMENT, Bandwidths(1.0, 1.0, 100.0, 1e3, 1e-3))
    a = Expert(ro, (ks[0].u, ks[0].r), Pose.identity())
    e = Expert(flat, (ks[3].u, ks[3].r), Pose.identity())
    P = np.array([k.m.p for k in ks])
    Q = np.array([k.m.q for k in ks])
    assert np.argmax(poe_scores([a, e], P, Q)) == np.argmax(poe_scores([a], P, Q))


def _cube_rollout(cube_shape, links, mu=0.3):
    start = cube_shape.resting_pose()
    lp = Pose.planar(-0.1, 0.03, 0.0, z=ps.LINK_HEIGHT)
    v = Pose([-0.1, 0.03, 0.16], qfrom_axis_angle([0, 1, 0], -math.pi / 2))  # on the pushed face
    act = ps.Action("angular+", (0.1, 0.0, 0.0), 10.0, 4.0)
    res = ps.simulate_push(cube_shape, start, lp, links["front"], act, mu, frames={"L": v})
    return start, lp, v, act, res


def test_record_rollout_sticking_head_on(cube_shape, links):
    start = cube_shape.resting_pose()
    lp = Pose.planar(-0.1, 0.0, 0.0, z=ps.LINK_HEIGHT)
    v = Pose([-0.1, 0.0, 0.06], qfrom_axis_angle([0, 1, 0], -math.pi / 2))
    res = ps.simulate_push(cube_shape, start, lp, links["front"], ps.Action("linear"), 0.35, frames={"L": v})
    k = record_rollout(res, "L", (relative_pose(v, lp), [0.0, 0.0]))
    assert np.linalg.norm(k.m.p) == pytest.approx(0.4, abs=1e-6)


def test_record_rollout_zero_motion(cube_shape, links):
    v = Pose([-0.1, 0.0, 0.06], qfrom_axis_angle([0, 1, 0], -math.pi / 2))
    res = ps.simulate_push(cube_shape, cube_shape.resting_pose(), Pose.planar(-0.1, 0, 0, z=0.06), links["front"],
                           ps.Action("still", (0, 0, 0), 0.0, 1.0), 0.3, frames={"L": v})
    k = record_rollout(res, "L", (Pose.identity(), [0.0, 0.0]))
    assert k.m.allclose(Pose.identity(), atol=0)


def test_record_rollout_lost_contact(cube_shape, links):
    lp = Pose.planar(-0.1, 0.2, 0.0, z=ps.LINK_HEIGHT)  # plate barely overlaps the face
    res = ps.simulate_push(cube_shape, cube_shape.resting_pose(), lp, links["front"], ps.Action("linear"), 0.25,
                           frames={"L": Pose([-0.1, 0.08, 0.06], qyaw(0.0))})
    assert res.contact_lost
    with pytest.raises(LostContact):
        record_rollout(res, "L", (Pose.identity(), [0.0, 0.0]))
    # environment frames never depend on the link staying in contact
    record_rollout(res, "L", (Pose.identity(), [0.0, 0.0]), kind=OBJECT_ENVIRONMENT)


def test_single_rollout_recovery(cube_shape, links):
    start, lp, v, act, res = _cube_rollout(cube_shape, links)
    cond = (relative_pose(v, lp), np.zeros(2))
    model = MotionModel.from_kernels([record_rollout(res, "L", cond, act)], act.id, ROBOT_OBJECT)
    h = relative_pose(v, start)
    preds = predict([(model, cond, h)], act, PredictConfig(), np.random.default_rng(0))
    truth = res.object_motion
    top = preds[0].m_b
    assert np.linalg.norm(top.p - truth.p) < 0.01
    assert math.degrees(qangle(top.q, truth.q)) < 2.0


def test_predict_ranking_and_determinism(rng, cube_shape, links):
    ks = random_kernels(rng, 20)
    model = MotionModel.from_kernels(ks, "linear", ROBOT_OBJECT, BW)
    experts = [Expert(model, (ks[0].u, ks[0].r), small_pose(rng, 0.1))]
    trace = PredictionTrace()
    a = predict(experts, "linear", SMALL, np.random.default_rng(3), trace)
    b = predict(experts, "linear", SMALL, np.random.default_rng(3))
    assert [p.as_dict() for p in a] == [p.as_dict() for p in b]
    ll = [p.log_likelihood for p in a]
    assert ll == sorted(ll, reverse=True)
    assert [p.rank for p in a] == list(range(1, len(a) + 1))
    assert len(a) <= SMALL.keep
    # refinement never ends below the best unrefined seed
    assert a[0].log_likelihood >= trace.seed_scores.max() - 1e-12
    for x, y in zip(a, a[1:]):
        assert np.linalg.norm(x.m_b.p - y.m_b.p) >= SMALL.dedup_p or \
            math.degrees(qangle(x.m_b.q, y.m_b.q)) >= SMALL.dedup_deg


def test_predict_errors(rng):
    ks = random_kernels(rng, 3)
    model = MotionModel.from_kernels(ks, "linear", ROBOT_OBJECT, Bandwidths())
    good = Expert(model, (ks[0].u, ks[0].r), Pose.identity())
    with pytest.raises(ValueError):
        predict([good], "angular+", SMALL, rng)
    vetoed = Expert(model, (Pose([9.0, 9, 9], qyaw(2.0)), [0.0, 0.0]), Pose.identity())
    with pytest.raises(AllVetoed):
        predict([good, vetoed], "linear", SMALL, rng)


def test_model_json_round_trip(rng):
    model = MotionModel.from_kernels(random_kernels(rng, 4), "angular+", OBJECT_ENVIRONMENT, BW)
    m2 = MotionModel.from_dict(json.loads(model.to_json()))
    assert m2.to_json() == model.to_json()
    assert m2.action_id == "angular+" and m2.kind == OBJECT_ENVIRONMENT
