import json
import math

import numpy as np
import pytest

from pushxfer.contact import ROBOT_OBJECT, ContactModel, learn_object_environment, learn_robot_object
from pushxfer.density import Bandwidths, ParticleDensity
from pushxfer.errors import EmptyFeatures, EmptyModel, InfeasibleQuery
from pushxfer.features import FeatureSet, build_feature_set
from pushxfer.geom import (
    IDENTITY_Q,
    Pose,
    compose,
    compose_arrays,
    inverse,
    qangle,
    qfrom_axis_angle,
    qto_matrix,
    qyaw,
    relative_pose,
)
from pushxfer.query import (
    ContactFrame,
    Feasibility,
    QueryDensity,
    build_query_density,
    frame_log_density,
    sample_env_frames,
    sample_feasible_link_pose,
    sample_link_pose,
    sample_link_poses,
    select_contact_frame,
)
from pushxfer.optimize import AnnealSchedule


@pytest.fixture(scope="module")
def front_model(cube_scene, links):
    pose, cloud, fs = cube_scene
    lp = Pose.planar(float(cloud.points[:, 0].min()), 0.0, 0.0, z=0.06)
    return lp, learn_robot_object(fs, lp, lp.transform_points(links["front"].surface_points()))


@pytest.fixture(scope="module")
def env_model(cube_scene):
    return learn_object_environment(cube_scene[2], rng=np.random.default_rng(0))


def test_single_particle_density(cube_scene, front_model):
    q = build_query_density(front_model[1], cube_scene[2], K_Q=1, rng=np.random.default_rng(0))
    assert q.K_Q == 1
    assert q.weights.tolist() == [1.0]


def test_particles_are_compositions(cube_scene, front_model):
    _, model = front_model
    q = build_query_density(model, cube_scene[2], K_Q=50, rng=np.random.default_rng(1))
    d = model.density
    for k in range(q.K_Q):
        sp, sq = compose_arrays(q.v_p[k], q.v_q[k], d.p, d.q)
        dist = np.linalg.norm(sp - q.s_p[k], axis=1) + (1 - np.abs(sq @ q.s_q[k]))
        assert dist.min() < 1e-9


def _cube_symmetric_error(s: Pose, target: Pose, centre: Pose):
    """Smallest (distance, angle) between ``s`` and ``target`` over the cube's four yaw symmetries."""
    best = (np.inf, np.inf)
    for k in range(4):
        rot = compose(centre, compose(Pose([0, 0, 0], qyaw(k * math.pi / 2)), inverse(centre)))
        t = compose(rot, target)
        err = (float(np.linalg.norm(s.p - t.p)), math.degrees(float(qangle(s.q, t.q))))
        if err[0] + err[1] / 500 < best[0] + best[1] / 500:
            best = err
    return best


def test_self_query_reproduces_training_contact(cube_scene, front_model):
    """Querying the training cube with its own model.

    The weights only compare curvature, so every flat face scores alike and
    some top particles put the link on the top face.  The top particles still
    contain the training contact, and every feasible sample faces the way the
    training link did (up to the cube's symmetry).
    """
    pose, cloud, fs = cube_scene
    lp, model = front_model
    q = build_query_density(model, fs, K_Q=1000, rng=np.random.default_rng(2))
    top = np.argsort(-q.weights, kind="stable")[:50]
    errs = [_cube_symmetric_error(Pose(q.s_p[i], q.s_q[i]), lp, pose) for i in top]
    assert min(d for d, a in errs if a < 10) < 0.02
    rng = np.random.default_rng(3)
    angles = []
    for _ in range(20):
        s = sample_feasible_link_pose(q, cloud, rng)
        angles.append(_cube_symmetric_error(s, lp, pose)[1])
        # on a face plane: the link origin sits half a side behind the centre along its pushing axis
        local = relative_pose(pose, s)
        assert -local.p @ qto_matrix(local.q)[:, 0] == pytest.approx(0.1, abs=0.05)
    # sampled orientations carry the kernel's own spread (about 10 degrees at kappa = 100)
    assert np.median(angles) < 10
    assert max(angles) < 30


def test_mismatched_curvature_gives_flat_weights(rng):
    # model from a small sphere (r ≈ 20 1/m), queried on a plane (r = 0 everywhere)
    v = rng.standard_normal((int(4 * math.pi * 0.05**2 * 1e4), 3))
    sphere = 0.05 * v / np.linalg.norm(v, axis=1, keepdims=True)
    sf = build_feature_set(sphere)
    model = ContactModel(ParticleDensity("feature", np.zeros((len(sf), 3)), sf.q, None, Bandwidths(), r=sf.r),
                         ROBOT_OBJECT, 0.01)
    g = np.arange(30) * 0.01
    x, y = np.meshgrid(g, g)
    plane = build_feature_set(np.c_[x.ravel(), y.ravel(), np.zeros(900)])
    q = build_query_density(model, plane, K_Q=500, rng=rng)
    assert q.weights.max() < 10 * q.weights.min()


def test_errors(cube_scene, front_model):
    with pytest.raises(EmptyFeatures):
        build_query_density(front_model[1], FeatureSet(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2))))
    with pytest.raises(EmptyModel):
        build_query_density(None, cube_scene[2])
    with pytest.raises(ValueError):
        build_query_density(front_model[1], cube_scene[2], K_Q=0)


def test_zero_bandwidth_samples_are_particles(cube_scene, front_model):
    q = build_query_density(front_model[1], cube_scene[2], K_Q=30, rng=np.random.default_rng(3))
    q.bandwidths = Bandwidths(1e-15, 1e15, 1e-15)
    P, Q = sample_link_poses(q, np.random.default_rng(4), 20)
    for p, qq in zip(P, Q):
        k = np.argmin(np.linalg.norm(q.s_p - p, axis=1))
        assert np.linalg.norm(q.s_p[k] - p) < 1e-9
        assert abs(abs(q.s_q[k] @ qq) - 1) < 1e-9


def test_link_samples_lie_on_cube_faces(cube_scene, front_model):
    pose, _, fs = cube_scene
    q = build_query_density(front_model[1], fs, rng=np.random.default_rng(5))
    rng = np.random.default_rng(6)
    local = [inverse(pose).transform_points(sample_link_pose(q, rng).p[None])[0] for _ in range(100)]
    off_plane = np.min(np.abs(np.abs(np.array(local)) - 0.1), axis=1)
    assert np.sum(off_plane < 0.05) >= 90


def test_link_sampling_is_deterministic(cube_scene, front_model):
    q = build_query_density(front_model[1], cube_scene[2], rng=np.random.default_rng(5))
    a = sample_link_pose(q, np.random.default_rng(8))
    b = sample_link_pose(q, np.random.default_rng(8))
    assert a.allclose(b, atol=0)


def test_select_frame_single_particle(cube_scene, front_model):
    q = build_query_density(front_model[1], cube_scene[2], K_Q=1, rng=np.random.default_rng(0))
    frame, _ = select_contact_frame(q, AnnealSchedule(50), np.random.default_rng(1))
    np.testing.assert_allclose(frame.v.p, q.v_p[0])
    assert abs(abs(frame.v.q @ q.v_q[0]) - 1) < 1e-12
    np.testing.assert_array_equal(frame.r, q.r[0])
    # u is the link pose seen from the frame
    assert compose(frame.v, frame.u).allclose(Pose(q.s_p[0], q.s_q[0]), atol=1e-12)


def test_select_frame_beats_particle_centres(cube_scene, front_model):
    q = build_query_density(front_model[1], cube_scene[2], K_Q=200, rng=np.random.default_rng(9))
    frame, score = select_contact_frame(q, AnnealSchedule(100), np.random.default_rng(10))
    centre_scores = [frame_log_density(q, Pose(p, qq)) for p, qq in zip(q.v_p, q.v_q)]
    assert score >= max(centre_scores) - 1e-9
    assert frame_log_density(q, frame.v) == pytest.approx(score, abs=1e-9)


def test_select_frame_is_stable_across_seeds(cube_scene, front_model):
    q = build_query_density(front_model[1], cube_scene[2], K_Q=200, rng=np.random.default_rng(9))
    vals = [math.exp(select_contact_frame(q, AnnealSchedule(100), np.random.default_rng(s))[1]) for s in range(5)]
    assert (max(vals) - min(vals)) / max(vals) < 0.05


def test_select_frame_near_link(cube_scene, front_model):
    lp, model = front_model
    q = build_query_density(model, cube_scene[2], K_Q=1000, rng=np.random.default_rng(11))
    frame, _ = select_contact_frame(q, AnnealSchedule(60), np.random.default_rng(12), link_pose=lp, smoothing=4)
    assert np.linalg.norm(frame.v.p - lp.p) < 0.03
    assert relative_pose(frame.v, lp).allclose(frame.u, atol=1e-12)


def test_env_frames(cube_scene, env_model):
    q = build_query_density(env_model, cube_scene[2], rng=np.random.default_rng(13))
    assert sample_env_frames(q, 0, np.random.default_rng(0)) == []
    for n in (3, 5):
        frames = sample_env_frames(q, n, np.random.default_rng(14))
        assert len(frames) == n
        for f in frames:
            assert isinstance(f, ContactFrame)
            assert f.v.p[2] < 0.05
            z = compose(f.v, f.u)
            assert abs(z.p[2]) < 1e-12
            np.testing.assert_allclose(z.p[:2], f.v.p[:2], atol=1e-12)


def test_environment_query_particles_touch_ground(cube_scene, env_model):
    q = build_query_density(env_model, cube_scene[2], rng=np.random.default_rng(15))
    live = q.weights > 0
    assert np.all(np.abs(q.s_p[live, 2]) < env_model.cutoff)


def test_frame_invariance(cube_scene, front_model):
    _, model = front_model
    fs = cube_scene[2]
    T = Pose([0.4, -0.3, 0.0], qfrom_axis_angle([0, 0, 1], 0.8))
    a = build_query_density(model, fs, rng=np.random.default_rng(16))
    b = build_query_density(model, fs.transformed(T), rng=np.random.default_rng(16))
    np.testing.assert_allclose(b.s_p, T.transform_points(a.s_p), atol=1e-12)
    np.testing.assert_allclose(b.v_p, T.transform_points(a.v_p), atol=1e-12)
    np.testing.assert_allclose(b.weights, a.weights, atol=1e-12)


def test_feasible_link_pose(cube_scene, front_model):
    _, cloud, fs = cube_scene
    q = build_query_density(front_model[1], fs, rng=np.random.default_rng(17))
    rng = np.random.default_rng(18)
    feas = Feasibility()
    for _ in range(10):
        lp = sample_feasible_link_pose(q, cloud, rng, feas)
        assert lp.p[2] == pytest.approx(0.06)
        R = qto_matrix(lp.q)
        assert abs(R[2, 0]) < 1e-12 and R[2, 2] == pytest.approx(1.0)
        # the plate touches the cloud and does not cut into it
        rel = cloud.points - lp.p
        band = (np.abs(rel[:, 2]) <= 0.05) & (np.abs(rel @ R[:, 1]) <= 0.15)
        assert (rel[band] @ R[:, 0]).min() == pytest.approx(0.0, abs=1e-12)


def test_infeasible_query(front_model, cube_scene):
    q = build_query_density(front_model[1], cube_scene[2], rng=np.random.default_rng(19))
    far_cloud = np.array([[10.0, 10.0, 0.06]])
    with pytest.raises(InfeasibleQuery):
        sample_feasible_link_pose(q, far_cloud, np.random.default_rng(0), Feasibility(max_tries=5))


def test_tilted_poses_rejected():
    feas = Feasibility()
    pts = np.array([[0.03, 0.0, 0.06]])
    assert feas.check(np.array([0, 0, 0.06]), IDENTITY_Q, pts) is not None
    tilted = qfrom_axis_angle([0, 1, 0], math.radians(40))
    assert feas.check(np.array([0, 0, 0.06]), tilted, pts) is None


def test_json_round_trip(cube_scene, front_model):
    q = build_query_density(front_model[1], cube_scene[2], K_Q=20, rng=np.random.default_rng(20))
    q2 = QueryDensity.from_dict(json.loads(q.to_json()))
    assert q2.to_json() == q.to_json()
