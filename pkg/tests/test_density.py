import math

import numpy as np
import pytest
from scipy import integrate, stats

from pushxfer.density import (
    Bandwidths,
    ParticleDensity,
    eval_density,
    eval_feature_kernel,
    eval_gaussian,
    eval_motion_kernel,
    eval_theta,
    log_eval_density,
    log_feature_kernel,
    sample_density,
    sample_vmf_quaternion,
)
from pushxfer.errors import KindMismatch, NonPositiveBandwidth, NonUnitQuaternion
from pushxfer.features import SurfaceFeature
from pushxfer.geom import Pose, RigidMotion, qyaw, random_quaternion


def theta_brute(q, mu, kappa):
    # S^3 von Mises-Fisher normaliser kappa / (4 pi^2 I1(kappa)), written out directly
    from scipy.special import iv

    c = kappa / (4 * math.pi**2 * iv(1, kappa))
    d = float(np.dot(q, mu))
    return c * (math.exp(kappa * d) + math.exp(-kappa * d)) / 2


def gauss_brute(x, mu, s):
    x, mu = np.atleast_1d(x), np.atleast_1d(mu)
    n = len(x)
    return (2 * math.pi * s * s) ** (-n / 2) * math.exp(-float(np.sum((x - mu) ** 2)) / (2 * s * s))


def feature_brute(x, mu, bw):
    return (gauss_brute(x.v.p, mu.v.p, bw.sigma_p) * theta_brute(x.v.q, mu.v.q, bw.sigma_q)
            * gauss_brute(x.r, mu.r, bw.sigma_r))


def test_gaussian_constant():
    assert eval_gaussian(0.0, 0.0, 1.0) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-15)
    peak = eval_gaussian([0.0], [0.0], 0.3)
    assert eval_gaussian([0.3], [0.0], 0.3) == pytest.approx(peak * math.exp(-0.5), rel=1e-14)
    a, b = np.array([0.1, 0.2]), np.array([-0.3, 0.5])
    assert eval_gaussian(a, b, 0.2) == eval_gaussian(b, a, 0.2)
    with pytest.raises(NonPositiveBandwidth):
        eval_gaussian(0.0, 0.0, 0.0)


def test_theta_antipodal_and_peak(rng):
    mu = random_quaternion(rng)
    q = random_quaternion(rng)
    assert eval_theta(q, mu, 5.0) == pytest.approx(eval_theta(-q, mu, 5.0), rel=1e-14)
    peak = eval_theta(mu, mu, 5.0)
    assert peak == pytest.approx(eval_theta(-mu, mu, 5.0), rel=1e-14)
    others = [eval_theta(random_quaternion(rng), mu, 5.0) for _ in range(200)]
    assert max(others) < peak
    assert eval_theta(q, mu, 7.0) == pytest.approx(theta_brute(q, mu, 7.0), rel=1e-12)


def test_theta_large_kappa_is_finite():
    mu = np.array([1.0, 0, 0, 0])
    v = eval_theta(mu, mu, 1e4)
    assert np.isfinite(v) and v > 0


def test_theta_rejects_non_unit():
    with pytest.raises(NonUnitQuaternion):
        eval_theta(np.array([1.0, 1, 0, 0]), np.array([1.0, 0, 0, 0]), 1.0)


def test_theta_monte_carlo_normalisation():
    rng = np.random.default_rng(0)
    q = random_quaternion(rng, size=400_000)
    mu = np.array([1.0, 0, 0, 0])
    vals = eval_theta(q, mu, 5.0)
    # uniform draws on S^3, whose area is 2 pi^2
    assert vals.mean() * 2 * math.pi**2 == pytest.approx(1.0, abs=0.02)


def _feature(rng, spread=0.02):
    return SurfaceFeature(Pose(spread * rng.standard_normal(3), random_quaternion(rng)), rng.standard_normal(2))


def test_feature_kernel_factorises(rng):
    bw = Bandwidths(0.05, 2.0, 1.5)
    x, mu = _feature(rng), _feature(rng)
    assert eval_feature_kernel(x, mu, bw) == pytest.approx(feature_brute(x, mu, bw), rel=1e-12)
    flipped = SurfaceFeature(Pose(x.v.p, x.v.q), x.r)
    object.__setattr__(flipped.v, "q", -x.v.q)  # bypass canonicalisation on purpose
    assert eval_feature_kernel(flipped, mu, bw) == pytest.approx(eval_feature_kernel(x, mu, bw), rel=1e-12)
    assert eval_feature_kernel(mu, mu, bw) > eval_feature_kernel(x, mu, bw)


def test_motion_kernel_translation_ratio():
    bw = Bandwidths(sigma_mp=0.02, sigma_mq=200.0)
    mu = RigidMotion([0.1, 0.0, 0.0], qyaw(0.1))
    d = 0.013
    shifted = RigidMotion(mu.p + [0.0, d, 0.0], mu.q)
    ratio = eval_motion_kernel(shifted, mu, bw) / eval_motion_kernel(mu, mu, bw)
    assert ratio == pytest.approx(math.exp(-d * d / (2 * 0.02**2)), rel=1e-12)
    flipped = RigidMotion(mu.p, mu.q)
    object.__setattr__(flipped, "q", -mu.q)
    assert eval_motion_kernel(flipped, mu, bw) == pytest.approx(eval_motion_kernel(mu, mu, bw), rel=1e-12)


def test_density_matches_brute_force(rng):
    bw = Bandwidths(0.03, 3.0, 2.0)
    parts = [_feature(rng) for _ in range(100)]
    w = rng.uniform(0.1, 1.0, 100)
    d = ParticleDensity("feature", [f.v.p for f in parts], [f.v.q for f in parts], w, bw, r=[f.r for f in parts])
    for _ in range(5):
        x = _feature(rng)
        brute = sum(wj / w.sum() * feature_brute(x, f, bw) for wj, f in zip(w, parts))
        assert eval_density(d, x) == pytest.approx(brute, rel=1e-12)
        assert log_eval_density(d, x) == pytest.approx(math.log(brute), abs=1e-9)


def test_single_and_duplicate_particles(rng):
    bw = Bandwidths()
    f = _feature(rng)
    one = ParticleDensity("feature", [f.v.p], [f.v.q], None, bw, r=[f.r])
    two = ParticleDensity("feature", [f.v.p] * 2, [f.v.q] * 2, [1, 1], bw, r=[f.r] * 2)
    assert eval_density(one, f) == pytest.approx(eval_feature_kernel(f, f, bw), rel=1e-12)
    assert eval_density(two, f) == pytest.approx(eval_density(one, f), rel=1e-12)


def test_mixture_is_linear_in_weights(rng):
    bw = Bandwidths(0.03, 3.0, 2.0)

    def dens(n):
        fs = [_feature(rng) for _ in range(n)]
        return ParticleDensity("feature", [f.v.p for f in fs], [f.v.q for f in fs], None, bw, r=[f.r for f in fs])

    a, b = dens(10), dens(7)
    x = _feature(rng)
    mix = a.mixture(b, 0.3)
    assert eval_density(mix, x) == pytest.approx(0.3 * eval_density(a, x) + 0.7 * eval_density(b, x), rel=1e-12)


def test_log_kernel_is_sum_of_factor_logs(rng):
    bw = Bandwidths(0.03, 3.0, 2.0)
    x, mu = _feature(rng), _feature(rng)
    parts = (math.log(gauss_brute(x.v.p, mu.v.p, bw.sigma_p)) + math.log(theta_brute(x.v.q, mu.v.q, bw.sigma_q))
             + math.log(gauss_brute(x.r, mu.r, bw.sigma_r)))
    assert log_feature_kernel(x, mu, bw) == pytest.approx(parts, abs=1e-9)


def test_kind_mismatch(rng):
    d = ParticleDensity("motion", [[0, 0, 0]], [[1, 0, 0, 0]])
    with pytest.raises(KindMismatch):
        eval_density(d, _feature(rng))


def test_sampling_selection_frequencies():
    rng = np.random.default_rng(1)
    w = np.array([0.1, 0.2, 0.3, 0.4])
    d = ParticleDensity("motion", np.zeros((4, 3)), np.tile([1.0, 0, 0, 0], (4, 1)), w)
    n = 10_000
    idx = sample_density(d, rng, size=n)["index"]
    counts = np.bincount(idx, minlength=4)
    sd = np.sqrt(n * w * (1 - w))
    assert np.all(np.abs(counts - n * w) < 3 * sd)


def test_sampling_small_bandwidth_returns_centres():
    rng = np.random.default_rng(2)
    bw = Bandwidths(1e-12, 1e12, 1e-12, 1e-12, 1e12)
    p = rng.uniform(size=(5, 3))
    q = random_quaternion(rng, size=5)
    d = ParticleDensity("feature", p, q, None, bw, r=rng.uniform(size=(5, 2)))
    s = sample_density(d, rng, size=50)
    np.testing.assert_allclose(s["p"], d.p[s["index"]], atol=1e-9)
    dots = np.abs(np.einsum("ni,ni->n", s["q"], d.q[s["index"]]))
    assert np.all(dots > 1 - 1e-9)


def test_sampling_is_deterministic_per_seed(rng):
    d = ParticleDensity("motion", rng.uniform(size=(6, 3)), random_quaternion(rng, size=6))
    a = sample_density(d, np.random.default_rng(9), size=20)
    b = sample_density(d, np.random.default_rng(9), size=20)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


@pytest.mark.parametrize("kappa", [2.0, 50.0])
def test_vmf_sampler_matches_marginal(kappa):
    # draws come from the antipodal pair, so |t| = |mu.q| has density ∝ cosh(kappa t) sqrt(1 - t^2) on [0, 1]
    rng = np.random.default_rng(3)
    mu = np.array([1.0, 0, 0, 0])
    q = sample_vmf_quaternion(np.tile(mu, (4000, 1)), kappa, rng)
    t = np.abs(q @ mu)
    f = lambda s: math.cosh(kappa * s) * math.exp(-kappa) * math.sqrt(max(1 - s * s, 0.0))  # noqa: E731
    Z = integrate.quad(f, 0, 1, limit=200)[0]
    cdf = np.vectorize(lambda x: integrate.quad(f, 0, x, limit=200)[0] / Z)
    assert stats.kstest(t, cdf).pvalue > 0.001


def test_json_round_trip(rng):
    d = ParticleDensity("joint", rng.uniform(size=(3, 3)), random_quaternion(rng, size=3), [1, 2, 3],
                        Bandwidths(0.02, 50, 5, 0.03, 100), r=rng.uniform(size=(3, 2)),
                        mp=rng.uniform(size=(3, 3)), mq=random_quaternion(rng, size=3))
    e = ParticleDensity.from_json(d.to_json())
    assert e.to_json() == d.to_json()
    assert e.bandwidths == d.bandwidths
