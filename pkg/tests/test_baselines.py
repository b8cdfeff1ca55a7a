import numpy as np
import pytest

from latentflow.baselines import (
    OTSizeError,
    direct_pde_fit,
    exact_ot_cost,
    grid_points,
    ot_interpolate,
    prepare_measure,
    sinkhorn,
    splat,
)
from latentflow.checks import blob_pair, ot_instance
from latentflow.data import ImagePair, make_synthetic, scan_patches
from latentflow.networks import EncoderConfig, ModelBundle, decoder_config, field_config
from latentflow.training import LossWeights, OptimizerState, metrics_csv, train


def northwest_corner_cost(a, b, x):
    """Exact 1D transport cost for a convex ground cost: couple sorted supports greedily."""
    a, b = a.copy(), b.copy()
    i = j = 0
    cost = 0.0
    while i < a.size and j < b.size:
        m = min(a[i], b[j])
        cost += m * (x[i] - x[j]) ** 2
        a[i] -= m
        b[j] -= m
        if a[i] <= b[j]:
            i += 1
        else:
            j += 1
    return cost


def centroid(img):
    H, W = img.shape
    yy, xx = np.mgrid[0:H, 0:W]
    return np.array([(img * xx).sum(), (img * yy).sum()]) / img.sum()


# --- measures and Sinkhorn ------------------------------------------------------

def test_prepare_measure_floors_and_normalizes():
    mu = prepare_measure(np.array([0.0, 2.0, 2.0]))
    assert mu.sum() == pytest.approx(1.0) and mu.min() > 0
    for bad in ([0.0, 0.0], [1.0, -1.0, 1.0], [np.nan, 1.0]):
        with pytest.raises(ValueError, match="normalizable"):
            prepare_measure(np.array(bad))


def test_identical_measures_cost_vanishes():
    mu = np.random.default_rng(0).uniform(size=(8, 8))
    tp = sinkhorn(mu, mu, 1e-3)
    assert tp.cost < 1e-3
    assert np.all(tp.plan >= 0)
    assert np.trace(tp.plan) / tp.plan.sum() > 0.5


def test_two_point_transport_costs_one():
    mu1 = np.zeros(8)
    mu2 = np.zeros(8)
    mu1[0], mu2[-1] = 1.0, 1.0
    tp = sinkhorn(mu1, mu2, 1e-3)
    assert tp.cost == pytest.approx(1.0, abs=1e-3)
    assert tp.plan[0, -1] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lp_oracle_matches_1d_closed_form(seed):
    rng = np.random.default_rng(seed)
    n = 12
    a = prepare_measure(rng.uniform(size=n))
    b = prepare_measure(rng.uniform(size=n))
    cost, plan = exact_ot_cost(a, b)
    assert cost == pytest.approx(northwest_corner_cost(a, b, np.linspace(0, 1, n)), abs=1e-10)
    np.testing.assert_allclose(plan.sum(axis=1), a, atol=1e-9)


@pytest.mark.parametrize("eps", [1e-1, 2e-2, 5e-3, 1e-3])
def test_marginals_and_monotone_dual(eps):
    mu1, mu2 = ot_instance(3, size=8)
    tp = sinkhorn(mu1, mu2, eps, tol=1e-9)
    assert tp.converged
    assert np.abs(tp.row_sums() - tp.mu1).max() <= 1e-6
    assert np.abs(tp.col_sums() - tp.mu2).max() <= 1e-6
    assert np.all(np.diff(tp.dual_trace) >= -1e-12)


def test_both_domains_agree():
    mu1, mu2 = ot_instance(4, size=6)
    plain = sinkhorn(mu1, mu2, 2e-2, tol=1e-10, log_domain=False)
    logd = sinkhorn(mu1, mu2, 2e-2, tol=1e-10, log_domain=True)
    np.testing.assert_allclose(plain.plan, logd.plan, atol=1e-9)
    assert plain.cost == pytest.approx(logd.cost, rel=1e-7)


def test_entropic_cost_approaches_lp_as_eps_shrinks():
    mu1, mu2 = blob_pair(size=8, shift=3, sigma=1.0)
    lp, _ = exact_ot_cost(mu1, mu2)
    gaps = [abs(sinkhorn(mu1, mu2, eps, tol=1e-9).cost - lp) / lp for eps in (1e-2, 3e-3, 1e-3)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 0.02


def test_non_convergence_is_flagged():
    mu1, mu2 = ot_instance(0, size=8)
    tp = sinkhorn(mu1, mu2, 1e-3, max_iter=3, check_every=1)
    assert not tp.converged and tp.n_iter == 3


# --- interpolation ---------------------------------------------------------------

def test_splat_conserves_mass_and_hits_nodes(rng):
    pts = rng.uniform(size=(50, 2))
    mass = rng.uniform(size=50)
    assert splat(pts, mass, 7, 9).sum() == pytest.approx(mass.sum())
    node = splat(grid_points(5, 5)[[12]], np.array([1.0]), 5, 5)
    assert node[2, 2] == 1.0 and node.sum() == 1.0


def test_interpolation_endpoints_and_mass():
    x0, x1 = blob_pair(size=12, shift=3)
    out = ot_interpolate(ImagePair(x0, x1), 6, epsilon=2e-3)
    tp = out.transport
    assert out.frames.shape == (7, 12, 12, 1)
    assert np.abs(out.densities[0].ravel() - tp.mu1).sum() / 2 <= 1e-3
    assert np.abs(out.densities[-1].ravel() - tp.mu2).sum() / 2 <= 1e-3
    np.testing.assert_allclose(out.densities.sum(axis=(1, 2)), 1.0, atol=1e-6)
    assert out.densities.min() >= 0
    assert out.method == "barycentric displacement interpolation"


@pytest.mark.parametrize("shift", [2, 4, 6])
def test_midpoint_centroid(shift):
    x0, x1 = blob_pair(size=16, shift=shift)
    out = ot_interpolate(ImagePair(x0, x1), 2, epsilon=2e-3)
    mid = centroid(out.densities[1])
    assert np.all(np.abs(mid - (centroid(x0) + centroid(x1)) / 2) <= 1.0)


def test_negative_intensities_are_shifted():
    x0, x1 = blob_pair(size=8, shift=2)
    out = ot_interpolate(ImagePair(x0 - 0.5, x1 - 0.5), 2)
    assert out.densities.min() >= 0


def test_size_cap_and_bad_steps():
    big = ImagePair(np.ones((65, 64)), np.ones((65, 64)))
    with pytest.raises(OTSizeError, match="64x64"):
        ot_interpolate(big, 4)
    with pytest.raises(ValueError):
        ot_interpolate(ImagePair(np.ones((4, 4)), np.ones((4, 4))), 0)


# --- direct image-space fit --------------------------------------------------------

def small_field_cfg(n):
    return field_config(1, n, (4, 4, 4), 4, 4, 4)


def test_direct_fit_equals_identity_trainer():
    pair = make_synthetic("translation", 32, 32, 3, seed=1).pair()
    weights = LossWeights(1.0, 0.01, 0.01)
    fit = direct_pde_fit(pair, (16, 16), (8, 8), n_evolution=3, weights=weights, opt=OptimizerState(1e-3),
                         iterations=25, batch_size=2, seed=4, field_cfg=small_field_cfg(3), log_every=1)
    main = ModelBundle(EncoderConfig(), decoder_config(1), small_field_cfg(3), 3, 0.1, 4, identity_codecs=True,
                       patch=(16, 16))
    _, rows = train(scan_patches(pair, 16, 16, 8, 8), main, OptimizerState(1e-3), LossWeights(0.0, 0.01, 0.01), 25,
                    2, 4, 1)
    assert metrics_csv(fit.rows) == metrics_csv(rows)
    for p, q in zip(fit.bundle.parameters(), main.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    assert fit.result.method == "direct image-space advection"
    assert fit.result.frames.shape == (4, 32, 32, 1)


def test_direct_fit_shrinks_fields_on_identical_images():
    img = make_synthetic("translation", 16, 16, 2, seed=0).x0
    fit = direct_pde_fit(ImagePair(img, img), (16, 16), n_evolution=2, opt=OptimizerState(3e-3), iterations=40,
                         batch_size=1, field_cfg=small_field_cfg(2), log_every=39)
    assert fit.rows[-1][4] < 0.2 * fit.rows[0][4]
