import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from ergmsbi.flow import (
    ALPHA_BOUND,
    AdamState,
    MafModel,
    Standardizer,
    adam_step,
    made_masks,
    nll_grad,
)

LOG_2PI = math.log(2 * math.pi)


def randomize(model, rng, scale=0.5):
    for k in model.params:
        model.params[k] = rng.normal(0.0, scale, model.params[k].shape)
    return model


def random_standardizer(p, c, rng):
    return Standardizer(rng.normal(size=p), rng.uniform(0.5, 2.0, p), rng.normal(size=c), rng.uniform(0.5, 2.0, c))


def finite_difference_nll_check(model, thetas, xs, step=1e-5):
    """Worst relative disagreement between analytic and central-difference gradients."""
    _, grads = nll_grad(model, thetas, xs)
    worst = 0.0
    for name, value in model.params.items():
        for idx in np.ndindex(value.shape):
            old = value[idx]
            value[idx] = old + step
            up = nll_grad(model, thetas, xs)[0]
            value[idx] = old - step
            down = nll_grad(model, thetas, xs)[0]
            value[idx] = old
            fd = (up - down) / (2 * step)
            an = grads[name][idx]
            scale = max(abs(fd), abs(an))
            if scale > 1e-6:
                worst = max(worst, abs(fd - an) / scale)
            else:
                worst = max(worst, abs(fd - an))
    return worst


# -- masks -------------------------------------------------------------------


def test_masks_p1_context_only():
    masks = made_masks(1, 6, 2)
    assert not masks[0].any()  # no parameter input reaches any hidden unit
    assert masks[-1].all()


def test_masks_binary_and_connectivity_strictly_lower():
    for p in (1, 2, 3, 5):
        masks = made_masks(p, 10, 3, np.random.default_rng(p))
        assert all(m.dtype == bool for m in masks)
        reach = masks[0].astype(int)
        for m in masks[1:]:
            reach = m.astype(int) @ reach
        # output i may depend on parameter input j only when j < i
        assert not np.any(np.triu(reach) > 0)


def test_autoregressive_perturbation(rng):
    p = 3
    model = randomize(MafModel(p, 2, num_transforms=2, hidden_units=12, hidden_layers=2, seed=3), rng)
    u = rng.normal(size=(1, p))
    x = rng.normal(size=(1, 2))
    for t in range(model.num_transforms):
        mu0, a0 = model.made_outputs(t, u, x)
        for j in range(p):
            moved = u.copy()
            moved[0, j] += 1.7
            mu1, a1 = model.made_outputs(t, moved, x)
            for i in range(j + 1):
                assert mu1[0, i] == mu0[0, i] and a1[0, i] == a0[0, i]
            if j < p - 1:
                assert not np.allclose(mu1[0, j + 1 :], mu0[0, j + 1 :])


# -- forward / log_prob -----------------------------------------------------------


def test_identity_forward():
    model = MafModel(3, 2, seed=0)
    theta = np.array([[0.3, -1.2, 2.0]])
    z, logdet = model.forward(theta, [[1.0, 2.0]])
    np.testing.assert_array_equal(z, theta)
    assert logdet[0] == 0.0
    assert model.log_prob(np.zeros((1, 3)), [[0.0, 0.0]])[0] == pytest.approx(-1.5 * LOG_2PI, abs=1e-12)
    assert -1.5 * LOG_2PI == pytest.approx(-2.756815, abs=1e-6)


def test_constant_affine_transform():
    model = MafModel(1, 1, num_transforms=1, hidden_units=4, hidden_layers=1, seed=0)
    model.params["0.bm"][:] = 2.0
    model.params["0.ba"][:] = ALPHA_BOUND * math.atanh(math.log(3) / ALPHA_BOUND)
    theta = np.array([[5.0], [-1.0]])
    z, logdet = model.forward(theta, [[0.4]])
    np.testing.assert_allclose(z, (theta - 2.0) / 3.0, atol=1e-12)
    np.testing.assert_allclose(logdet, -math.log(3), atol=1e-12)


def test_non_finite_input_rejected():
    model = MafModel(2, 1, seed=0)
    with pytest.raises(ValueError):
        model.log_prob([[np.nan, 0.0]], [[0.0]])
    with pytest.raises(ValueError):
        model.log_prob([[0.0, 0.0, 0.0]], [[0.0]])


def test_logdet_matches_numerical_jacobian(rng):
    for trial in range(5):
        p = 3
        model = randomize(MafModel(p, 2, num_transforms=3, hidden_units=10, hidden_layers=2, seed=trial,
                                   standardizer=random_standardizer(p, 2, rng)), rng, 0.4)
        theta = rng.normal(size=p)
        x = rng.normal(size=(1, 2))
        z0, logdet = model.forward(theta[None], x)
        jac = np.zeros((p, p))
        h = 1e-6
        for j in range(p):
            e = np.zeros(p)
            e[j] = h
            jac[:, j] = (model.forward((theta + e)[None], x)[0][0] - model.forward((theta - e)[None], x)[0][0]) / (2 * h)
        _, numeric = np.linalg.slogdet(jac)
        expected = logdet[0] - np.log(model.standardizer.theta_sd).sum()
        assert numeric == pytest.approx(expected, abs=1e-5)


def test_change_of_variables_recomputation(rng):
    """log_prob equals a step-by-step recomputation with explicit permutations."""
    p, c = 3, 2
    model = randomize(MafModel(p, c, num_transforms=3, hidden_units=9, hidden_layers=2, seed=4,
                               standardizer=random_standardizer(p, c, rng)), rng, 0.4)
    thetas = rng.normal(size=(1000, p))
    xs = rng.normal(size=(1000, c))
    s = model.standardizer
    u = (thetas - s.theta_mean) / s.theta_sd
    xs_std = (xs - s.x_mean) / s.x_sd
    total = np.zeros(len(u))
    perm = np.arange(p)[::-1]
    for t in range(model.num_transforms):
        if t:
            u = u[:, perm]
        mu, alpha = model.made_outputs(t, u, xs_std)
        u = (u - mu) * np.exp(-alpha)
        total -= alpha.sum(axis=1)
    expected = -0.5 * (u**2).sum(axis=1) - 0.5 * p * LOG_2PI + total - np.log(s.theta_sd).sum()
    np.testing.assert_allclose(model.log_prob(thetas, xs), expected, rtol=0, atol=1e-10)


def test_one_dimensional_density_integrates_to_one(rng):
    for trial in range(3):
        model = randomize(MafModel(1, 1, num_transforms=3, hidden_units=8, hidden_layers=2, seed=trial), rng, 0.2)
        grid = np.linspace(-10, 10, 40001)
        dens = np.exp(model.log_prob(grid[:, None], [[0.3 * trial]]))
        assert trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)
    # heavy-tailed model: still normalised once the window covers its mass
    model = randomize(MafModel(1, 1, num_transforms=3, hidden_units=8, hidden_layers=2, seed=5), rng, 0.6)
    grid = np.linspace(-3000, 3000, 3_000_001)
    assert trapezoid(np.exp(model.log_prob(grid[:, None], [[0.3]])), grid) == pytest.approx(1.0, abs=1e-3)


# -- sampling -----------------------------------------------------------------------


def test_identity_samples_standard_normal():
    model = MafModel(2, 1, seed=0)
    draws = model.sample([0.0], 100_000, np.random.default_rng(5))
    assert np.all(np.abs(draws.mean(axis=0)) < 0.02)
    assert np.all(np.abs(draws.std(axis=0) - 1) < 0.02)


def test_sample_round_trip_and_determinism(rng):
    model = randomize(MafModel(3, 2, num_transforms=4, hidden_units=10, hidden_layers=2, seed=2,
                               standardizer=random_standardizer(3, 2, rng)), rng, 0.4)
    x = rng.normal(size=(1, 2))
    z = np.random.default_rng(9).standard_normal((500, 3))
    draws = model.sample(x, 500, np.random.default_rng(9))
    back, _ = model.forward(draws, x)
    assert np.max(np.abs(back - z)) < 1e-8
    np.testing.assert_array_equal(draws, model.sample(x, 500, np.random.default_rng(9)))
    with pytest.raises(ValueError):
        model.sample(x, 0, rng)


# -- gradients and optimiser ----------------------------------------------------------


def test_nll_gradients_match_finite_differences(rng):
    model = randomize(MafModel(2, 1, num_transforms=2, hidden_units=8, hidden_layers=2, seed=1,
                               standardizer=random_standardizer(2, 1, rng)), rng, 0.5)
    thetas = rng.normal(size=(7, 2))
    xs = rng.normal(size=(7, 1))
    assert finite_difference_nll_check(model, thetas, xs) < 1e-3


def test_nll_duplicate_rows_and_identity_value(rng):
    model = randomize(MafModel(2, 1, num_transforms=2, hidden_units=6, hidden_layers=1, seed=1), rng)
    thetas = rng.normal(size=(5, 2))
    xs = rng.normal(size=(5, 1))
    loss, _ = nll_grad(model, thetas, xs)
    loss2, _ = nll_grad(model, np.vstack([thetas, thetas]), np.vstack([xs, xs]))
    assert loss2 == pytest.approx(loss, rel=1e-12)

    ident = MafModel(2, 1, seed=0)
    loss, _ = nll_grad(ident, thetas, xs)
    expected = np.mean(0.5 * (thetas**2).sum(axis=1) + LOG_2PI)
    assert loss == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        nll_grad(ident, np.zeros((0, 2)), np.zeros((0, 1)))


def test_adam_zero_gradient_and_first_step():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState(params, lr=0.01)
    adam_step(state, params, {"w": np.zeros(3)})
    np.testing.assert_array_equal(params["w"], [1.0, -2.0, 3.0])

    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState(params, lr=0.01)
    g = np.array([0.5, -4.0, 1e-3])
    adam_step(state, params, {"w": g})
    np.testing.assert_allclose(params["w"], [1.0, -2.0, 3.0] - 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_determinism_and_shape_errors():
    def run():
        params = {"w": np.ones(4)}
        state = AdamState(params, lr=0.1)
        for k in range(10):
            state.step(params, {"w": np.sin(params["w"] * (k + 1))})
        return params["w"]

    np.testing.assert_array_equal(run(), run())
    params = {"w": np.ones(4)}
    with pytest.raises(ValueError):
        AdamState(params).step(params, {"w": np.ones(3)})
    with pytest.raises(ValueError):
        AdamState(params).step(params, {"v": np.ones(4)})


# -- persistence ---------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    model = randomize(MafModel(3, 3, num_transforms=2, hidden_units=7, hidden_layers=2, seed=11,
                               standardizer=random_standardizer(3, 3, rng)), rng)
    path = tmp_path / "ckpt.json"
    model.save(path)
    back = MafModel.load(path)
    probes = rng.normal(size=(50, 3))
    xs = rng.normal(size=(50, 3))
    np.testing.assert_array_equal(back.log_prob(probes, xs), model.log_prob(probes, xs))
    for k in model.params:
        np.testing.assert_array_equal(back.params[k], model.params[k])


# -- training sanity ----------------------------------------------------------------------


@pytest.mark.slow
def test_learns_conditional_gaussian():
    from ergmsbi.npe import NpeConfig, train_npe
    from ergmsbi.simulate import TrainingSet

    rng = np.random.default_rng(0)
    B = 50_000
    cov = np.array([[1.0, 0.6], [0.6, 0.8]])
    x = rng.normal(size=(B, 1))
    mean = np.hstack([x, -0.5 * x])
    thetas = mean + rng.multivariate_normal(np.zeros(2), cov, size=B)
    model, _ = train_npe(TrainingSet(thetas, x, np.zeros(B)), NpeConfig(B=B, epochs=25, seed=1))
    for x0 in (-1.0, 0.0, 1.5):
        draws = model.sample([x0], 50_000, np.random.default_rng(1))
        np.testing.assert_allclose(draws.mean(axis=0), [x0, -0.5 * x0], atol=0.1)
        np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.1)
