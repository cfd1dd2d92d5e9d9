import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from vidtwin.config import LossWeights, RunConfig, tiny_model_config
from vidtwin.errors import ContractError, NumericError, ShapeError
from vidtwin.objective import (
    GaussianPosterior,
    PatchDiscriminator,
    PerceptualNet,
    gan_losses,
    kl_loss,
    perceptual_loss,
    rec_loss,
    reparameterize,
    total_loss,
)
from vidtwin.train import synthetic_corpus, train_autoencoder


def _post(mu, logvar, shape=(4,)):
    return GaussianPosterior(torch.full(shape, float(mu), dtype=torch.float64),
                             torch.full(shape, float(logvar), dtype=torch.float64))


def test_tiny_sigma_sample_equals_mu():
    post = _post(0.7, -1e9)
    assert post.logvar.min() == -30.0
    noise = torch.randn(4, dtype=torch.float64)
    assert torch.allclose(reparameterize(post, noise), post.mu, rtol=0, atol=1e-6)


def test_eval_mode_returns_mu():
    post = _post(0.3, 1.0)
    assert torch.equal(reparameterize(post, torch.randn(4, dtype=torch.float64), train_mode=False), post.mu)


def test_reparameterize_formula():
    post = _post(0.5, math.log(0.64))
    noise = torch.tensor([1.0, -1.0, 0.0, 2.0], dtype=torch.float64)
    assert torch.allclose(reparameterize(post, noise), 0.5 + 0.8 * noise)


def test_reparameterize_shape_error():
    with pytest.raises(ShapeError):
        reparameterize(_post(0, 0), torch.zeros(3, dtype=torch.float64))


def test_reparameterize_monte_carlo_moments():
    g = torch.Generator().manual_seed(0)
    post = _post(0, 0, shape=(10**6,))
    s = reparameterize(post, torch.randn(10**6, generator=g, dtype=torch.float64))
    assert abs(float(s.mean())) < 0.004
    assert abs(float(s.var()) - 1) < 0.01


def test_reparameterize_mean_converges():
    g = torch.Generator().manual_seed(1)
    post = _post(1.3, 0.5, shape=(1,))
    errs = []
    for n in (10**2, 10**4, 10**6):
        s = reparameterize(GaussianPosterior(post.mu.expand(n), post.logvar.expand(n)),
                           torch.randn(n, generator=g, dtype=torch.float64))
        errs.append(abs(float(s.mean()) - 1.3))
        assert errs[-1] < 5 * math.exp(0.25) / math.sqrt(n)
    assert errs[-1] < errs[0]


def test_kl_closed_form_points():
    assert float(kl_loss(_post(0, 0))) == 0.0
    assert float(kl_loss(_post(0.6, 0))) == pytest.approx(0.18)
    assert float(kl_loss(_post(0.5, 2 * math.log(0.8)))) == pytest.approx(0.16815, abs=1e-5)


def test_kl_matches_numeric_integration():
    mu, sigma = 0.5, 0.8
    q, p = stats.norm(mu, sigma), stats.norm(0, 1)
    value, _ = integrate.quad(lambda x: q.pdf(x) * (q.logpdf(x) - p.logpdf(x)), -np.inf, np.inf)
    assert float(kl_loss(_post(mu, 2 * math.log(sigma)))) == pytest.approx(value, abs=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_kl_matches_monte_carlo(seed):
    g = torch.Generator().manual_seed(seed)
    mu = float(torch.rand((), generator=g)) * 2 - 1
    logvar = float(torch.rand((), generator=g)) * 4 - 2
    sigma = math.exp(logvar / 2)
    x = mu + sigma * torch.randn(10**6, generator=g, dtype=torch.float64)
    log_q = -0.5 * ((x - mu) / sigma) ** 2 - math.log(sigma)
    log_p = -0.5 * x**2
    assert abs(float((log_q - log_p).mean()) - float(kl_loss(_post(mu, logvar)))) < 1e-2


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-10, 10))
def test_kl_nonnegative(mu, logvar):
    assert float(kl_loss(_post(mu, logvar))) >= 0


def test_kl_rejects_non_finite():
    with pytest.raises(NumericError):
        kl_loss(_post(float("nan"), 0))


def test_rec_loss_points():
    x = torch.rand(2, 3, 4, 8, 8)
    assert float(rec_loss(x, x)) == 0
    assert float(rec_loss(x + 0.1, x)) == pytest.approx(0.1, abs=1e-6)
    with pytest.raises(ShapeError):
        rec_loss(x, x[:1])


def test_rec_loss_scalar_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-1, 1, (2, 3, 2, 4, 4)), rng.uniform(-1, 1, (2, 3, 2, 4, 4))
    total = 0.0
    for u, v in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += abs(u - v)
    got = float(rec_loss(torch.from_numpy(a), torch.from_numpy(b)))
    assert got == pytest.approx(total / a.size, abs=1e-12)


@pytest.fixture(scope="module")
def percept():
    return PerceptualNet()


def test_perceptual_basic(percept):
    g = torch.Generator().manual_seed(0)
    x, y = torch.rand(1, 3, 2, 16, 16, generator=g), torch.rand(1, 3, 2, 16, 16, generator=g)
    assert float(perceptual_loss(x, x, percept)) == 0
    assert float(perceptual_loss(x, y, percept)) == pytest.approx(float(perceptual_loss(y, x, percept)), rel=1e-6)


def test_perceptual_positive_on_random_pairs(percept):
    g = torch.Generator().manual_seed(1)
    x = torch.rand(100, 3, 1, 8, 8, generator=g) * 2 - 1
    y = torch.rand(100, 3, 1, 8, 8, generator=g) * 2 - 1
    for i in range(100):
        assert float(perceptual_loss(x[i : i + 1], y[i : i + 1], percept)) > 0


def test_perceptual_requires_frozen_net():
    net = PerceptualNet()
    net.convs[0].weight.requires_grad_(True)
    x = torch.zeros(1, 3, 1, 8, 8)
    with pytest.raises(ContractError):
        perceptual_loss(x, x, net)


def test_perceptual_net_is_fixed():
    a, b = PerceptualNet(), PerceptualNet()
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_hinge_points():
    x = torch.zeros(1, 3, 2, 16, 16)
    gan_g, gan_d = gan_losses(x, x, lambda v: torch.zeros(v.shape[0], 1))
    assert float(gan_d) == 2.0 and float(gan_g) == 0.0

    def disc(v):
        return torch.where(v.mean() > 0, 1.0, -1.0) * torch.ones(1, 1)

    _, gan_d = gan_losses(-torch.ones(1, 3, 2, 16, 16), torch.ones(1, 3, 2, 16, 16), disc)
    assert float(gan_d) == 0.0


def test_gan_gradient_routing():
    torch.manual_seed(0)
    disc = PatchDiscriminator(width=8).double()
    x = torch.rand(1, 3, 2, 16, 16, dtype=torch.float64)
    x_hat = torch.rand(1, 3, 2, 16, 16, dtype=torch.float64, requires_grad=True)
    gan_g, gan_d = gan_losses(x_hat, x, disc)
    gan_g.backward(retain_graph=True)
    assert all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in disc.parameters())
    assert x_hat.grad.abs().sum() > 0

    # generator-side gradient w.r.t. x_hat agrees with central differences
    idx = (0, 1, 1, 5, 7)
    eps = 1e-6
    with torch.no_grad():
        x_hat[idx] += eps
        up = float(gan_losses(x_hat, x, disc)[0])
        x_hat[idx] -= 2 * eps
        down = float(gan_losses(x_hat, x, disc)[0])
        x_hat[idx] += eps
    assert (up - down) / (2 * eps) == pytest.approx(float(x_hat.grad[idx]), rel=1e-4, abs=1e-9)

    x_hat.grad = None
    gan_d.backward()
    assert x_hat.grad is None
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in disc.parameters())


def test_total_loss_arithmetic():
    w = LossWeights(lambda_p=1.0, lambda_gan=0.1, lambda_kl=1e-6, gan_start_step=1000)
    parts = {"rec": 0.2, "perceptual": 0.3, "kl": 100.0, "gan_g": 5.0}
    assert float(total_loss(parts, w, 0).total) == pytest.approx(0.5001)
    assert float(total_loss(parts, w, 1000).total) == pytest.approx(1.0001)


def test_total_loss_gan_gate_and_zero_weights():
    w = LossWeights(gan_start_step=10)
    a = total_loss({"rec": 0.2, "gan_g": 1.0}, w, 9).total
    b = total_loss({"rec": 0.2, "gan_g": 9.0}, w, 9).total
    assert float(a) == float(b)
    zero = LossWeights(0.0, 0.0, 0.0, 0)
    assert float(total_loss({"rec": 0.3, "perceptual": 1, "kl": 1, "gan_g": 1}, zero, 5).total) == pytest.approx(0.3)


def test_total_loss_errors():
    with pytest.raises(ValueError):
        total_loss({"rec": 0.1}, LossWeights(), -1)
    with pytest.raises(NumericError):
        total_loss({"rec": float("inf")}, LossWeights(), 0)


@settings(max_examples=30, deadline=None)
@given(*(st.floats(0, 10) for _ in range(4)), st.floats(0, 2), st.integers(0, 3000))
def test_total_loss_invariant(rec, perc, kl, gan, lam, step):
    w = LossWeights(lambda_p=lam, lambda_gan=lam / 2, lambda_kl=lam / 3, gan_start_step=1000)
    b = total_loss({"rec": rec, "perceptual": perc, "kl": kl, "gan_g": gan, "gan_d": 1.0}, w, step)
    expect = rec + lam * perc + lam / 3 * kl + (lam / 2 * gan if step >= 1000 else 0)
    assert float(b.total) == pytest.approx(expect, rel=1e-5, abs=1e-5)


def test_stronger_kl_weight_lowers_kl():
    data = None
    finals = []
    for lam in (1e-3, 1e-2):
        cfg = RunConfig(model=tiny_model_config())
        cfg.train.steps, cfg.train.batch, cfg.train.use_gan, cfg.train.log_every = 60, 4, False, 0
        cfg.train.lr = 2e-3
        cfg.train.weights.lambda_kl = lam
        data = synthetic_corpus(cfg, 8) if data is None else data
        res = train_autoencoder(cfg, data)
        finals.append(np.mean([h["kl"] for h in res.history[-10:]]))
    assert finals[1] < finals[0]
