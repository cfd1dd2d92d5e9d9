import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vidtwin.config import DiffusionConfig
from vidtwin.diffusion import (
    DiT,
    DiffusionSchedule,
    NormStats,
    cfg_predict,
    compute_norm_stats,
    ddim_sample,
    ddim_step,
    ddim_timesteps,
    forward_diffuse,
    identity_stats,
    load_dit,
    make_layout,
    pack_latents,
    save_dit,
    token_counts,
    train_step,
    unpack_tokens,
)
from vidtwin.errors import ScheduleError, ShapeError, StatsError

SCHED = DiffusionSchedule()
SMALL = DiffusionConfig(layers=2, heads=2, hidden=32, num_classes=4, class_dim=16)


class Oracle(torch.nn.Module):
    """Returns the clean target whatever the input."""

    def __init__(self, y0):
        super().__init__()
        self.y0 = y0

    def forward(self, y_t, t, labels=None):
        return self.y0.expand_as(y_t)


def _latents(seed=0, b=2, zs=(16, 4, 7, 7), zd=(16, 8, 14)):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, *zs, generator=g) * 2 + 1, torch.randn(b, *zd, generator=g) * 3 - 1


def _layout():
    return make_layout((4, 4, 4, 4), (8, 4, 8), 4, 2)


def test_schedule_invariants():
    assert np.all((SCHED.betas > 0) & (SCHED.betas < 1))
    assert np.all(np.diff(SCHED.alpha_bars) < 0)
    assert SCHED.alpha_bars[0] == pytest.approx(1 - 1e-4)
    with pytest.raises(ScheduleError):
        DiffusionSchedule(beta_end=1.5)


def test_forward_diffuse_limits():
    y0 = torch.randn(3, 5, dtype=torch.float64)
    eps = torch.randn(3, 5, dtype=torch.float64)
    assert torch.allclose(forward_diffuse(y0, 0, eps, SCHED), y0, atol=0.03)
    assert SCHED.alpha_bars[-1] < 1e-4
    assert torch.allclose(forward_diffuse(y0, 999, eps, SCHED), eps, atol=0.03)
    with pytest.raises(ScheduleError):
        forward_diffuse(y0, 1000, eps, SCHED)


@pytest.mark.parametrize("t", [10, 300, 700])
def test_forward_diffuse_moments(t):
    g = torch.Generator().manual_seed(t)
    n = 10**5
    y0 = torch.full((n,), 1.5, dtype=torch.float64)
    y_t = forward_diffuse(y0, t, torch.randn(n, generator=g, dtype=torch.float64), SCHED)
    ab = SCHED.alpha_bars[t]
    assert float(y_t.mean()) == pytest.approx(math.sqrt(ab) * 1.5, rel=0.01, abs=0.01 * math.sqrt(1 - ab))
    resid = y_t - math.sqrt(ab) * y0
    assert float(resid.var()) == pytest.approx(1 - ab, rel=0.01)


def test_token_counts_paper_layout():
    assert token_counts((16, 4, 7, 7), (16, 8, 14), 2) == (128, 56)
    lay = make_layout((16, 4, 7, 7), (16, 8, 14), 7, 2)
    assert lay.length == 184
    assert lay.s_pad == (0, 1, 1) and lay.d_pad == (1, 0, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(2, 9), st.integers(1, 3))
def test_token_counts_ceil_division(n_q, h, w, f, length, p):
    ls, ld = token_counts((n_q, 2, h, w), (f, 3, length), p)
    c = lambda v: -(-v // p)  # noqa: E731
    assert ls == c(n_q) * c(h) * c(w)
    assert ld == c(1) * c(f) * c(length)


@pytest.mark.parametrize("projection", ["identity", "orthogonal"])
def test_pack_unpack_round_trip(projection):
    z_s, z_d = _latents()
    stats = compute_norm_stats(z_s, z_d)
    seq = pack_latents(z_s, z_d, stats, 2, split=7, projection=projection)
    assert seq.tokens.shape == (2, 184, 64)
    assert seq.layout.stats_id == stats.id
    r_s, r_d = unpack_tokens(seq, stats)
    if projection == "identity":
        z_s64, z_d64 = z_s.double(), z_d.double()
        seq64 = pack_latents(z_s64, z_d64, stats, 2, split=7)
        a, b = unpack_tokens(seq64, stats)
        assert torch.allclose(a, z_s64, atol=1e-12) and torch.allclose(b, z_d64, atol=1e-12)
        assert torch.allclose(r_s, z_s, atol=1e-6) and torch.allclose(r_d, z_d, atol=1e-6)
    else:
        assert torch.allclose(r_s, z_s, atol=1e-4) and torch.allclose(r_d, z_d, atol=1e-4)


def test_identity_stats_round_trip_bit_exact():
    z_s, z_d = _latents(3)
    stats = identity_stats(4, 8)
    r_s, r_d = unpack_tokens(pack_latents(z_s, z_d, stats, 2, split=7), stats)
    assert torch.equal(r_s, z_s) and torch.equal(r_d, z_d)


def test_padding_cells_do_not_leak():
    z_s, z_d = _latents(4)
    stats = identity_stats(4, 8)
    seq = pack_latents(z_s, z_d, stats, 2, split=7)
    # pad cells are zero on the way in; overwrite every token value and check only real cells come back
    marked = seq.tokens.clone()
    marked[marked == 0] = 1e6
    r_s, r_d = unpack_tokens(type(seq)(marked, seq.layout), stats)
    assert r_s.abs().max() < 1e5 and r_d.abs().max() < 1e5
    assert r_s.shape == z_s.shape and r_d.shape == z_d.shape


def test_normalized_branch_statistics():
    z_s, z_d = _latents(5, b=16)
    stats = compute_norm_stats(z_s, z_d)
    s_mean, s_std = stats.tensors("S", torch.float64)
    zs_n = (z_s.double() - s_mean.view(1, 1, -1, 1, 1)) / s_std.view(1, 1, -1, 1, 1)
    per_ch = zs_n.transpose(0, 2).reshape(4, -1)
    assert torch.allclose(per_ch.mean(1), torch.zeros(4, dtype=torch.float64), atol=1e-6)
    assert torch.allclose(per_ch.std(1, unbiased=False), torch.ones(4, dtype=torch.float64), atol=1e-6)


def test_stats_errors(tmp_path):
    with pytest.raises(StatsError):
        NormStats([0.0], [0.0], [0.0], [1.0])
    z_s, z_d = _latents()
    with pytest.raises(StatsError):
        compute_norm_stats(torch.ones_like(z_s), z_d)
    stats = compute_norm_stats(z_s, z_d)
    stats.save(tmp_path / "s.json")
    assert NormStats.load(tmp_path / "s.json").id == stats.id
    seq = pack_latents(z_s, z_d, stats, 2, split=7)
    with pytest.raises(StatsError):
        unpack_tokens(seq, identity_stats(4, 8))
    with pytest.raises(ShapeError):
        pack_latents(z_s[0], z_d, stats)


def test_oracle_train_loss_zero():
    y0 = torch.randn(3, 10, 8)
    assert float(train_step(Oracle(y0), y0, None, SCHED, 0.2)) == 0.0


def test_initial_loss_finite_positive():
    torch.manual_seed(0)
    lay = _layout()
    model = DiT(lay, SMALL)
    y0 = torch.randn(4, lay.length, lay.token_dim)
    with torch.no_grad():
        loss = float(train_step(model, y0, [0, 1, 2, 3], SCHED, 0.2, torch.Generator().manual_seed(0)))
    assert 0 < loss < 10
    # zero-initialized output layer: the prediction starts at 0, so the loss is E|y0|^2
    assert loss == pytest.approx(float(y0.pow(2).mean()), rel=1e-5)


def _live_dit(lay):
    """A DiT whose zero-initialized modulation and output layers are randomized."""
    torch.manual_seed(0)
    model = DiT(lay, SMALL)
    with torch.no_grad():
        for p in model.parameters():
            if not p.any():
                p.normal_(std=0.05)
    return model.eval()


def test_full_drop_gives_no_class_gradient():
    lay = _layout()
    model = _live_dit(lay)
    y0 = torch.randn(4, lay.length, lay.token_dim)

    def loss():
        return train_step(model, y0, [0, 1, 2, 3], SCHED, 1.0, torch.Generator().manual_seed(3))

    loss().backward()
    grad = model.class_table.weight.grad
    assert torch.count_nonzero(grad[: SMALL.num_classes]) == 0
    assert grad[SMALL.num_classes].abs().sum() > 0
    # finite difference on a real class row: the loss does not move
    with torch.no_grad():
        base = float(loss())
    with torch.no_grad():
        model.class_table.weight[1] += 0.5
        assert float(loss()) == base


def test_cfg_identities():
    lay = _layout()
    model = _live_dit(lay)
    y = torch.randn(2, lay.length, lay.token_dim)
    with torch.no_grad():
        cond = model(y, 50, [1, 2])
        uncond = model(y, 50, None)
        assert torch.allclose(cfg_predict(model, y, 50, [1, 2], 1.0), cond, atol=1e-6)
        assert torch.allclose(cfg_predict(model, y, 50, [1, 2], 0.0), uncond, atol=1e-6)
        # cond == uncond when the labels are the null class
        a = cfg_predict(model, y, 50, None, 0.0)
        b = cfg_predict(model, y, 50, None, 7.5)
        assert torch.equal(a, b)


def test_null_label_maps_to_null_embedding():
    lay = _layout()
    model = DiT(lay, SMALL)
    assert model.class_ids(None, 2).tolist() == [4, 4]
    assert model.class_ids([None, 1], 2).tolist() == [4, 1]
    assert model.class_ids(torch.tensor([-1, 3]), 2).tolist() == [4, 3]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 999), st.integers(0, 998), st.integers(0, 1000))
def test_ddim_oracle_one_step(t, t_prev, seed):
    t_prev = min(t_prev, t - 1)
    g = torch.Generator().manual_seed(seed)
    y0 = torch.randn(2, 6, dtype=torch.float64, generator=g)
    y_t = forward_diffuse(y0, t, torch.randn(2, 6, dtype=torch.float64, generator=g), SCHED)
    out = ddim_step(y_t, y0, t, t_prev, SCHED)
    expect = forward_diffuse(y0, t_prev, (y_t - math.sqrt(SCHED.alpha_bars[t]) * y0) / math.sqrt(1 - SCHED.alpha_bars[t]), SCHED)
    assert torch.allclose(out, expect, atol=1e-9)
    assert torch.equal(ddim_step(y_t, y0, t, None, SCHED), y0)


def test_ddim_oracle_sampling_recovers_target():
    y0 = torch.randn(1, 5, 4)
    oracle = Oracle(y0)
    for steps in (1, 7, 14, 1000):
        out = ddim_sample(oracle, None, 5.0, steps, SCHED, seed=1, shape=(1, 5, 4))
        assert torch.equal(out, y0)


def test_ddim_deterministic_and_errors():
    lay = _layout()
    model = _live_dit(lay)
    shape = (2, lay.length, lay.token_dim)
    a = ddim_sample(model, [0, 1], 5.0, 4, SCHED, seed=9, shape=shape)
    b = ddim_sample(model, [0, 1], 5.0, 4, SCHED, seed=9, shape=shape)
    assert torch.equal(a, b)
    with pytest.raises(ScheduleError):
        ddim_timesteps(1000, 1001)
    with pytest.raises(ScheduleError):
        ddim_sample(model, None, 1.0, 2, SCHED, 0, shape, timesteps=[500, 100])
    assert len(ddim_timesteps(1000, 50)) == 50


def test_dit_save_load(tmp_path):
    torch.manual_seed(0)
    lay = make_layout((4, 4, 4, 4), (8, 4, 8), 4, 2, stats_id=identity_stats(4, 4).id)
    model = DiT(lay, SMALL).eval()
    torch.nn.init.normal_(model.out.weight, std=0.05)
    save_dit(model, identity_stats(4, 4), tmp_path / "d.pt")
    loaded, stats = load_dit(tmp_path / "d.pt")
    y = torch.randn(1, lay.length, lay.token_dim)
    with torch.no_grad():
        assert torch.equal(model(y, 3, [1]), loaded(y, 3, [1]))
    assert stats.id == identity_stats(4, 4).id


def test_param_count_grows_with_hidden():
    lay = _layout()
    small = sum(p.numel() for p in DiT(lay, SMALL).parameters())
    big = sum(p.numel() for p in DiT(lay, DiffusionConfig(layers=2, heads=2, hidden=64, num_classes=4, class_dim=16)).parameters())
    assert big > small
