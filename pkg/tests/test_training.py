import math

import numpy as np
import pytest
import torch

from campari.config import build_config
from campari.training import (MAGIC, CheckpointError, RMSprop, TrainState, checkpoint_load, checkpoint_save,
                              discriminator_loss, ema_update, gan_losses, generator_loss, lr_at, r1_normsq,
                              read_container, sample_real, schedule_points, stage_at, train_step, write_container)
from oracles import rmsprop_reference

TINY = ["resolutions=8, 16", "stage_iters=4", "batch_sizes=3, 2", "max_iters=10", "latent_dim=4",
        "fg_layers=2", "fg_width=8", "fg_skip=0", "bg_layers=2", "bg_width=8", "bg_skip=0", "n_freq_x=2",
        "n_freq_d=1", "disc_channel_div=16", "camgen_layers=2", "camgen_width=8", "camgen_warmup=2",
        "fade_window=3", "points_start=4", "points_max=8", "camgen_last_std=0.05"]


def tiny_config(*extra):
    return build_config("", TINY + list(extra), profile="smoke")


def fake_images(res, n=6, seed=0):
    return torch.rand(n, res, res, 3, generator=torch.Generator().manual_seed(seed))


class Images:
    def at(self, res):
        return fake_images(res)


def run(state, n):
    losses = []
    for _ in range(n):
        state.apply_schedules()
        s = train_step(state, sample_real(state, fake_images(state.resolution)))
        losses.append((s.loss_g, s.loss_d))
    return losses


# -- losses --------------------------------------------------------------

def test_zero_logits():
    z = torch.zeros(5)
    lg, ld = gan_losses(z, z, torch.zeros(5))
    assert lg.item() == pytest.approx(math.log(2), abs=1e-7)
    assert ld.item() == pytest.approx(2 * math.log(2), abs=1e-6)


def test_r1_weight_arithmetic():
    z = torch.zeros(4)
    base = discriminator_loss(z, z, torch.zeros(4), 10.0)
    assert (discriminator_loss(z, z, torch.full((4,), 0.5), 10.0) - base).item() == pytest.approx(5.0)


def test_linear_discriminator_r1_closed_form():
    H, W, C = 4, 5, 3
    w = torch.tensor(0.37, requires_grad=True)
    real = torch.rand(2, H, W, C).requires_grad_(True)
    logits = w * real.flatten(1).sum(1)
    pen = r1_normsq(logits, real)
    assert torch.allclose(pen, torch.full((2,), H * W * C * 0.37 ** 2), rtol=1e-6)
    ld = discriminator_loss(torch.zeros(2), torch.zeros(2), pen, 10.0) - 2 * math.log(2)
    assert abs(ld.item() - 10 * H * W * C * 0.37 ** 2) < 1e-5 * max(1.0, 10 * H * W * C * 0.37 ** 2)
    # the penalty is differentiable w.r.t. the discriminator weight: d/dw (lambda HWC w^2) = 2 lambda HWC w
    (gw,) = torch.autograd.grad(10 * pen.mean(), [w])
    assert gw.item() == pytest.approx(2 * 10 * H * W * C * 0.37, rel=1e-5)


def test_generator_loss_is_nonsaturating():
    lg = generator_loss(torch.tensor([-20.0]))
    assert lg.item() == pytest.approx(20.0, rel=1e-6)


# -- optimiser and EMA ---------------------------------------------------------

def test_rmsprop_first_step():
    p = torch.nn.Parameter(torch.zeros(3))
    p.grad = torch.ones(3)
    RMSprop().step({"p": p}, 1e-3)
    assert p.detach().tolist() == pytest.approx([-1e-3 / (0.1 + 1e-8)] * 3, rel=1e-6)


def test_rmsprop_zero_grad_keeps_param_and_nonfinite_is_skipped():
    p = torch.nn.Parameter(torch.tensor([1.0, 2.0]))
    opt = RMSprop()
    for _ in range(10):
        p.grad = torch.zeros(2)
        opt.step({"p": p}, 1e-2)
    assert p.detach().tolist() == [1.0, 2.0]
    p.grad = torch.tensor([float("nan"), 1.0])
    opt.step({"p": p}, 1e-2)
    assert p.detach().tolist() == [1.0, 2.0] and opt.skipped == 1
    assert (opt.moments["p"] >= 0).all()


def test_rmsprop_matches_reference_trace_on_quadratic_bowl():
    A = np.diag([1.0, 4.0, 0.25])
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64))
    opt = RMSprop()
    ours, grads = [], []
    for _ in range(100):
        loss = 0.5 * p @ torch.tensor(A) @ p
        p.grad = None
        loss.backward()
        grads.append(p.grad.numpy().copy())
        opt.step({"p": p}, 1e-2)
        ours.append(p.detach().numpy().copy())
    ref = rmsprop_reference([1.0, -2.0, 3.0], grads, 1e-2)
    np.testing.assert_allclose(np.array(ours), np.array(ref), rtol=1e-12, atol=1e-14)


def test_ema_converges_geometrically():
    live = torch.nn.Linear(1, 1)
    ema = torch.nn.Linear(1, 1)
    with torch.no_grad():
        live.weight.fill_(1.0)
        ema.weight.fill_(0.0)
    for _ in range(693):
        ema_update(ema, live, 0.999)
    assert abs(1 - ema.weight.item()) == pytest.approx(0.999 ** 693, rel=1e-4)
    assert 0.999 ** 693 == pytest.approx(0.5, abs=1e-3)
    ema_update(ema, live, 1.0)
    before = ema.weight.item()
    ema_update(ema, live, 1.0)
    assert ema.weight.item() == before
    ema_update(ema, live, 0.0)
    assert ema.weight.item() == 1.0


# -- schedules -----------------------------------------------------------------

def test_schedule_points_endpoints_and_monotone():
    cfg = build_config()
    assert sum(schedule_points(0, cfg)) == 20
    assert sum(schedule_points(cfg.max_iters, cfg)) == cfg.points_max == 48
    totals = [sum(schedule_points(i, cfg)) for i in range(0, cfg.max_iters, 997)]
    assert all(b >= a for a, b in zip(totals, totals[1:]))
    n_fg, n_bg = schedule_points(0, cfg)
    assert n_fg == 15 and n_bg == 5
    fg_only = build_config("", ["background=off"])
    assert schedule_points(0, fg_only) == (20, 0)


def test_lr_decay_and_stages():
    cfg = build_config()
    assert lr_at(5e-4, 0, cfg) == 5e-4
    assert lr_at(5e-4, 150_000, cfg) == pytest.approx(5e-5)
    assert [stage_at(i, cfg) for i in (0, 19_999, 20_000, 69_999, 70_000)] == [0, 0, 1, 1, 2]


def test_growth_and_batch_in_lockstep():
    st = TrainState.create(tiny_config())
    sizes = []
    for _ in range(6):
        st.apply_schedules()
        sizes.append((st.iteration, st.resolution, st.batch_size, st.disc.stage))
        train_step(st, sample_real(st, fake_images(st.resolution)))
    assert sizes[3] == (3, 8, 3, 0) and sizes[4] == (4, 16, 2, 1)
    assert st.growth.fade_alpha == pytest.approx(2 / 3)


def test_camgen_warmup_freeze_and_release():
    st = TrainState.create(tiny_config())
    p0 = {k: v.detach().clone() for k, v in st.camgen.named_parameters()}
    run(st, 2)
    assert all(torch.equal(p0[k], v) for k, v in st.camgen.named_parameters())
    run(st, 2)
    assert any(not torch.equal(p0[k], v) for k, v in st.camgen.named_parameters())
    st2 = TrainState.create(tiny_config("camgen_freeze_from=3"))
    run(st2, 3)
    snap = {k: v.detach().clone() for k, v in st2.camgen.named_parameters()}
    run(st2, 2)
    assert all(torch.equal(snap[k], v) for k, v in st2.camgen.named_parameters())


def test_graph_isolation_between_players():
    st = TrainState.create(tiny_config("camgen_warmup=0"))
    g0 = {k: v.detach().clone() for k, v in st.generator_params().items()}
    d0 = {k: v.detach().clone() for k, v in st.disc_params().items()}
    seen = {}
    d_step, g_step = st.opt_d.step, st.opt_g.step

    def spy_d(params, lr, scale=None):
        seen["g_at_d"] = [p.grad for p in st.generator_params().values()]
        seen["d_at_d"] = [p.grad.clone() for p in params.values()]
        return d_step(params, lr, scale)

    def spy_g(params, lr, scale=None):
        seen["d_at_g"] = [p.grad for p in st.disc_params().values()]
        return g_step(params, lr, scale)

    st.opt_d.step, st.opt_g.step = spy_d, spy_g
    train_step(st, sample_real(st, fake_images(8)))
    # fakes for the D update are rendered without a graph to G
    assert all(g is None for g in seen["g_at_d"])
    # the G backward does not add to D's gradients
    assert all(torch.equal(a, b) for a, b in zip(seen["d_at_d"], seen["d_at_g"]))
    assert any(not torch.equal(g0[k], v) for k, v in st.generator_params().items())
    assert any(not torch.equal(d0[k], v) for k, v in st.disc_params().items())
    assert all(p.grad is None and not p.requires_grad for p in st.ema_gen.parameters())
    assert all(p.grad is None for p in st.ema_camgen.parameters())


def test_same_seed_same_trace():
    a = run(TrainState.create(tiny_config()), 12)
    b = run(TrainState.create(tiny_config()), 12)
    assert a == b
    c = run(TrainState.create(tiny_config("seed=1")), 12)
    assert a != c


def test_camgen_off_passes_prior_cameras(monkeypatch):
    import campari.training as tr

    drawn = []
    orig = tr.sample_prior_batch

    def spy(prior, n, rng):
        drawn.append(orig(prior, n, rng))
        return drawn[-1]

    monkeypatch.setattr(tr, "sample_prior_batch", spy)
    st = TrainState.create(tiny_config("camera_generator=off"))
    assert st.camgen is None and st.ema_camgen is None
    stats = train_step(st, sample_real(st, fake_images(8)))
    assert np.array_equal(stats.cams, drawn[-1].numpy())


def test_nan_loss_aborts_with_checkpoint(tmp_path):
    from campari.training import TrainingDiverged, train

    st = TrainState.create(tiny_config())
    with torch.no_grad():
        for p in st.disc.parameters():
            p.fill_(float("nan"))
    with pytest.raises(TrainingDiverged):
        train(st, Images(), 5, tmp_path)
    assert (tmp_path / "ckpt" / "diverged.cmpr").exists()


# -- checkpoints ---------------------------------------------------------

def test_checkpoint_byte_identical_round_trip(tmp_path):
    st = TrainState.create(tiny_config())
    run(st, 6)
    a, b = tmp_path / "a.cmpr", tmp_path / "b.cmpr"
    checkpoint_save(st, a)
    checkpoint_save(checkpoint_load(a), b)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:4] == MAGIC


def test_resume_reproduces_unbroken_trace(tmp_path):
    full = run(TrainState.create(tiny_config("max_iters=60")), 50)
    st = TrainState.create(tiny_config("max_iters=60"))
    first = run(st, 20)
    checkpoint_save(st, tmp_path / "mid.cmpr")
    resumed = checkpoint_load(tmp_path / "mid.cmpr")
    assert resumed.iteration == 20
    rest = run(resumed, 30)
    assert first + rest == full


def test_camgen_off_checkpoint_has_no_camgen_tensors(tmp_path):
    st = TrainState.create(tiny_config("camera_generator=off"))
    checkpoint_save(st, tmp_path / "c.cmpr")
    names = read_container(tmp_path / "c.cmpr")
    assert not any(k.startswith(("camgen/", "ema_camgen/")) for k in names)
    assert any(k.startswith("gen/") for k in names)


def test_checkpoint_errors(tmp_path):
    st = TrainState.create(tiny_config())
    p = tmp_path / "x.cmpr"
    checkpoint_save(st, p)
    data = p.read_bytes()
    (tmp_path / "trunc.cmpr").write_bytes(data[:-7])
    with pytest.raises(CheckpointError, match="truncated tensor"):
        checkpoint_load(tmp_path / "trunc.cmpr")
    bad = bytearray(data)
    bad[4] = 99
    (tmp_path / "ver.cmpr").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_load(tmp_path / "ver.cmpr")
    (tmp_path / "magic.cmpr").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_load(tmp_path / "magic.cmpr")


def test_container_layout(tmp_path):
    import struct

    p = tmp_path / "c.cmpr"
    write_container(p, {"w": np.array([[1.5, -2.0]], dtype=np.float32)})
    raw = p.read_bytes()
    assert raw[:4] == b"CMPR"
    version, count = struct.unpack("<II", raw[4:12])
    assert (version, count) == (1, 1)
    (n,) = struct.unpack("<I", raw[12:16])
    assert raw[16:16 + n] == b"w"
    assert struct.unpack("<III", raw[17:29]) == (2, 1, 2)
    assert struct.unpack("<2f", raw[29:37]) == (1.5, -2.0)
