import numpy as np
import pytest

from axon import coarsediff as cd
from axon import nnet
from axon import schedules as sch
from axon import voxcore as vc
from axon.nnet import autodiff as ad


def pm1_volume(dims, seed, scale=0.5):
    rng = vc.SeededRng(seed)
    data = np.clip(rng.normal(dims) * scale, -1, 1)
    return vc.Volume(dims, (1, 1, 1), data, vc.NORMALIZED_PM1)


def unit_projection(n, seed, view=vc.PA):
    rng = vc.SeededRng(seed)
    return vc.Projection((n, n), 1.0, rng.uniform(0, 1, (n, n)), view)


def toy_model(dims=(8, 8, 8), r=2, bi_planar=False, T=10, seed=0):
    sched = sch.bridge_schedule(T, s_max=1.0)
    rng = vc.SeededRng(seed, vc.stream_of("coarse-init"))
    return cd.build_coarse_model(r, dims, sched, rng, bi_planar=bi_planar,
                                 base_channels=2, channel_mults=(1, 2))


def test_encoder_shape_contract():
    # r=8 on a 64^2 view -> 8^3 condition volume
    m = toy_model(dims=(8, 8, 8), r=8)
    cond = cd.encode_condition(m, unit_projection(64, 1))
    assert cond.dims == (8, 8, 8)


def test_encoder_rejects_wrong_resolution():
    m = toy_model(dims=(8, 8, 8), r=2)
    with pytest.raises(vc.VoxError):
        cd.encode_condition(m, unit_projection(15, 1))  # not divisible by r
    with pytest.raises(vc.VoxError):
        cd.encode_condition(m, unit_projection(32, 1))  # wrong lifted dims


def test_two_pa_views_rejected():
    m = toy_model(bi_planar=True)
    views = [unit_projection(16, 1), unit_projection(16, 2)]
    with pytest.raises(vc.VoxError):
        cd.encode_condition(m, views)


def test_weight_sharing_identical_prefusion_encodings():
    m = toy_model(dims=(8, 8, 8), r=2, bi_planar=True)
    img = unit_projection(16, 3)
    feat_a = m.encoder(cd._projection_tensor(img))
    feat_b = m.encoder(cd._projection_tensor(img))
    assert np.array_equal(feat_a.data, feat_b.data)


def test_single_and_biplanar_same_output_shape():
    m = toy_model(dims=(8, 8, 8), r=2, bi_planar=True)
    single = cd.encode_condition(m, unit_projection(16, 4))
    both = cd.encode_condition(
        m, [unit_projection(16, 4), unit_projection(16, 5, view=vc.LATERAL)])
    assert single.dims == both.dims == (8, 8, 8)


def test_lifts_are_geometrically_aligned():
    # A z-localized stripe in each view must land on the same z-slab of the
    # lifted volume for PA and lateral views alike.
    m = toy_model(dims=(8, 8, 8), r=2)
    img = np.zeros((16, 16))
    img[2:4, :] = 1.0  # rows are z for both views
    pa = vc.Projection((16, 16), 1.0, img, vc.PA)
    lat = vc.Projection((16, 16), 1.0, img, vc.LATERAL)
    vol_pa = cd._lift_to_volume_frame(m.encoder(cd._projection_tensor(pa)), vc.PA)
    vol_lat = cd._lift_to_volume_frame(m.encoder(cd._projection_tensor(lat)), vc.LATERAL)
    # energy along z (axis D) should peak at the same slab
    pa_profile = np.abs(vol_pa.data[0, 0] - vol_pa.data[0, 0].mean((1, 2), keepdims=True)).sum((1, 2))
    lat_profile = np.abs(vol_lat.data[0, 0] - vol_lat.data[0, 0].mean((1, 2), keepdims=True)).sum((1, 2))
    assert np.argmax(pa_profile) == np.argmax(lat_profile)


def test_fusion_reduces_to_residual_with_zero_main():
    rng = vc.SeededRng(6)
    block = cd.FusionBlock(rng, width=4)
    for conv in (block.conv1, block.conv2, block.conv3):
        conv.weight.data[...] = 0.0
        conv.bias.data[...] = 0.0
    x = ad.Tensor(vc.SeededRng(7).normal((1, 2, 4, 4, 4)))
    out = block(x)
    res = block.residual(x)
    assert np.array_equal(out.data, res.data)


def test_bridge_forward_endpoints_exact():
    sched = sch.bridge_schedule(10)
    x0 = pm1_volume((6, 6, 6), 1)
    xT = pm1_volume((6, 6, 6), 2)
    rng = vc.SeededRng(3)
    at0, _ = cd.bridge_forward(x0, xT, 0, sched, rng)
    assert np.array_equal(at0.data, x0.data)
    atT, _ = cd.bridge_forward(x0, xT, 10, sched, rng)
    assert np.array_equal(atT.data, xT.data)


def test_bridge_forward_midpoint_with_zero_noise():
    sched = sch.bridge_schedule(10)
    x0 = pm1_volume((4, 4, 4), 4)
    xT = pm1_volume((4, 4, 4), 5)

    class ZeroRng:
        def normal(self, shape):
            return np.zeros(shape)

    x_t, eps = cd.bridge_forward(x0, xT, 5, sched, ZeroRng())
    assert np.allclose(x_t.data, 0.5 * (x0.data + xT.data))
    assert np.all(eps.data == 0)


def test_bridge_forward_validates():
    sched = sch.bridge_schedule(10)
    x0 = pm1_volume((4, 4, 4), 1)
    bad = pm1_volume((5, 5, 5), 2)
    with pytest.raises(vc.VoxError):
        cd.bridge_forward(x0, bad, 3, sched, vc.SeededRng(0))
    with pytest.raises(vc.VoxError):
        cd.bridge_forward(x0, x0, 11, sched, vc.SeededRng(0))


def test_coarse_loss_zero_for_oracle_t0():
    # at t=0 both target terms vanish, so a zero network is exact
    m = toy_model(dims=(8, 8, 8), r=2, T=10)
    m.backbone.out_conv.weight.data[...] = 0.0
    m.backbone.out_conv.bias.data[...] = 0.0
    x0 = pm1_volume((8, 8, 8), 8)
    loss = cd.coarse_loss(m, x0, unit_projection(16, 9), 0, vc.SeededRng(10))
    assert loss == pytest.approx(0.0, abs=1e-30)


def test_coarse_loss_requires_normalized():
    m = toy_model(dims=(8, 8, 8), r=2)
    hu = vc.volume_new((8, 8, 8), (1, 1, 1), 100.0)
    with pytest.raises(vc.VoxError):
        cd.coarse_loss(m, hu, unit_projection(16, 1), 3, vc.SeededRng(0))


def test_coarse_loss_populates_joint_grads_and_moves_encoder():
    m = toy_model(dims=(8, 8, 8), r=2, bi_planar=True)
    holder = m.modules()
    x0 = pm1_volume((8, 8, 8), 11)
    views = [unit_projection(16, 12), unit_projection(16, 13, view=vc.LATERAL)]
    loss = cd.coarse_loss(m, x0, views, 5, vc.SeededRng(14))
    assert loss > 0
    grads = {name: t.grad for name, t in holder.named_parameters()}
    assert any(name.startswith("encoder") and g is not None and np.any(g != 0)
               for name, g in grads.items())
    assert any(name.startswith("fusion") and g is not None for name, g in grads.items())
    assert any(name.startswith("backbone") and g is not None and np.any(g != 0)
               for name, g in grads.items())

    before = m.encoder.head.weight.data.copy()
    state = nnet.AdamState(holder, learning_rate=1e-2)
    nnet.adam_step(holder, state)
    assert not np.array_equal(before, m.encoder.head.weight.data)


def test_coarse_loss_gradcheck_finite_differences():
    m = toy_model(dims=(4, 4, 4), r=1, T=6, seed=2)
    holder = m.modules()
    x0 = pm1_volume((4, 4, 4), 15)
    view = unit_projection(4, 16)

    def loss_value():
        holder.zero_grad()
        return cd.coarse_loss(m, x0, view, 3, vc.SeededRng(17))

    base = loss_value()
    assert base > 0
    grads = {name: t.grad.copy() for name, t in holder.named_parameters()}
    rng = np.random.default_rng(18)
    params = list(holder.named_parameters())
    h = 1e-5
    checked = 0
    for name, t in params:
        if rng.random() > 20 / len(params):
            continue
        flat = t.data.ravel()
        idx = rng.integers(flat.size)
        old = flat[idx]
        flat[idx] = old + h
        up = loss_value()
        flat[idx] = old - h
        dn = loss_value()
        flat[idx] = old
        num = (up - dn) / (2 * h)
        ana = grads[name].ravel()[idx]
        rel = abs(num - ana) / max(1e-6, abs(num), abs(ana))
        assert rel < 1e-3, f"{name}: {rel}"
        checked += 1
    assert checked >= 8


def oracle_predictor(x0_grid):
    def predict(x, t):
        return x - x0_grid
    return predict


def test_bridge_sample_oracle_recovers_x0():
    m = toy_model(dims=(8, 8, 8), r=2, T=10)
    x0 = pm1_volume((8, 8, 8), 20)
    x0_grid = vc.volume_to_grid(x0)[None, None]
    for n_steps in (1, 5, 10):
        plan = sch.ddim_plan(10, n_steps, eta=0.0)
        out = cd.bridge_sample(m, unit_projection(16, 21), plan, vc.SeededRng(22),
                               predictor=oracle_predictor(x0_grid))
        assert np.max(np.abs(out.data - x0.data)) < 1e-9


def test_bridge_sample_zero_predictor_one_step_returns_xT():
    m = toy_model(dims=(8, 8, 8), r=2, T=10)
    view = unit_projection(16, 23)
    xT = cd.encode_condition(m, view)
    plan = sch.ddim_plan(10, 1, eta=0.0)
    out = cd.bridge_sample(m, view, plan, vc.SeededRng(24),
                           predictor=lambda x, t: np.zeros_like(x))
    assert np.max(np.abs(out.data - xT.data)) < 1e-12


def test_bridge_sample_deterministic_across_runs():
    m = toy_model(dims=(8, 8, 8), r=2, T=10)
    view = unit_projection(16, 25)
    plan = sch.ddim_plan(10, 5, eta=0.5)
    a = cd.bridge_sample(m, view, plan, vc.SeededRng(26))
    b = cd.bridge_sample(m, view, plan, vc.SeededRng(26))
    assert np.array_equal(a.data, b.data)
    c = cd.bridge_sample(m, view, plan, vc.SeededRng(27))
    assert not np.array_equal(a.data, c.data)


def test_bridge_sample_rejects_empty_plan():
    m = toy_model()
    plan = sch.DdimPlan((), 0.0)
    with pytest.raises(vc.VoxError):
        cd.bridge_sample(m, unit_projection(16, 1), plan, vc.SeededRng(0))


def test_gaussian_posterior_training_check():
    """A trained per-voxel net must match the analytic conditional mean
    E[x_t - x_0 | x_t] of the scalar Gaussian bridge within 0.1."""
    T = 8
    sched = sch.bridge_schedule(T, s_max=0.25)
    mu0, sigma0 = 0.2, 0.5
    xT_val = 0.8

    def posterior_residual(x_t, t):
        a = sched.alpha[t]
        d = sched.delta[t]
        mean_xt = (1 - a) * mu0 + a * xT_val
        var_xt = (1 - a) ** 2 * sigma0**2 + d
        cov = (1 - a) * sigma0**2
        e_x0 = mu0 + cov / var_xt * (x_t - mean_xt)
        return x_t - e_x0

    rng = vc.SeededRng(30, vc.stream_of("gauss-train"))
    net = nnet.VoxelMLP(2, 1, hidden=24, rng=rng)
    state = nnet.AdamState(net, learning_rate=5e-3)
    data_rng = vc.SeededRng(31)
    n_vox = 512
    cond = ad.Tensor(np.full((1, 1, n_vox, 1, 1), xT_val))
    for step in range(1500):
        x0 = mu0 + sigma0 * data_rng.normal((1, 1, n_vox, 1, 1))
        t = int(data_rng.integers(1, T + 1))
        eps = data_rng.normal(x0.shape)
        a, d = sched.alpha[t], sched.delta[t]
        x_t = (1 - a) * x0 + a * xT_val + np.sqrt(d) * eps
        target = x_t - x0
        net.zero_grad()
        loss = ad.mse_loss(net(ad.Tensor(x_t), t=t, cond=cond), ad.Tensor(target))
        loss.backward()
        nnet.adam_step(net, state)

    probe_ts = [1, 2, 4, 6, 8]
    worst = 0.0
    for t in probe_ts:
        a = sched.alpha[t]
        mean_xt = (1 - a) * mu0 + a * xT_val
        sd_xt = np.sqrt((1 - a) ** 2 * sigma0**2 + sched.delta[t])
        probes = mean_xt + np.linspace(-1.5, 1.5, 5) * sd_xt
        x_in = probes.reshape(1, 1, 5, 1, 1)
        pred = net(ad.Tensor(x_in), t=t,
                   cond=ad.Tensor(np.full((1, 1, 5, 1, 1), xT_val))).data.ravel()
        want = np.array([posterior_residual(p, t) for p in probes])
        worst = max(worst, float(np.max(np.abs(pred - want))))
    assert worst < 0.1, f"worst abs err {worst}"
