"""2D-to-3D bridge diffusion stage: encoder lift, bi-planar fusion, forward
bridging, training objective, and reverse bridge sampling.

Axis bookkeeping: network tensors are (B, C, D, H, W) with (D, H, W) =
volume (z, y, x). The frontal view images (row=z, col=x) lift their feature
channels into the y (depth) axis; lateral views (row=z, col=y) lift into x.
With that permutation both encodings live in the volume frame, so bi-planar
fusion adds geometrically aligned channels.

The training target is the bridge residual x_t - x_0 = alpha_t*(x_T - x_0)
+ sqrt(delta_t)*eps; the reverse sampler reconstructs x_hat_0 = x_t - r_hat
and steps along the bridge, which telescopes exactly for an oracle
predictor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnet
from .nnet import autodiff as ad
from .schedules import BridgeSchedule, DdimPlan
from .voxcore import (
    LATERAL,
    NORMALIZED_PM1,
    PA,
    Projection,
    SeededRng,
    Volume,
    VoxError,
    grid_to_volume,
    volume_to_grid,
)


class EncoderLift(nnet.Module):
    """Strided 2D conv stack lifting an (r*n x r*n) image to n^2 x depth
    features; the channel axis is reinterpreted as the depth axis."""

    def __init__(self, r: int, depth_out: int, rng: SeededRng, feat: int = 8):
        if r < 1 or (r & (r - 1)) != 0:
            raise VoxError(f"downsample factor r must be a power of two, got {r}")
        self.r = r
        self.depth_out = depth_out
        n_down = int(np.log2(r)) if r > 1 else 0
        self.convs = []
        ch = 1
        for i in range(n_down):
            out_ch = min(feat * 2**i, 4 * feat)
            self.convs.append(nnet.Conv2d(ch, out_ch, 3, rng, stride=2, pad=1))
            ch = out_ch
        if not self.convs:
            self.convs.append(nnet.Conv2d(1, feat, 3, rng, pad=1))
            ch = feat
        self.head = nnet.Conv2d(ch, depth_out, 3, rng, pad=1)

    def __call__(self, img: ad.Tensor) -> ad.Tensor:
        h = img
        for conv in self.convs:
            h = ad.silu(conv(h))
        return self.head(h)  # (B, depth_out, rows, cols)


class FusionBlock(nnet.Module):
    """Three 3x3x3 convs with group norm + ReLU, plus a 1x1x1 residual
    projection from the two stacked view channels to one."""

    def __init__(self, rng: SeededRng, width: int = 8):
        self.conv1 = nnet.Conv3d(2, width, 3, rng, pad=1)
        self.norm1 = nnet.GroupNorm(width)
        self.conv2 = nnet.Conv3d(width, width, 3, rng, pad=1)
        self.norm2 = nnet.GroupNorm(width)
        self.conv3 = nnet.Conv3d(width, 1, 3, rng, pad=1)
        self.norm3 = nnet.GroupNorm(1)
        self.residual = nnet.Conv3d(2, 1, 1, rng)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        h = ad.relu(self.norm1(self.conv1(x)))
        h = ad.relu(self.norm2(self.conv2(h)))
        h = ad.relu(self.norm3(self.conv3(h)))
        return ad.add(h, self.residual(x))


@dataclass
class CoarseModel:
    encoder: EncoderLift
    backbone: nnet.UNet3D
    schedule: BridgeSchedule
    dims: tuple[int, int, int]  # generated volume dims (x, y, z)
    fusion: FusionBlock | None = None  # present iff bi-planar
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def modules(self) -> nnet.Module:
        holder = nnet.Module()
        holder.encoder = self.encoder
        holder.backbone = self.backbone
        if self.fusion is not None:
            holder.fusion = self.fusion
        return holder


def build_coarse_model(r: int, dims: tuple[int, int, int], schedule: BridgeSchedule,
                       rng: SeededRng, bi_planar: bool = False,
                       base_channels: int = 8, channel_mults=(1, 2),
                       spacing=(1.0, 1.0, 1.0)) -> CoarseModel:
    d = dims[1]  # depth channels lift into the volume y axis for PA views
    encoder = EncoderLift(r, d, rng)
    backbone = nnet.UNet3D(base_channels, channel_mults, in_ch=1, out_ch=1,
                           cond_ch=1, rng=rng)
    fusion = FusionBlock(rng) if bi_planar else None
    return CoarseModel(encoder, backbone, schedule, tuple(dims), fusion, tuple(spacing))


def _projection_tensor(p: Projection) -> ad.Tensor:
    if np.min(p.data) < -1e-9 or np.max(p.data) > 1.0 + 1e-9:
        raise VoxError("projection must be standardized to [0, 1]")
    return ad.Tensor(p.data[None, None, :, :])


def _lift_to_volume_frame(feat: ad.Tensor, view_tag: str) -> ad.Tensor:
    """(B, depth, rows, cols) -> (B, 1, D=z, H=y, W=x) per view geometry."""
    b, depth, rows, cols = feat.shape
    if view_tag == PA:
        # rows=z, cols=x, channels=y
        moved = ad.reshape(feat, (b, 1, depth, rows, cols))  # (B,1,y,z,x)
        return _transpose_dhw(moved, (1, 0, 2))  # -> (z,y,x)
    if view_tag == LATERAL:
        # rows=z, cols=y, channels=x
        moved = ad.reshape(feat, (b, 1, depth, rows, cols))  # (B,1,x,z,y)
        return _transpose_dhw(moved, (1, 2, 0))
    raise VoxError(f"unknown view tag {view_tag!r}")


def _transpose_dhw(x: ad.Tensor, order) -> ad.Tensor:
    """Permute the three spatial axes of a (B, C, D, H, W) tensor."""
    perm = (0, 1) + tuple(2 + i for i in order)
    inv = np.argsort(perm)
    data = np.ascontiguousarray(x.data.transpose(perm))

    def backward():
        x.accumulate(np.ascontiguousarray(out.grad.transpose(inv)))

    out = ad._make(data, (x,), backward)
    return out


def _encode_tensor(m: CoarseModel, views) -> ad.Tensor:
    views = list(views) if isinstance(views, (list, tuple)) else [views]
    if not 1 <= len(views) <= 2:
        raise VoxError("expected one or two views")
    tags = [v.view_tag for v in views]
    if tags.count(PA) != 1:
        raise VoxError(f"expected exactly one frontal view, got {tags}")
    if len(views) == 2 and LATERAL not in tags:
        raise VoxError("second view must be lateral")
    views = sorted(views, key=lambda v: 0 if v.view_tag == PA else 1)

    lifted = []
    for view in views:
        feat = m.encoder(_projection_tensor(view))
        p_u, p_v = view.dims
        if (p_u % m.encoder.r or p_v % m.encoder.r
                or feat.shape[2] != p_v // m.encoder.r
                or feat.shape[3] != p_u // m.encoder.r):
            raise VoxError("projection resolution incompatible with encoder factor")
        vol_frame = _lift_to_volume_frame(feat, view.view_tag)
        want = (1, 1, m.dims[2], m.dims[1], m.dims[0])
        if vol_frame.shape != want:
            raise VoxError(
                f"view {view.dims} lifts to {vol_frame.shape[2:]}, model expects {want[2:]}")
        lifted.append(vol_frame)
    if len(lifted) == 1:
        return lifted[0]
    if m.fusion is None:
        raise VoxError("bi-planar input requires a fusion block")
    return m.fusion(ad.concat(lifted, axis=1))


def encode_condition(m: CoarseModel, views) -> Volume:
    """F(x): single view lifts directly; two views fuse after shared-weight
    encoding. Returns an (h, w, d) volume in the model's spacing."""
    cond = _encode_tensor(m, views)
    return grid_to_volume(cond.data[0, 0], m.spacing, NORMALIZED_PM1)


def bridge_forward(x0: Volume, xT: Volume, t: int, sched: BridgeSchedule,
                   rng: SeededRng) -> tuple[Volume, Volume]:
    """x_t = (1 - alpha_t) x_0 + alpha_t x_T + sqrt(delta_t) eps."""
    if x0.dims != xT.dims:
        raise VoxError(f"endpoint dims differ: {x0.dims} vs {xT.dims}")
    if not 0 <= t <= sched.T:
        raise VoxError(f"t={t} outside [0, {sched.T}]")
    eps = rng.normal(x0.dims)
    a = sched.alpha[t]
    d = sched.delta[t]
    data = (1.0 - a) * x0.data + a * xT.data + np.sqrt(d) * eps
    return (Volume(x0.dims, x0.spacing, data, x0.domain_tag),
            Volume(x0.dims, x0.spacing, eps, x0.domain_tag))


def coarse_loss(m: CoarseModel, x0: Volume, views, t: int, rng: SeededRng) -> float:
    """Squared-error bridge loss; populates gradients of encoder, fusion,
    and backbone jointly (the condition enters state, target, and network)."""
    x0.assert_domain(NORMALIZED_PM1, "training volume")
    if not x0.check_range():
        raise VoxError("training volume exceeds [-1, 1]")
    if not 0 <= t <= m.schedule.T:
        raise VoxError(f"t={t} outside schedule")
    cond = _encode_tensor(m, views)  # (1,1,D,H,W), gradients flow
    x0_t = ad.Tensor(volume_to_grid(x0)[None, None])
    if cond.shape != x0_t.shape:
        raise VoxError(f"encoded condition {cond.shape} != volume {x0_t.shape}")
    eps = ad.Tensor(rng.normal(x0_t.shape))
    a = float(m.schedule.alpha[t])
    d = float(m.schedule.delta[t])
    x_t = ad.add(ad.add(ad.mul(x0_t, 1.0 - a), ad.mul(cond, a)), ad.mul(eps, np.sqrt(d)))
    target = ad.add(ad.mul(ad.sub(cond, x0_t), a), ad.mul(eps, np.sqrt(d)))
    pred = m.backbone(x_t, t=t, cond=cond)
    loss = ad.mse_loss(pred, target)
    loss.backward()
    return float(loss.data)


def _predict_residual(m: CoarseModel, x: np.ndarray, t: int, cond: ad.Tensor) -> np.ndarray:
    return m.backbone(ad.Tensor(x), t=t, cond=cond).data


def bridge_sample(m: CoarseModel, views, plan: DdimPlan, rng: SeededRng,
                  predictor=None) -> Volume:
    """Reverse bridge from x_T = F(x) down the DDIM plan; eta=0 is fully
    deterministic. ``predictor`` overrides the backbone (test oracle hook)."""
    if not plan.sub_steps:
        raise VoxError("empty sampling plan")
    if plan.sub_steps[-1] != m.schedule.T:
        raise VoxError("plan must end at T")
    cond = _encode_tensor(m, views)
    xT = cond.data.copy()
    x = xT.copy()
    alpha = m.schedule.alpha
    delta = m.schedule.delta
    steps = list(plan.sub_steps)[::-1]  # descending
    nexts = steps[1:] + [0]
    for t_cur, t_next in zip(steps, nexts):
        if predictor is not None:
            r_hat = predictor(x, t_cur)
        else:
            r_hat = _predict_residual(m, x, t_cur, cond)
        x0_hat = x - r_hat
        a_cur, a_next = alpha[t_cur], alpha[t_next]
        d_cur, d_next = delta[t_cur], delta[t_next]
        noise_part = x - (1.0 - a_cur) * x0_hat - a_cur * xT
        coef = np.sqrt(d_next / d_cur) if d_cur > 0 else 0.0
        x = (1.0 - a_next) * x0_hat + a_next * xT + np.sqrt(1.0 - plan.eta) * coef * noise_part
        if plan.eta > 0:
            x = x + np.sqrt(plan.eta * d_next) * rng.normal(x.shape)
    return grid_to_volume(x[0, 0], m.spacing, NORMALIZED_PM1)
