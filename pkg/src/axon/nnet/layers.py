"""Parameterized layers and the compact 3D U-Net used by every stage.

Modules register parameters by attribute walk (insertion order), so
parameter names are stable across runs: "stem.weight", "enc.0.b1.conv1.bias",
etc. Initialization draws from a SeededRng for bit reproducibility.
"""
from __future__ import annotations

import numpy as np

from ..voxcore import SeededRng, VoxError
from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base with recursive named-parameter discovery."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def set_requires_grad(self, flag: bool):
        for _, t in self.named_parameters():
            t.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own = dict(self.named_parameters())
        for name, arr in state.items():
            if name not in own:
                if strict:
                    raise VoxError(f"unexpected parameter {name!r}")
                continue
            if own[name].data.shape != arr.shape:
                raise VoxError(f"shape mismatch for {name}: {own[name].data.shape} vs {arr.shape}")
            own[name].data = np.asarray(arr, dtype=np.float64).copy()
        if strict:
            missing = set(own) - set(state)
            if missing:
                raise VoxError(f"missing parameters: {sorted(missing)}")


def _init_weight(rng: SeededRng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Conv3d(Module):
    def __init__(self, in_ch, out_ch, k, rng: SeededRng, stride=1, pad=0, zero_init=False):
        k3 = (k,) * 3 if isinstance(k, int) else tuple(k)
        self.stride = stride
        self.pad = pad
        fan_in = in_ch * int(np.prod(k3))
        w = np.zeros((out_ch, in_ch) + k3) if zero_init else _init_weight(
            rng, (out_ch, in_ch) + k3, fan_in)
        self.weight = Tensor(w, requires_grad=True)
        b = np.zeros(out_ch) if zero_init else _init_weight(rng, (out_ch,), fan_in)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x):
        return ad.conv3d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, k, rng: SeededRng, stride=1, pad=0):
        k2 = (k,) * 2 if isinstance(k, int) else tuple(k)
        self.stride = stride
        self.pad = pad
        fan_in = in_ch * int(np.prod(k2))
        self.weight = Tensor(_init_weight(rng, (out_ch, in_ch) + k2, fan_in), requires_grad=True)
        self.bias = Tensor(_init_weight(rng, (out_ch,), fan_in), requires_grad=True)

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class ConvTranspose3d(Module):
    def __init__(self, in_ch, out_ch, k, rng: SeededRng, stride=1, pad=0):
        k3 = (k,) * 3 if isinstance(k, int) else tuple(k)
        self.stride = stride
        self.pad = pad
        fan_in = in_ch * int(np.prod(k3))
        self.weight = Tensor(_init_weight(rng, (in_ch, out_ch) + k3, fan_in), requires_grad=True)
        self.bias = Tensor(_init_weight(rng, (out_ch,), fan_in), requires_grad=True)

    def __call__(self, x):
        return ad.conv_transpose3d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, k, rng: SeededRng, stride=1, pad=0):
        k2 = (k,) * 2 if isinstance(k, int) else tuple(k)
        self.stride = stride
        self.pad = pad
        fan_in = in_ch * int(np.prod(k2))
        self.weight = Tensor(_init_weight(rng, (in_ch, out_ch) + k2, fan_in), requires_grad=True)
        self.bias = Tensor(_init_weight(rng, (out_ch,), fan_in), requires_grad=True)

    def __call__(self, x):
        return ad.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class GroupNorm(Module):
    def __init__(self, channels: int, num_groups: int | None = None, eps: float = 1e-5):
        if num_groups is None:
            num_groups = _pick_groups(channels)
        if channels % num_groups != 0:
            raise VoxError(f"channels {channels} not divisible by groups {num_groups}")
        self.num_groups = num_groups
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x):
        return ad.group_norm(x, self.num_groups, self.gamma, self.beta, self.eps)


def _pick_groups(channels: int) -> int:
    for g in (4, 2):
        if channels % g == 0:
            return g
    return 1


class Linear(Module):
    def __init__(self, in_f, out_f, rng: SeededRng, zero_init=False):
        w = np.zeros((in_f, out_f)) if zero_init else _init_weight(rng, (in_f, out_f), in_f)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_f), requires_grad=True)

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class ResBlock3d(Module):
    """conv -> +time -> groupnorm -> silu, twice, with a residual skip."""

    def __init__(self, in_ch, out_ch, emb_dim, rng: SeededRng):
        self.conv1 = Conv3d(in_ch, out_ch, 3, rng, pad=1)
        self.emb_proj = Linear(emb_dim, out_ch, rng)
        self.norm1 = GroupNorm(out_ch)
        self.conv2 = Conv3d(out_ch, out_ch, 3, rng, pad=1)
        self.norm2 = GroupNorm(out_ch)
        self.skip = Conv3d(in_ch, out_ch, 1, rng) if in_ch != out_ch else None

    def __call__(self, x, emb):
        h = self.conv1(x)
        e = self.emb_proj(emb)
        h = ad.add(h, ad.reshape(e, e.shape + (1, 1, 1)))
        h = ad.silu(self.norm1(h))
        h = ad.silu(self.norm2(self.conv2(h)))
        return ad.add(h, self.skip(x) if self.skip is not None else x)


class UNet3D(Module):
    """Encoder-decoder over volumes with skip connections and optional
    per-junction additive control inputs (ControlNet-style)."""

    def __init__(self, base_channels: int, channel_mults, in_ch: int, out_ch: int,
                 cond_ch: int, rng: SeededRng, emb_dim: int | None = None):
        mults = tuple(int(m) for m in channel_mults)
        if len(mults) < 1:
            raise VoxError("need at least one resolution level")
        chans = [base_channels * m for m in mults]
        if any(c < 1 for c in chans) or base_channels < 1:
            raise VoxError("channel counts must be >= 1")
        self.in_ch = in_ch
        self.cond_ch = cond_ch
        self.out_ch = out_ch
        self.levels = len(mults)
        self.emb_dim = emb_dim if emb_dim is not None else max(4 * base_channels, 8)
        if self.emb_dim % 2:
            self.emb_dim += 1

        self.stem = Conv3d(in_ch + cond_ch, chans[0], 3, rng, pad=1)
        self.enc1 = []
        self.enc2 = []
        self.down = []
        for i, ch in enumerate(chans):
            prev = chans[0] if i == 0 else chans[i - 1]
            self.enc1.append(ResBlock3d(prev, ch, self.emb_dim, rng))
            self.enc2.append(ResBlock3d(ch, ch, self.emb_dim, rng))
            if i < self.levels - 1:
                self.down.append(Conv3d(ch, ch, 3, rng, stride=2, pad=1))
        self.mid = ResBlock3d(chans[-1], chans[-1], self.emb_dim, rng)
        self.dec1 = []
        self.dec2 = []
        self.up = []
        for i, ch in enumerate(chans):
            self.dec1.append(ResBlock3d(2 * ch, ch, self.emb_dim, rng))
            self.dec2.append(ResBlock3d(ch, ch, self.emb_dim, rng))
            if i > 0:
                self.up.append(ConvTranspose3d(ch, chans[i - 1], 2, rng, stride=2))
        self.out_norm = GroupNorm(chans[0])
        self.out_conv = Conv3d(chans[0], out_ch, 3, rng, pad=1)
        self.skip_channels = chans

    def encode(self, h, emb):
        skips = []
        for i in range(self.levels):
            h = self.enc1[i](h, emb)
            h = self.enc2[i](h, emb)
            skips.append(h)
            if i < self.levels - 1:
                h = self.down[i](h)
        return h, skips

    def __call__(self, x, t, cond=None, control=None):
        """x: (B, in_ch, D, H, W); t: scalar or (B,) timesteps; cond is
        channel-concatenated; control is a list of levels+1 additive tensors
        ([skip_0.., skip_{L-1}, mid]) or None."""
        if cond is not None:
            x = ad.concat([x, cond], axis=1)
        if x.shape[1] != self.in_ch + self.cond_ch:
            raise VoxError(
                f"expected {self.in_ch + self.cond_ch} input channels, got {x.shape[1]}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        emb = ad.time_embedding(t, self.emb_dim)
        h = self.stem(x)
        h, skips = self.encode(h, emb)
        if control is not None:
            if len(control) != self.levels + 1:
                raise VoxError(f"expected {self.levels + 1} control tensors")
            skips = [ad.add(s, c) for s, c in zip(skips, control[:-1])]
            h = ad.add(h, control[-1])
        h = self.mid(h, emb)
        for i in reversed(range(self.levels)):
            h = ad.concat([h, skips[i]], axis=1)
            h = self.dec1[i](h, emb)
            h = self.dec2[i](h, emb)
            if i > 0:
                h = self.up[i - 1](h)
        return self.out_conv(ad.silu(self.out_norm(h)))


class ControlBranch3d(Module):
    """Trainable copy of a UNet3D encoder emitting zero-initialized
    projections into the host net's skip/mid junctions.

    Input is the diffusion state concatenated with the condition volume;
    weights of matching shapes are copied from the host so the branch starts
    from the host's representation, and every projection conv starts at zero
    so attaching the branch is a bit-exact no-op.
    """

    def __init__(self, host: UNet3D, cond_ch: int, rng: SeededRng):
        self.levels = host.levels
        self.emb_dim = host.emb_dim
        in_ch = host.in_ch + cond_ch
        chans = host.skip_channels
        self.stem = Conv3d(in_ch, chans[0], 3, rng, pad=1)
        self.enc1 = []
        self.enc2 = []
        self.down = []
        for i, ch in enumerate(chans):
            prev = chans[0] if i == 0 else chans[i - 1]
            self.enc1.append(ResBlock3d(prev, ch, self.emb_dim, rng))
            self.enc2.append(ResBlock3d(ch, ch, self.emb_dim, rng))
            if i < self.levels - 1:
                self.down.append(Conv3d(ch, ch, 3, rng, stride=2, pad=1))
        self.mid = ResBlock3d(chans[-1], chans[-1], self.emb_dim, rng)
        self.proj = [Conv3d(ch, ch, 1, rng, zero_init=True) for ch in chans]
        self.proj_mid = Conv3d(chans[-1], chans[-1], 1, rng, zero_init=True)
        self._copy_host_weights(host)

    def _copy_host_weights(self, host: UNet3D):
        own = dict(self.named_parameters())
        for name, src in host.named_parameters():
            dst = own.get(name)
            if dst is not None and dst.data.shape == src.data.shape:
                dst.data = src.data.copy()

    def __call__(self, x, cond, t):
        x = ad.concat([x, cond], axis=1)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        emb = ad.time_embedding(t, self.emb_dim)
        h = self.stem(x)
        outs = []
        for i in range(self.levels):
            h = self.enc1[i](h, emb)
            h = self.enc2[i](h, emb)
            outs.append(self.proj[i](h))
            if i < self.levels - 1:
                h = self.down[i](h)
        h = self.mid(h, emb)
        outs.append(self.proj_mid(h))
        return outs


class VoxelMLP(Module):
    """Per-voxel MLP (1x1x1 convs) with time-embedding injection; handy as a
    backbone when the target function has no spatial coupling."""

    def __init__(self, in_ch, out_ch, hidden, rng: SeededRng, emb_dim: int = 16):
        self.emb_dim = emb_dim
        self.in_ch = in_ch
        self.fc1 = Conv3d(in_ch, hidden, 1, rng)
        self.emb_proj = Linear(emb_dim, hidden, rng)
        self.fc2 = Conv3d(hidden, hidden, 1, rng)
        self.fc3 = Conv3d(hidden, out_ch, 1, rng)

    def __call__(self, x, t, cond=None, control=None):
        if cond is not None:
            x = ad.concat([x, cond], axis=1)
        if control is not None:
            raise VoxError("VoxelMLP does not accept control inputs")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        emb = self.emb_proj(ad.time_embedding(t, self.emb_dim))
        h = self.fc1(x)
        h = ad.silu(ad.add(h, ad.reshape(emb, emb.shape + (1, 1, 1))))
        h = ad.silu(self.fc2(h))
        return self.fc3(h)


def build_unet3d(base_channels: int, channel_mults, in_ch: int, out_ch: int,
                 cond_ch: int, rng: SeededRng | None = None) -> UNet3D:
    if rng is None:
        rng = SeededRng(0)
    return UNet3D(base_channels, channel_mults, in_ch, out_ch, cond_ch, rng)
