"""Network components, reverse-mode gradients and a functional Adam optimizer.

Parameters are passed around as ordered ``{name: tensor}`` dicts so every loss can
be written as ``loss_fn(params, batch)`` and evaluated through
:func:`torch.func.functional_call`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.func import functional_call


class NonFiniteLossError(FloatingPointError):
    def __init__(self, value, batch_index=None, epoch=None):
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if batch_index is not None:
            where.append(f"batch {batch_index}")
        loc = " at " + ", ".join(where) if where else ""
        super().__init__(f"non-finite loss {value}{loc}")
        self.batch_index = batch_index
        self.epoch = epoch


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


class Encoder(nn.Module):
    """Strided conv stack with ELU, flattened to the embedding."""

    def __init__(self, image_shape=(48, 64), channels=(24, 36, 48, 64), kernels=(5, 5, 5, 3),
                 strides=(2, 2, 2, 1), paddings=(2, 2, 2, 0), dropout=0.5):
        super().__init__()
        if not len(channels) == len(kernels) == len(strides) == len(paddings):
            raise ValueError("encoder stage lists must have equal length")
        self.image_shape = tuple(image_shape)
        self.kernels = tuple(kernels)
        layers = []
        shapes = [tuple(image_shape)]
        c_in = 1
        for c, k, s, p in zip(channels, kernels, strides, paddings):
            layers += [nn.Conv2d(c_in, c, k, s, p), nn.ELU()]
            h, w = shapes[-1]
            shapes.append((_conv_out(h, k, s, p), _conv_out(w, k, s, p)))
            if min(shapes[-1]) < 1:
                raise ValueError(f"image shape {image_shape} too small for the encoder stages")
            c_in = c
        self.convs = nn.Sequential(*layers)
        self.dropout = nn.Dropout(dropout) if dropout else nn.Identity()
        self.stage_shapes = shapes
        self.channels = tuple(channels)
        self.grid_shape = (channels[-1],) + shapes[-1]
        self.embed_dim = int(np.prod(self.grid_shape))

    def forward(self, x):
        return self.dropout(self.convs(x).flatten(1))


class Decoder(nn.Module):
    """Mirror of an encoder: nearest upsample to each encoder stage size, then conv.

    The last stage maps to one channel with a sigmoid so outputs live in [0, 1].
    """

    def __init__(self, encoder: Encoder, channels=(32, 16, 8), kernel=3):
        super().__init__()
        self.grid_shape = encoder.grid_shape
        targets = list(reversed(encoder.stage_shapes[:-1]))
        chans = [encoder.grid_shape[0], *channels, 1]
        if len(chans) - 1 != len(targets):
            raise ValueError("decoder needs one channel width per encoder stage (minus the output)")
        stages = []
        for i, size in enumerate(targets):
            last = i == len(targets) - 1
            stages += [nn.Upsample(size=size, mode="nearest"),
                       nn.Conv2d(chans[i], chans[i + 1], kernel, 1, kernel // 2),
                       nn.Sigmoid() if last else nn.ELU()]
        self.stages = nn.Sequential(*stages)

    def forward(self, z):
        return self.stages(z.reshape(-1, *self.grid_shape))


class EquivariantMap(nn.Module):
    """D -> hidden -> D with ELU between; with ``bypass`` the input is added to the output."""

    def __init__(self, dim, hidden=128, bypass=True):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ELU(), nn.Linear(hidden, dim))
        self.bypass = bypass

    def forward(self, z):
        out = self.net(z)
        return z + out if self.bypass else out


class PolicyHead(nn.Module):
    def __init__(self, dim, action_dim, hidden=(100, 10)):
        super().__init__()
        layers = []
        d = dim
        for h in hidden:
            layers += [nn.Linear(d, h), nn.ReLU()]
            d = h
        layers.append(nn.Linear(d, action_dim))
        self.net = nn.Sequential(*layers)
        self.action_dim = action_dim

    def forward(self, z):
        return self.net(z)


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Fan-in scaled uniform weights (bound sqrt(6 / fan_in)), zero biases.

    Maps with a bypass get a zero output layer, so they start as the identity.
    """
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = int(np.prod(p.shape[1:]))
                bound = math.sqrt(6.0 / fan_in)
                p.copy_(torch.rand(p.shape, generator=g, dtype=p.dtype) * 2 * bound - bound)
        # bypass maps start as the identity
        for m in module.modules():
            if isinstance(m, EquivariantMap) and m.bypass:
                m.net[-1].weight.zero_()
    return module


def param_hash(params) -> str:
    """SHA-256 over names, shapes and raw bytes of a module's or dict's parameters."""
    if isinstance(params, nn.Module):
        params = dict(params.named_parameters())
    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def as_image_tensor(images, image_shape=None) -> torch.Tensor:
    """uint8 or float images (H, W) / (N, H, W) / (N, 1, H, W) -> float tensor (N, 1, H, W) in [0, 1]."""
    if isinstance(images, torch.Tensor):
        x = images
    else:
        a = np.asarray(images)
        x = torch.from_numpy(a.astype(np.float32) / 255.0 if a.dtype == np.uint8 else a.astype(np.float32))
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    if x.dim() != 4 or x.shape[1] != 1:
        raise ValueError(f"expected grayscale images, got shape {tuple(x.shape)}")
    if image_shape is not None and tuple(x.shape[-2:]) != tuple(image_shape):
        raise ValueError(f"image shape {tuple(x.shape[-2:])} does not match {tuple(image_shape)}")
    return x


def _check_dim(z, dim):
    z = torch.as_tensor(np.asarray(z, dtype=np.float32)) if not isinstance(z, torch.Tensor) else z
    if z.dim() == 1:
        z = z[None]
    if z.shape[-1] != dim:
        raise ValueError(f"embedding dimension {z.shape[-1]} does not match {dim}")
    if not torch.isfinite(z).all():
        raise ValueError("embeddings contain non-finite values")
    return z


@torch.no_grad()
def encode(encoder: Encoder, images, batch_size=512) -> np.ndarray:
    """Embed images in inference mode (dropout off). Returns (N, D) float32."""
    was_training = encoder.training
    encoder.eval()
    x = as_image_tensor(images, encoder.image_shape)
    if not torch.isfinite(x).all():
        raise ValueError("images contain non-finite values")
    dtype = next(encoder.parameters()).dtype
    out = [encoder(x[i:i + batch_size].to(dtype)) for i in range(0, len(x), batch_size)]
    encoder.train(was_training)
    return torch.cat(out).float().numpy()


@torch.no_grad()
def decode(decoder: Decoder, z) -> np.ndarray:
    z = _check_dim(z, int(np.prod(decoder.grid_shape)))
    dtype = next(decoder.parameters()).dtype
    return decoder(z.to(dtype))[:, 0].float().numpy()


@torch.no_grad()
def map_embed(mapping: nn.Module, z) -> np.ndarray:
    dim = mapping.net[0].in_features
    z = _check_dim(z, dim)
    dtype = next(mapping.parameters()).dtype
    return mapping(z.to(dtype)).float().numpy()


@torch.no_grad()
def policy_eval(head: PolicyHead, z) -> np.ndarray:
    z = _check_dim(z, head.net[0].in_features)
    dtype = next(head.parameters()).dtype
    return head(z.to(dtype)).float().numpy()


def module_params(module: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.named_parameters()}


def load_params(module: nn.Module, params: dict) -> nn.Module:
    with torch.no_grad():
        for k, p in module.named_parameters():
            p.copy_(params[k])
    return module


def functional(module: nn.Module):
    """Wrap ``module`` so it can be called as ``f(params, *args)``."""
    def call(params, *args, **kwargs):
        return functional_call(module, params, args, kwargs)
    return call


def value_and_grad(loss_fn, params: dict, batch, batch_index=None):
    """Loss value and exact reverse-mode gradients w.r.t. every entry of ``params``.

    ``loss_fn(params, batch)`` must return a scalar tensor. Gradients of
    parameters the loss does not touch are zeros of the right shape.
    """
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(leaves, batch)
    if not torch.is_tensor(loss):
        loss = torch.as_tensor(loss, dtype=torch.float64)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLossError(value, batch_index)
    names = list(leaves)
    if not loss.requires_grad or not names:
        return value, {k: torch.zeros_like(v) for k, v in leaves.items()}
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    return value, {k: (torch.zeros_like(leaves[k]) if g is None else g.detach())
                   for k, g in zip(names, grads)}


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, **kwargs):
        return cls(m={k: torch.zeros_like(p) for k, p in params.items()},
                   v={k: torch.zeros_like(p) for k, p in params.items()}, **kwargs)


def adam_step(state: AdamState, params: dict, grads: dict):
    """One bias-corrected Adam update. Returns (new_state, new_params); inputs are not modified."""
    if set(params) != set(grads):
        raise ValueError("params and gradients name different tensors")
    if not state.m:
        state = AdamState.for_params(params, lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                                     eps=state.eps)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m, v, new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: param {tuple(p.shape)}, grad {tuple(g.shape)}")
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1**t)
        v_hat = v[k] / (1 - b2**t)
        new[k] = p - state.lr * m_hat / (v_hat.sqrt() + state.eps)
    return AdamState(state.lr, b1, b2, state.eps, t, m, v), new


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: str | None
    passed: bool
    errors: dict = field(default_factory=dict)


def finite_diff_check(loss_fn, params: dict, batch, tolerance=1e-4, h=1e-4, max_coords=2000,
                      seed=0, floor=1e-7) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences on sampled coordinates.

    Relative error per coordinate is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)``.
    Run in float64 for tolerances near 1e-4.
    """
    if not params:
        return GradCheckReport(0.0, 0, None, True)
    _, grads = value_and_grad(loss_fn, params, batch)
    coords = [(k, i) for k, p in params.items() for i in range(p.numel())]
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst, worst_err = None, 0.0
    errors = {}
    with torch.no_grad():
        for k, i in coords:
            base = params[k]
            flat = base.reshape(-1)
            orig = flat[i].item()
            plus = dict(params)
            minus = dict(params)
            tp = flat.clone()
            tp[i] = orig + h
            plus[k] = tp.reshape(base.shape)
            tm = flat.clone()
            tm[i] = orig - h
            minus[k] = tm.reshape(base.shape)
            fd = (float(loss_fn(plus, batch)) - float(loss_fn(minus, batch))) / (2 * h)
            ad = float(grads[k].reshape(-1)[i])
            err = abs(ad - fd) / max(abs(ad), abs(fd), floor)
            errors[f"{k}[{i}]"] = err
            if err > worst_err or worst is None:
                worst, worst_err = f"{k}[{i}]", err
    return GradCheckReport(worst_err, len(coords), worst, worst_err < tolerance, errors)
