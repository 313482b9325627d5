"""Tiny networks and batches shared by the gradient and oracle tests."""

import numpy as np
import torch

from equinav.netcore import PolicyHead, functional, init_params
from equinav.replearn import LossWeights, RepresentationNet, ReprTrainConfig

MINI_SHAPE = (12, 16)   # 16 wide, 12 high
MINI_CONFIG = dict(channels=(3, 4), kernels=(3, 3), strides=(2, 1), paddings=(1, 1),
                   decoder_channels=(3,), map_hidden=5, dropout=0.0)


def mini_net(seed=0, viewpoints=("center", "left", "right"), dtype=torch.float64):
    cfg = ReprTrainConfig(seed=seed, **MINI_CONFIG)
    net = RepresentationNet(MINI_SHAPE, list(viewpoints), cfg)
    init_params(net, seed)
    # give the maps a non-trivial output layer so their gradients are exercised
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for m in net.maps.values():
            m.net[-1].weight.copy_(torch.randn(m.net[-1].weight.shape, generator=g) * 0.1)
    return net.to(dtype).eval()


def mini_batch(seed=0, b=3, v=3, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.uniform(size=(b, v) + MINI_SHAPE)).to(dtype)


def params_of(module):
    return {k: v.detach().clone() for k, v in module.named_parameters()}


def loss_fns(net):
    """name -> loss_fn(params, batch) for every representation loss of ``net``."""
    call = functional(net)
    w = {"loss_rc": LossWeights(1, 0, 0), "loss_eq": LossWeights(0, 1, 0),
         "loss_eq_rc": LossWeights(0, 0, 1), "loss_total": LossWeights()}
    return {name: (lambda p, b, ww=ww: call(p, b, ww)) for name, ww in w.items()}


def mini_policy(dim=10, k=1, seed=0, dtype=torch.float64):
    head = PolicyHead(dim, k, hidden=(6, 4))
    init_params(head, seed)
    return head.to(dtype)
