"""Representation learning: reconstruction, equivariance and cross-view reconstruction losses.

Batches are image tuples shaped (B, V, H, W) (or (B, V, 1, H, W)); viewpoint 0 is
the center camera and one map is trained per other viewpoint. All losses sum
over viewpoints and pixels / embedding coordinates and average over the batch.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from equinav.netcore import (
    AdamState,
    Decoder,
    Encoder,
    EquivariantMap,
    NonFiniteLossError,
    adam_step,
    as_image_tensor,
    encode,
    functional,
    init_params,
    load_params,
    module_params,
    param_hash,
    value_and_grad,
)
from equinav.io import read_container, write_container
from equinav.validation import check_embeddings, check_image_tuples

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    rc: float = 1.0
    eq: float = 10.0
    eq_rc: float = 1.0

    def __post_init__(self):
        if min(self.rc, self.eq, self.eq_rc) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class ReprTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.1
    patience: int = 5
    weights: LossWeights = field(default_factory=LossWeights)
    dropout: float = 0.5
    channels: tuple = (24, 36, 48, 64)
    kernels: tuple = (5, 5, 5, 3)
    strides: tuple = (2, 2, 2, 1)
    paddings: tuple = (2, 2, 2, 0)
    decoder_channels: tuple = (32, 16, 8)
    map_hidden: int = 128
    pairwise: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction <= 0.5:
            raise ValueError("val_fraction must lie in [0, 0.5]")


def _as_tuple_tensor(images):
    x = images if isinstance(images, torch.Tensor) else torch.as_tensor(np.asarray(images))
    if x.dtype == torch.uint8:
        x = x.float() / 255.0
    if x.dim() == 5:
        x = x[:, :, 0]
    if x.dim() != 4:
        raise ValueError(f"expected image tuples (B, V, H, W), got {tuple(x.shape)}")
    return x


def _sqdist(a, b):
    return ((a - b) ** 2).flatten(1).sum(1)


def loss_eq(maps, z):
    """sum_j ||Z_j - M_{c->j}(Z_c)||^2, batch mean. ``z`` is (B, V, D); ``maps`` has V - 1 entries."""
    maps = list(maps.values()) if isinstance(maps, nn.ModuleDict) else list(maps)
    if z.dim() != 3 or z.shape[1] != len(maps) + 1:
        raise ValueError("need one map per non-center viewpoint")
    zc = z[:, 0]
    total = z.new_zeros(z.shape[0])
    for j, m in enumerate(maps, start=1):
        total = total + _sqdist(z[:, j], m(zc))
    return total.mean()


def loss_rc(encoder, decoder, images):
    """sum_i ||I_i - p(z(I_i))||^2 over viewpoints, batch mean."""
    x = _as_tuple_tensor(images).to(next(encoder.parameters()).dtype)
    b, v = x.shape[:2]
    flat = x.reshape(b * v, 1, *x.shape[2:])
    rec = decoder(encoder(flat))
    return _sqdist(rec, flat).reshape(b, v).sum(1).mean()


def loss_eq_rc(encoder, decoder, maps, images):
    """sum_j ||I_j - p(M_{c->j}(z(I_c)))||^2, batch mean."""
    maps = list(maps.values()) if isinstance(maps, nn.ModuleDict) else list(maps)
    x = _as_tuple_tensor(images).to(next(encoder.parameters()).dtype)
    if x.shape[1] != len(maps) + 1:
        raise ValueError("need one map per non-center viewpoint")
    zc = encoder(x[:, :1])
    total = x.new_zeros(x.shape[0])
    for j, m in enumerate(maps, start=1):
        total = total + _sqdist(decoder(m(zc)), x[:, j:j + 1])
    return total.mean()


class RepresentationNet(nn.Module):
    """Siamese encoder, shared decoder and one map per off-center viewpoint."""

    def __init__(self, image_shape, viewpoints, config: ReprTrainConfig):
        super().__init__()
        if len(viewpoints) < 2 or viewpoints[0] != "center":
            raise ValueError("need the center viewpoint first plus at least one other")
        self.viewpoints = list(viewpoints)
        self.encoder = Encoder(image_shape, channels=config.channels, kernels=config.kernels,
                               strides=config.strides, paddings=config.paddings, dropout=config.dropout)
        self.decoder = Decoder(self.encoder, channels=config.decoder_channels)
        d = self.encoder.embed_dim
        self.maps = nn.ModuleDict({v: EquivariantMap(d, config.map_hidden) for v in self.viewpoints[1:]})
        # inverse maps, only used in pairwise mode
        self.pair_maps = nn.ModuleDict()
        if config.pairwise:
            for i in self.viewpoints:
                for j in self.viewpoints:
                    if i != j and i != "center":
                        self.pair_maps[f"{i}__{j}"] = EquivariantMap(d, config.map_hidden)

    def losses(self, images, weights: LossWeights):
        """All three losses from one shared encoder pass; zero-weight terms are skipped."""
        x = _as_tuple_tensor(images).to(next(self.parameters()).dtype)
        b, v = x.shape[:2]
        if v != len(self.viewpoints):
            raise ValueError(f"expected {len(self.viewpoints)} viewpoints, got {v}")
        flat = x.reshape(b * v, 1, *x.shape[2:])
        z = self.encoder(flat).reshape(b, v, -1)
        zero = x.new_zeros(())
        out = {"rc": zero, "eq": zero, "eq_rc": zero}
        if weights.rc:
            out["rc"] = _sqdist(self.decoder(z.reshape(b * v, -1)), flat).reshape(b, v).sum(1).mean()
        maps = list(self.maps.values())
        if weights.eq or weights.eq_rc:
            zc = z[:, 0]
            mapped = torch.stack([m(zc) for m in maps], dim=1)  # (B, V-1, D)
            if weights.eq:
                out["eq"] = _sqdist(mapped.reshape(b * (v - 1), -1),
                                    z[:, 1:].reshape(b * (v - 1), -1)).reshape(b, v - 1).sum(1).mean()
                if len(self.pair_maps):
                    for key, m in self.pair_maps.items():
                        i, j = key.split("__")
                        zi = z[:, self.viewpoints.index(i)]
                        zj = z[:, self.viewpoints.index(j)]
                        out["eq"] = out["eq"] + _sqdist(zj, m(zi)).mean()
            if weights.eq_rc:
                rec = self.decoder(mapped.reshape(b * (v - 1), -1))
                out["eq_rc"] = _sqdist(rec, flat.reshape(b, v, 1, *x.shape[2:])[:, 1:].reshape(
                    b * (v - 1), 1, *x.shape[2:])).reshape(b, v - 1).sum(1).mean()
        out["total"] = weights.rc * out["rc"] + weights.eq * out["eq"] + weights.eq_rc * out["eq_rc"]
        return out

    def forward(self, images, weights: LossWeights):
        return self.losses(images, weights)["total"]


def loss_total(net: RepresentationNet, images, weights: LossWeights = LossWeights()):
    """weights.rc * L_rc + weights.eq * L_eq + weights.eq_rc * L_eq_rc."""
    return net.losses(images, weights)["total"]


@dataclass
class ReprTrainResult:
    net: RepresentationNet
    curve: list          # dicts: epoch, split, loss_rc, loss_eq, loss_eq_rc, loss_total
    train_idx: np.ndarray
    val_idx: np.ndarray
    flagged: bool
    epochs_run: int


def split_by_episode(episodes, val_fraction, seed):
    """Hold out whole episodes; falls back to a trailing frame block with a single episode."""
    episodes = np.asarray(episodes)
    n = len(episodes)
    if val_fraction <= 0:
        return np.arange(n), np.array([], dtype=int)
    uniq = np.unique(episodes)
    if len(uniq) >= 2:
        rng = np.random.default_rng([seed, 99])
        k = max(1, int(round(val_fraction * len(uniq))))
        k = min(k, len(uniq) - 1)
        held = rng.choice(uniq, k, replace=False)
        val = np.isin(episodes, held)
        return np.flatnonzero(~val), np.flatnonzero(val)
    k = max(1, int(round(val_fraction * n)))
    return np.arange(n - k), np.arange(n - k, n)


def _mean_losses(net, images, idx, weights, batch_size):
    if len(idx) == 0:
        return None
    net.eval()
    sums = {"rc": 0.0, "eq": 0.0, "eq_rc": 0.0, "total": 0.0}
    with torch.no_grad():
        for s in range(0, len(idx), batch_size):
            part = idx[s:s + batch_size]
            out = net.losses(images[part], weights)
            for k in sums:
                sums[k] += float(out[k]) * len(part)
    net.train()
    return {k: v / len(idx) for k, v in sums.items()}


def _curve_row(epoch, split, losses):
    return {"epoch": epoch, "split": split, "loss_rc": losses["rc"], "loss_eq": losses["eq"],
            "loss_eq_rc": losses["eq_rc"], "loss_total": losses["total"]}


def train_representation(images, episodes=None, config: ReprTrainConfig | None = None,
                         viewpoints=None, callback=None) -> ReprTrainResult:
    """Jointly train encoder, decoder and maps with Adam on the weighted loss.

    ``images`` is (N, V, H, W) uint8 or float in [0, 1]. Epoch 0 in the curve is
    the untrained model; early stopping restores the best validation epoch.
    """
    config = config or ReprTrainConfig()
    images = check_image_tuples(images)
    n, v = images.shape[:2]
    viewpoints = list(viewpoints) if viewpoints is not None else ["center"] + [f"view{j}" for j in range(1, v)]
    episodes = np.zeros(n, dtype=int) if episodes is None else np.asarray(episodes)
    torch.manual_seed(config.seed)
    net = RepresentationNet(images.shape[2:], viewpoints, config)
    init_params(net, config.seed)
    data = torch.from_numpy(images.astype(np.float32) / 255.0 if images.dtype == np.uint8
                            else images.astype(np.float32))
    train_idx, val_idx = split_by_episode(episodes, config.val_fraction, config.seed)
    weights = config.weights
    call = functional(net)

    def loss_fn(params, batch):
        return call(params, batch, weights)

    # the train curve is tracked on a fixed subset to keep per-epoch evaluation cheap
    probe_idx = train_idx[: min(len(train_idx), 512)]
    curve = [_curve_row(0, "train", _mean_losses(net, data, probe_idx, weights, 256))]
    first_val = _mean_losses(net, data, val_idx, weights, 256)
    if first_val is not None:
        curve.append(_curve_row(0, "val", first_val))
    params = module_params(net)
    state = AdamState.for_params(params, lr=config.lr)
    order_rng = np.random.default_rng([config.seed, 7])
    best = first_val["total"] if first_val is not None else np.inf
    best_params, stale, epochs_run = params, 0, 0
    net.train()
    for epoch in range(1, config.epochs + 1):
        perm = train_idx[order_rng.permutation(len(train_idx))]
        for b, s in enumerate(range(0, len(perm), config.batch_size)):
            part = perm[s:s + config.batch_size]
            batch = data[part]
            try:
                _, grads = value_and_grad(loss_fn, params, batch, batch_index=b)
            except NonFiniteLossError as err:
                raise NonFiniteLossError(err.args[0], batch_index=b, epoch=epoch) from None
            state, params = adam_step(state, params, grads)
        load_params(net, params)
        train_losses = _mean_losses(net, data, probe_idx, weights, 256)
        curve.append(_curve_row(epoch, "train", train_losses))
        epochs_run = epoch
        val_losses = _mean_losses(net, data, val_idx, weights, 256)
        if val_losses is not None:
            curve.append(_curve_row(epoch, "val", val_losses))
            if val_losses["total"] < best:
                best, best_params, stale = val_losses["total"], params, 0
            else:
                stale += 1
        else:
            best_params = params
        log.info("epoch %d train %.4f val %s", epoch, train_losses["total"],
                 None if val_losses is None else round(val_losses["total"], 4))
        if callback is not None:
            callback(epoch, net)
        if val_losses is not None and stale >= config.patience:
            break
    load_params(net, best_params)
    net.eval()
    first_train = curve[0]["loss_total"]
    last_train = [r for r in curve if r["split"] == "train"][-1]["loss_total"]
    flagged = not last_train < first_train
    if flagged:
        log.warning("representation training did not reduce the training loss")
    return ReprTrainResult(net, curve, train_idx, val_idx, flagged, epochs_run)


def config_from_dict(d) -> ReprTrainConfig:
    d = dict(d)
    w = d.pop("weights", {})
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return ReprTrainConfig(weights=LossWeights(**w), **d)


def save_representation(net: RepresentationNet, path, config: ReprTrainConfig, meta: dict | None = None):
    """Every parameter goes into one float32 container; the header carries the architecture."""
    arrays = {k: v.detach().cpu().float().numpy() for k, v in net.state_dict().items()}
    header = {"kind": "representation", "viewpoints": net.viewpoints,
              "image_shape": list(net.encoder.image_shape), "config": asdict(config),
              "param_hash": param_hash(net), **(meta or {})}
    write_container(path, arrays, header)


def load_representation(path):
    """Returns (net, config, meta). The stored parameter hash is checked."""
    arrays, meta = read_container(path)
    if meta.get("kind") != "representation":
        raise ValueError(f"{path} is not a representation checkpoint")
    config = config_from_dict(meta["config"])
    net = RepresentationNet(tuple(meta["image_shape"]), meta["viewpoints"], config)
    net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    net.eval()
    if param_hash(net) != meta["param_hash"]:
        raise ValueError(f"{path}: parameter hash mismatch")
    return net, config, meta


def equivariance_ratio(encoder, maps, image_tuples, viewpoints=None, eps=1e-12):
    """Median over tuples of ||z_j - M(z_c)||^2 / ||z_j - z_c||^2 per off-center viewpoint.

    Returns ``(ratios, skipped)`` dicts keyed by viewpoint; tuples whose
    denominator falls below ``eps`` are skipped and counted.
    """
    x = check_image_tuples(image_tuples)
    n, v = x.shape[:2]
    map_list = list(maps.items()) if isinstance(maps, (dict, nn.ModuleDict)) else \
        list(zip(viewpoints or [f"view{j}" for j in range(1, v)], maps))
    if len(map_list) != v - 1:
        raise ValueError("need one map per non-center viewpoint")
    z = encode(encoder, x.reshape(n * v, *x.shape[2:])).reshape(n, v, -1).astype(np.float64)
    ratios, skipped = {}, {}
    with torch.no_grad():
        for j, (name, m) in enumerate(map_list, start=1):
            dtype = next(m.parameters()).dtype
            pred = m(torch.from_numpy(z[:, 0]).to(dtype)).double().numpy()
            num = ((z[:, j] - pred) ** 2).sum(1)
            den = ((z[:, j] - z[:, 0]) ** 2).sum(1)
            ok = den >= eps
            skipped[name] = int((~ok).sum())
            ratios[name] = float(np.median(num[ok] / den[ok])) if ok.any() else float("nan")
    return ratios, skipped


class EquivariantRepresentation(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on image tuples, ``transform`` center images to embeddings.

    ``predict_views`` maps embeddings to the predicted embeddings of every
    off-center viewpoint.
    """

    def __init__(self, viewpoints=("center", "left", "right"), epochs=30, batch_size=64, lr=1e-4,
                 weights=(1.0, 10.0, 1.0), dropout=0.5, val_fraction=0.1, patience=5, seed=0,
                 channels=(24, 36, 48, 64), kernels=(5, 5, 5, 3), strides=(2, 2, 2, 1),
                 paddings=(2, 2, 2, 0), decoder_channels=(32, 16, 8), map_hidden=128):
        self.viewpoints = viewpoints
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weights = weights
        self.dropout = dropout
        self.val_fraction = val_fraction
        self.patience = patience
        self.seed = seed
        self.channels = channels
        self.kernels = kernels
        self.strides = strides
        self.paddings = paddings
        self.decoder_channels = decoder_channels
        self.map_hidden = map_hidden

    def _config(self):
        return ReprTrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                               seed=self.seed, val_fraction=self.val_fraction, patience=self.patience,
                               weights=LossWeights(*self.weights), dropout=self.dropout,
                               channels=tuple(self.channels), kernels=tuple(self.kernels),
                               strides=tuple(self.strides), paddings=tuple(self.paddings),
                               decoder_channels=tuple(self.decoder_channels),
                               map_hidden=self.map_hidden)

    def fit(self, X, y=None, groups=None):
        X = check_image_tuples(X)
        if X.shape[1] != len(self.viewpoints):
            raise ValueError(f"X has {X.shape[1]} viewpoints, estimator expects {len(self.viewpoints)}")
        result = train_representation(X, groups, self._config(), viewpoints=self.viewpoints)
        self.net_ = result.net
        self.curve_ = result.curve
        self.flagged_ = result.flagged
        self.embed_dim_ = result.net.encoder.embed_dim
        self.image_shape_ = tuple(X.shape[2:])
        return self

    @classmethod
    def from_net(cls, net: RepresentationNet, **params):
        est = cls(viewpoints=tuple(net.viewpoints), **params)
        est.net_ = net
        est.curve_ = []
        est.flagged_ = False
        est.embed_dim_ = net.encoder.embed_dim
        est.image_shape_ = net.encoder.image_shape
        return est

    @property
    def encoder_(self):
        check_is_fitted(self, "net_")
        return self.net_.encoder

    @property
    def maps_(self):
        check_is_fitted(self, "net_")
        return self.net_.maps

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = np.asarray(X)
        if X.ndim == 4:
            X = X[:, 0]
        return encode(self.net_.encoder, as_image_tensor(X, self.image_shape_))

    def predict_views(self, Z):
        check_is_fitted(self, "net_")
        Z = check_embeddings(Z, self.embed_dim_)
        out = {}
        with torch.no_grad():
            for name, m in self.net_.maps.items():
                out[name] = m(torch.from_numpy(Z)).numpy()
        return out

    def score(self, X, y=None):
        """Negative mean equivariance ratio on held-out tuples (higher is better)."""
        ratios, _ = equivariance_ratio(self.net_.encoder, self.net_.maps, X)
        return -float(np.mean(list(ratios.values())))

    def params_hash(self):
        return param_hash(self.net_)

    def config_dict(self):
        return asdict(self._config())
