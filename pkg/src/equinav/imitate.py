"""Policy learning on embeddings, closed-loop rollouts and DAgger aggregation."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from equinav.augment import EmbeddingDataset, PlatformProfile
from equinav.data import episode_rng, record_states
from equinav.io import read_container, write_container
from equinav.metrics import TAKEOVER_S, InterventionRule, rule_for, trigger_now
from equinav.netcore import (
    AdamState,
    Encoder,
    NonFiniteLossError,
    PolicyHead,
    adam_step,
    encode,
    functional,
    init_params,
    load_params,
    module_params,
    param_hash,
    policy_eval,
    value_and_grad,
)
from equinav.trajectory import TrajectoryLog
from equinav.validation import check_actions, check_embeddings
from equinav.worldsim import (
    DT,
    ExpertCaptureError,
    GateCourse,
    VehicleState,
    clip_action,
    cross_track_error,
    expert_action,
    render_view,
    step,
)

log = logging.getLogger(__name__)

STRATEGIES = ("center", "allcams", "equivariant", "noise", "random-map", "det-map")


class EncoderModifiedError(RuntimeError):
    pass


@dataclass
class PolicyTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    hidden: tuple = (100, 10)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def content_order(Z, A) -> np.ndarray:
    """Row order that depends only on row contents, so permuted copies of a dataset train identically."""
    keys = [hashlib.sha256(z.tobytes() + a.tobytes()).digest() for z, a in zip(Z, A)]
    return np.array(sorted(range(len(keys)), key=keys.__getitem__), dtype=np.int64)


def policy_loss(head, Z, A):
    """sum_k (a_k - pi(Z)_k)^2, averaged over the batch."""
    return ((head(Z) - A) ** 2).sum(1).mean()


@dataclass
class PolicyTrainResult:
    head: PolicyHead
    curve: list           # mean training loss per epoch, epoch 0 = before training
    final_loss: float


def _full_loss(head, Z, A):
    with torch.no_grad():
        return float(policy_loss(head, Z, A))


def train_policy(dataset: EmbeddingDataset, config: PolicyTrainConfig | None = None,
                 init: PolicyHead | None = None) -> PolicyTrainResult:
    """Adam on the squared action error. ``init`` warm-starts from an existing head."""
    config = config or PolicyTrainConfig()
    if len(dataset) == 0:
        raise ValueError("empty embedding dataset")
    Z = check_embeddings(dataset.Z)
    A = check_actions(dataset.actions, len(Z)).astype(np.float32)
    head = PolicyHead(Z.shape[1], A.shape[1], config.hidden)
    if init is not None:
        head.load_state_dict(init.state_dict())
    else:
        init_params(head, config.seed)
    order = content_order(Z, A)
    Zt, At = torch.from_numpy(Z[order]), torch.from_numpy(A[order])
    call = functional(head)

    def loss_fn(params, batch):
        z, a = batch
        return ((call(params, z) - a) ** 2).sum(1).mean()

    params = module_params(head)
    state = AdamState.for_params(params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 11])
    curve = [_full_loss(head, Zt, At)]
    for epoch in range(1, config.epochs + 1):
        perm = torch.from_numpy(rng.permutation(len(Zt)))
        for b, s in enumerate(range(0, len(perm), config.batch_size)):
            idx = perm[s:s + config.batch_size]
            try:
                _, grads = value_and_grad(loss_fn, params, (Zt[idx], At[idx]), batch_index=b)
            except NonFiniteLossError as err:
                raise NonFiniteLossError(err.args[0], batch_index=b, epoch=epoch) from None
            state, params = adam_step(state, params, grads)
        load_params(head, params)
        curve.append(_full_loss(head, Zt, At))
    head.eval()
    return PolicyTrainResult(head, curve, curve[-1])


class EmbeddingPolicy(RegressorMixin, BaseEstimator):
    """Regressor from embeddings to actions."""

    def __init__(self, epochs=30, batch_size=64, lr=1e-4, seed=0, hidden=(100, 10)):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.hidden = hidden

    def fit(self, X, y, warm_start=None):
        X = check_embeddings(X)
        y = check_actions(y, len(X))
        ds = EmbeddingDataset(X, y, ["observed-center"] * len(X), np.zeros(len(X)), np.arange(len(X)),
                              ["center"] * len(X))
        cfg = PolicyTrainConfig(self.epochs, self.batch_size, self.lr, self.seed, tuple(self.hidden))
        res = train_policy(ds, cfg, init=warm_start)
        self.head_ = res.head
        self.curve_ = res.curve
        self.n_features_in_ = X.shape[1]
        self.action_dim_ = y.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "head_")
        X = check_embeddings(X, self.n_features_in_)
        out = policy_eval(self.head_, X)
        return out[:, 0] if self.action_dim_ == 1 else out


@dataclass
class PolicySnapshot:
    """Frozen encoder plus trained policy head; the deployable unit."""

    encoder: Encoder
    head: PolicyHead
    profile: PlatformProfile
    strategy: str
    iteration: int = 0
    encoder_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy.split("-")[0] not in {s.split("-")[0] for s in STRATEGIES}:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not self.encoder_hash:
            self.encoder_hash = param_hash(self.encoder)
        self.encoder.eval()
        self.head.eval()

    def check_frozen(self):
        if param_hash(self.encoder) != self.encoder_hash:
            raise EncoderModifiedError("encoder parameters changed after the snapshot was taken")

    @property
    def image_shape(self):
        return self.encoder.image_shape

    def act(self, image) -> np.ndarray:
        z = encode(self.encoder, image)
        return policy_eval(self.head, z)[0]


def start_positions(world, n, seed, iteration=0):
    """Arc-length start points for evaluation episodes, one RNG stream per (seed, iteration, episode)."""
    length = world.path.length if isinstance(world, GateCourse) else world.centerline.length
    return [float(episode_rng(seed, 10_000 * (iteration + 1) + e).uniform(0, length)) for e in range(n)]


def rollout(snapshot: PolicySnapshot, world, max_time: float, rule: InterventionRule | None = None,
            start_s: float = 0.0, takeover_s: float = TAKEOVER_S, takeover: bool = True,
            keep_images: bool = False, lateral: float = 0.0, heading_error: float = 0.0,
            yaw_noise: float = 0.0, z_noise: float = 0.0, noise_seed: int = 0,
            dt: float = DT) -> TrajectoryLog:
    """Drive with the center camera; the expert takes over for ``takeover_s`` on each intervention.

    With ``takeover`` off, interventions are only flagged and the policy keeps driving.
    ``yaw_noise`` / ``z_noise`` add seeded Gaussian disturbances (rad, m) after every
    step, whoever is driving. An expert capture failure ends the episode early
    with ``aborted`` set.
    """
    rule = rule or rule_for(world)
    n_steps = int(round(max_time / dt))
    takeover_steps = int(round(takeover_s / dt))
    h, w = snapshot.image_shape
    state = world.start_state(start_s, lateral=lateral, heading_error=heading_error)
    times, states, actions, ctes, pcs, flags, images = [], [], [], [], [], [], []
    left = 0
    prev_v, prev_a = False, False
    aborted = False
    noise = np.random.default_rng([int(noise_seed), 3]) if (yaw_noise or z_noise) else None
    for t in range(n_steps):
        cte = cross_track_error(state, world)
        violating = bool(rule.violated(cte))
        armed = t == 0 or pcs[-1]
        fired = trigger_now(violating, armed, prev_v, prev_a)
        prev_v, prev_a = violating, armed
        img = render_view(state, (0.0, 0.0), world, w, h) if (keep_images or left == 0) else None
        use_expert = left > 0 or (fired and takeover)
        try:
            if use_expert:
                a = expert_action(state, world)
            else:
                a = clip_action(snapshot.profile.platform, snapshot.act(img))
        except ExpertCaptureError as err:
            log.info("episode aborted at step %d: %s", t, err)
            aborted = True
            break
        if left > 0:
            left -= 1
        elif fired and takeover:
            left = takeover_steps - 1
        times.append(t * dt)
        states.append(state.as_array())
        actions.append(np.asarray(a, dtype=float))
        ctes.append(cte)
        pcs.append(not use_expert)
        flags.append(fired)
        if keep_images:
            images.append(img)
        state = step(state, a, world)
        if noise is not None:
            dyaw, dz = noise.standard_normal(2)
            state = replace(state, yaw=state.yaw + yaw_noise * dyaw, z=state.z + z_noise * dz)
    k = 2 if isinstance(world, GateCourse) else 1
    return TrajectoryLog(np.array(times), np.array(states).reshape(-1, 6), np.array(actions).reshape(-1, k),
                         np.array(ctes), np.array(pcs, dtype=bool), np.array(flags, dtype=bool), dt, aborted,
                         np.array(images) if keep_images else None)


def relabel(logs, world, rig, episode_offset=0):
    """Render every visited state with the full rig and label it with the expert action."""
    states, acts, eps, steps = [], [], [], []
    for e, lg in enumerate(logs):
        for t, s in enumerate(lg.states):
            st = VehicleState.from_array(s)
            try:
                a = expert_action(st, world)
            except ExpertCaptureError:
                continue
            states.append(st)
            acts.append(a)
            eps.append(episode_offset + e)
            steps.append(t)
    return record_states(states, np.array(acts).reshape(len(states), -1), rig, world, eps, steps)


@dataclass
class DaggerConfig:
    iterations: int = 3
    episodes: int = 2
    max_time: float = 40.0
    takeover_s: float = TAKEOVER_S
    takeover: bool = True
    relabel: bool = True
    retrain_epochs: int = 30
    threshold: float | None = None   # None: the world's default rule
    yaw_noise: float = 0.0
    z_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one DAgger iteration")
        if self.episodes < 1:
            raise ValueError("need at least one episode per iteration")


@dataclass
class DaggerStep:
    snapshot: PolicySnapshot      # policy that produced ``logs``
    logs: list
    new_entries: EmbeddingDataset | None
    aggregate: EmbeddingDataset | None
    next_snapshot: PolicySnapshot | None


def evaluate(snapshot, world, config: DaggerConfig, iteration=None):
    """Closed-loop episodes from the seeded start points of ``iteration``."""
    it = snapshot.iteration if iteration is None else iteration
    rule = InterventionRule(config.threshold) if config.threshold is not None else rule_for(world)
    starts = start_positions(world, config.episodes, config.seed, it)
    return [rollout(snapshot, world, config.max_time, rule, start_s=s0, takeover_s=config.takeover_s,
                    takeover=config.takeover, yaw_noise=config.yaw_noise, z_noise=config.z_noise,
                    noise_seed=int(np.random.SeedSequence([config.seed, it, e]).generate_state(1)[0]))
            for e, s0 in enumerate(starts)]


def dagger_iterate(snapshot: PolicySnapshot, world, config: DaggerConfig, aggregate: EmbeddingDataset,
                   builder, rig, policy_config: PolicyTrainConfig | None = None, logs=None) -> DaggerStep:
    """One round: roll out, relabel visited states, augment, aggregate, retrain (warm start, fresh Adam)."""
    snapshot.check_frozen()
    logs = evaluate(snapshot, world, config) if logs is None else logs
    if not config.relabel:
        return DaggerStep(snapshot, logs, None, aggregate, None)
    demo = relabel(logs, world, rig, episode_offset=1_000_000 * (snapshot.iteration + 1))
    new = builder(demo)
    agg = EmbeddingDataset.concat([aggregate, new])
    pc = replace(policy_config or PolicyTrainConfig(), epochs=config.retrain_epochs)
    res = train_policy(agg, pc, init=snapshot.head)
    nxt = PolicySnapshot(snapshot.encoder, res.head, snapshot.profile, snapshot.strategy,
                         snapshot.iteration + 1, snapshot.encoder_hash, dict(snapshot.meta))
    nxt.check_frozen()
    return DaggerStep(snapshot, logs, new, agg, nxt)


def run_dagger(snapshot, world, config: DaggerConfig, aggregate, builder, rig, policy_config=None):
    """Iterations 0..N: evaluate each policy; all but the last also feed the next one."""
    steps = []
    for i in range(config.iterations + 1):
        if i == config.iterations:
            steps.append(DaggerStep(snapshot, evaluate(snapshot, world, config), None, aggregate, None))
            break
        st = dagger_iterate(snapshot, world, config, aggregate, builder, rig, policy_config)
        steps.append(st)
        snapshot, aggregate = st.next_snapshot, st.aggregate
    return steps


def save_snapshot(snapshot: PolicySnapshot, path, encoder_ref: str, meta: dict | None = None):
    """Policy parameters plus a manifest pointing at the frozen encoder's checkpoint."""
    snapshot.check_frozen()
    arrays = {k: v.detach().cpu().float().numpy() for k, v in snapshot.head.state_dict().items()}
    hidden = [m.out_features for m in snapshot.head.net if isinstance(m, torch.nn.Linear)][:-1]
    header = {"kind": "policy", "strategy": snapshot.strategy, "iteration": snapshot.iteration,
              "profile": snapshot.profile.to_dict(), "encoder_ref": str(encoder_ref),
              "encoder_hash": snapshot.encoder_hash, "dim": snapshot.head.net[0].in_features,
              "action_dim": snapshot.head.action_dim, "hidden": hidden,
              **snapshot.meta, **(meta or {})}
    write_container(path, arrays, header)


def load_snapshot(path, encoder: Encoder) -> PolicySnapshot:
    """Rebuild a snapshot around ``encoder``; refuses an encoder whose hash differs from the stored one."""
    arrays, meta = read_container(path)
    if meta.get("kind") != "policy":
        raise ValueError(f"{path} is not a policy checkpoint")
    if param_hash(encoder) != meta["encoder_hash"]:
        raise EncoderModifiedError(f"{path}: encoder does not match the one the policy was trained on")
    head = PolicyHead(meta["dim"], meta["action_dim"], tuple(meta["hidden"]))
    head.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    known = {"kind", "strategy", "iteration", "profile", "encoder_hash", "dim", "action_dim", "hidden"}
    return PolicySnapshot(encoder, head, PlatformProfile.from_dict(meta["profile"]), meta["strategy"],
                          int(meta["iteration"]), meta["encoder_hash"],
                          {k: v for k, v in meta.items() if k not in known})
