"""Demonstration datasets: one record per time step with every rig viewpoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from equinav.worldsim import (
    CameraRig,
    GateCourse,
    VehicleState,
    expert_action,
    observe,
    step,
)


def episode_rng(master_seed: int, episode_index: int) -> np.random.Generator:
    """Independent stream per (master seed, episode); streams never collide across seeds."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(episode_index)]))


@dataclass
class DemoDataset:
    images: np.ndarray    # (N, V, H, W) uint8, viewpoint order follows rig.offsets
    actions: np.ndarray   # (N, k) expert action for the center camera
    states: np.ndarray    # (N, 6) x, y, z, yaw, speed, time
    episodes: np.ndarray  # (N,)
    steps: np.ndarray     # (N,)
    rig: CameraRig
    world: object

    def __post_init__(self):
        n = len(self.images)
        if self.images.ndim != 4 or self.images.shape[1] != len(self.rig.offsets):
            raise ValueError("images must be (N, n_viewpoints, H, W)")
        if self.images.shape[2:] != self.rig.image_shape:
            raise ValueError("image size does not match the rig")
        for name in ("actions", "states", "episodes", "steps"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length does not match images")

    def __len__(self):
        return len(self.images)

    @property
    def viewpoints(self):
        return self.rig.viewpoints

    @property
    def center_images(self):
        return self.images[:, 0]

    def subset(self, idx):
        idx = np.asarray(idx)
        return DemoDataset(self.images[idx], self.actions[idx], self.states[idx],
                           self.episodes[idx], self.steps[idx], self.rig, self.world)

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        first = parts[0]
        for p in parts[1:]:
            if p.rig != first.rig:
                raise ValueError("cannot mix datasets recorded with different rigs")
        return cls(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.actions for p in parts]),
                   np.concatenate([p.states for p in parts]),
                   np.concatenate([p.episodes for p in parts]),
                   np.concatenate([p.steps for p in parts]), first.rig, first.world)


def record_states(states, actions, rig, world, episode_ids, step_ids) -> DemoDataset:
    """Render every rig viewpoint at each state."""
    images = np.zeros((len(states), len(rig.offsets), *rig.image_shape), dtype=np.uint8)
    for i, s in enumerate(states):
        st = s if isinstance(s, VehicleState) else VehicleState.from_array(s)
        images[i] = np.stack(observe(st, rig, world))
    arr = np.stack([s.as_array() if isinstance(s, VehicleState) else np.asarray(s, dtype=float)
                    for s in states])
    return DemoDataset(images, np.asarray(actions, dtype=float).reshape(len(states), -1), arr,
                       np.asarray(episode_ids), np.asarray(step_ids), rig, world)


def collect_demonstrations(world, rig: CameraRig, n_episodes: int, episode_steps: int, seed: int,
                           lateral_jitter: float = 0.0, heading_jitter: float = 0.0,
                           episode_offset: int = 0) -> DemoDataset:
    """Expert-driven episodes from random arc positions, optionally perturbed at the start.

    With zero jitter every episode starts on the path, aligned with it, so the
    recorded states hug the centerline.
    """
    states, actions, eps, steps = [], [], [], []
    for e in range(n_episodes):
        ep = episode_offset + e
        rng = episode_rng(seed, ep)
        length = world.path.length if isinstance(world, GateCourse) else world.centerline.length
        s0 = rng.uniform(0, length)
        lat = float(np.clip(rng.normal(0, lateral_jitter), -2 * lateral_jitter, 2 * lateral_jitter)) \
            if lateral_jitter else 0.0
        head = float(np.clip(rng.normal(0, heading_jitter), -2 * heading_jitter, 2 * heading_jitter)) \
            if heading_jitter else 0.0
        state = world.start_state(s0, lateral=lat, heading_error=head)
        for k in range(episode_steps):
            a = expert_action(state, world)
            states.append(state)
            actions.append(a)
            eps.append(ep)
            steps.append(k)
            state = step(state, a, world)
    return record_states(states, actions, rig, world, eps, steps)
