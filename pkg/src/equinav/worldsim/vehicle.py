"""Vehicle state, kinematics, camera rigs and action limits.

Frame convention (both platforms): x north, y east, z down. Yaw is measured from
+x toward +y, i.e. clockwise seen from above, so positive steering and positive
delta-yaw both turn right, and positive delta-z descends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

DT = 0.1
K_STEER = 0.5          # rad/s at full steering
GROUND_SPEED = 5.0
AIR_SPEED = 3.0
MAX_DELTA_YAW = 0.2
MAX_DELTA_Z = 1.0

PLATFORMS = ("ground-sim", "flying", "husky-profile")


def wrap_angle(a: float) -> float:
    """Normalize to (-pi, pi]."""
    w = math.remainder(a, 2 * math.pi)
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    yaw: float
    speed: float
    time: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        if not self.speed > 0:
            raise ValueError("speed must be positive")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def position(self):
        return np.array([self.x, self.y])

    @property
    def forward(self):
        return np.array([math.cos(self.yaw), math.sin(self.yaw)])

    @property
    def right(self):
        return np.array([-math.sin(self.yaw), math.cos(self.yaw)])

    def as_array(self):
        return np.array([self.x, self.y, self.z, self.yaw, self.speed, self.time])

    @classmethod
    def from_array(cls, a):
        x, y, z, yaw, speed, t = (float(v) for v in a)
        return cls(x=x, y=y, yaw=yaw, speed=speed, time=t, z=z)


def action_dim(platform: str) -> int:
    if platform not in PLATFORMS:
        raise ValueError(f"unknown platform {platform!r}")
    return 2 if platform == "flying" else 1


def clip_action(platform: str, action) -> np.ndarray:
    a = np.asarray(action, dtype=float).reshape(-1)
    if a.shape[0] != action_dim(platform):
        raise ValueError(f"{platform} actions have dimension {action_dim(platform)}, got {a.shape[0]}")
    if platform == "flying":
        return np.array([np.clip(a[0], -MAX_DELTA_YAW, MAX_DELTA_YAW),
                         np.clip(a[1], -MAX_DELTA_Z, MAX_DELTA_Z)])
    if platform == "ground-sim":
        return np.clip(a, -1.0, 1.0)
    return a


def step_ground(state: VehicleState, action, dt: float = DT, k_steer: float = K_STEER) -> VehicleState:
    """Unicycle step: advance along the current heading, then turn by k_steer * steering * dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    steering = float(clip_action("ground-sim", action)[0])
    return VehicleState(
        x=state.x + state.speed * dt * math.cos(state.yaw),
        y=state.y + state.speed * dt * math.sin(state.yaw),
        yaw=state.yaw + k_steer * steering * dt,
        speed=state.speed,
        time=state.time + dt,
        z=state.z,
    )


def step_air(state: VehicleState, action, dt: float = DT) -> VehicleState:
    """Forward-only flight: translate along yaw, then apply the relative yaw and z changes."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    dyaw, dz = clip_action("flying", action)
    return VehicleState(
        x=state.x + state.speed * dt * math.cos(state.yaw),
        y=state.y + state.speed * dt * math.sin(state.yaw),
        yaw=state.yaw + dyaw,
        speed=state.speed,
        time=state.time + dt,
        z=state.z + dz,
    )


def translate(state: VehicleState, offset) -> VehicleState:
    """Shift the vehicle by a body-frame (right, down) offset in meters."""
    lateral, vertical = offset
    return replace(state, x=state.x - lateral * math.sin(state.yaw),
                   y=state.y + lateral * math.cos(state.yaw), z=state.z + vertical)


@dataclass(frozen=True)
class CameraRig:
    """Viewpoints as (id, right offset m, down offset m); the center view comes first."""

    platform: str
    offsets: tuple
    image_width: int = 64
    image_height: int = 48

    def __post_init__(self):
        if self.platform not in PLATFORMS:
            raise ValueError(f"unknown platform {self.platform!r}")
        ids = [o[0] for o in self.offsets]
        if ids.count("center") != 1 or ids[0] != "center":
            raise ValueError("rig needs exactly one 'center' viewpoint, listed first")
        if tuple(self.offsets[0][1:]) != (0.0, 0.0):
            raise ValueError("center viewpoint must have zero offset")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate viewpoint ids")

    @property
    def viewpoints(self):
        return [o[0] for o in self.offsets]

    @property
    def image_shape(self):
        return (self.image_height, self.image_width)

    def offset(self, viewpoint):
        for vid, lat, vert in self.offsets:
            if vid == viewpoint:
                return (lat, vert)
        raise KeyError(viewpoint)

    def to_dict(self):
        return {"platform": self.platform, "offsets": [list(o) for o in self.offsets],
                "image_width": self.image_width, "image_height": self.image_height}

    @classmethod
    def from_dict(cls, d):
        return cls(d["platform"], tuple((str(v), float(a), float(b)) for v, a, b in d["offsets"]),
                   int(d["image_width"]), int(d["image_height"]))


def ground_rig(width=64, height=48, spacing=0.25) -> CameraRig:
    return CameraRig("ground-sim", (("center", 0.0, 0.0), ("left", -spacing, 0.0),
                                    ("right", spacing, 0.0)), width, height)


def flying_rig(width=64, height=48, spacing=0.5) -> CameraRig:
    return CameraRig("flying", (("center", 0.0, 0.0), ("left", -spacing, 0.0), ("right", spacing, 0.0),
                                ("top", 0.0, -spacing), ("bottom", 0.0, spacing)), width, height)


def husky_rig(width=64, height=48, spacing=0.25) -> CameraRig:
    return CameraRig("husky-profile", (("center", 0.0, 0.0), ("left", -spacing, 0.0),
                                       ("right", spacing, 0.0)), width, height)


def rig_for(platform: str, width=64, height=48) -> CameraRig:
    return {"ground-sim": ground_rig, "flying": flying_rig, "husky-profile": husky_rig}[platform](width, height)
