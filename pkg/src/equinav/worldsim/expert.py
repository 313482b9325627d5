"""Pure-pursuit experts standing in for simulator autopilots."""

from __future__ import annotations

import numpy as np

from equinav.worldsim.vehicle import DT, K_STEER, MAX_DELTA_YAW, MAX_DELTA_Z, VehicleState
from equinav.worldsim.world import GateCourse, Track

GROUND_LOOKAHEAD = 2.0
AIR_LOOKAHEAD = 4.0
DZ_GAIN = 0.5
AIR_CAPTURE_RADIUS = 10.0


class ExpertCaptureError(RuntimeError):
    """The vehicle is too far from the path for the expert to recover."""


def expert_ground(state: VehicleState, track: Track, lookahead: float = GROUND_LOOKAHEAD,
                  k_steer: float = K_STEER) -> np.ndarray:
    line = track.centerline
    dist, _, _, s = line.project([state.x, state.y])
    if dist > 4 * track.lane_half_width:
        raise ExpertCaptureError(f"vehicle {dist:.2f} m from centerline exceeds capture range")
    target = line.point_at(s + lookahead)
    dx, dy = target[0] - state.x, target[1] - state.y
    c, sn = np.cos(state.yaw), np.sin(state.yaw)
    local_right = -dx * sn + dy * c
    d2 = dx * dx + dy * dy
    curvature = 2.0 * local_right / d2
    steering = state.speed * curvature / k_steer
    return np.array([float(np.clip(steering, -1.0, 1.0))])


def expert_air(state: VehicleState, course: GateCourse, lookahead: float = AIR_LOOKAHEAD,
               dt: float = DT) -> np.ndarray:
    path = course.path
    dist, _, _, s = path.project([state.x, state.y, state.z])
    if dist > AIR_CAPTURE_RADIUS:
        raise ExpertCaptureError(f"vehicle {dist:.2f} m from reference path exceeds capture range")
    target = path.point_at(s + lookahead)
    dx, dy = target[0] - state.x, target[1] - state.y
    c, sn = np.cos(state.yaw), np.sin(state.yaw)
    local_right = -dx * sn + dy * c
    curvature = 2.0 * local_right / (dx * dx + dy * dy)
    dyaw = np.clip(state.speed * dt * curvature, -MAX_DELTA_YAW, MAX_DELTA_YAW)
    # proportional on the current altitude error plus one step of path-slope feedforward
    z_here = path.point_at(s)[2]
    z_next = path.point_at(s + state.speed * dt)[2]
    dz = np.clip(DZ_GAIN * (z_here - state.z) + (z_next - z_here), -MAX_DELTA_Z, MAX_DELTA_Z)
    return np.array([float(dyaw), float(dz)])


def expert_action(state: VehicleState, world) -> np.ndarray:
    if isinstance(world, Track):
        return expert_ground(state, world)
    if isinstance(world, GateCourse):
        return expert_air(state, world)
    raise TypeError(f"unsupported world type {type(world).__name__}")
