from equinav.worldsim.expert import ExpertCaptureError, expert_action, expert_air, expert_ground
from equinav.worldsim.render import DegeneratePoseWarning, observe, render_view
from equinav.worldsim.vehicle import (
    DT,
    CameraRig,
    VehicleState,
    action_dim,
    clip_action,
    flying_rig,
    ground_rig,
    husky_rig,
    rig_for,
    step_air,
    step_ground,
    translate,
)
from equinav.worldsim.world import (
    GateCourse,
    Track,
    TrackGenerationError,
    cross_track_error,
    generate_gate_course,
    generate_track,
    signed_lateral_offset,
    straight_track,
    world_from_dict,
)


def step(state, action, world):
    """Advance one control period with the kinematics matching ``world``."""
    if isinstance(world, GateCourse):
        return step_air(state, action)
    return step_ground(state, action)


__all__ = [
    "DT", "CameraRig", "DegeneratePoseWarning", "ExpertCaptureError", "GateCourse", "Track",
    "TrackGenerationError", "VehicleState", "action_dim", "clip_action", "cross_track_error",
    "expert_action", "expert_air", "expert_ground", "flying_rig", "generate_gate_course",
    "generate_track", "ground_rig", "husky_rig", "observe", "render_view", "rig_for",
    "signed_lateral_offset", "step", "step_air", "step_ground", "straight_track", "translate",
    "world_from_dict",
]
