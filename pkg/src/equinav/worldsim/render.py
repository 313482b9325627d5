"""Deterministic grayscale renderers.

Ground: column raycaster against the two lane-edge walls, with a bearing-keyed
far silhouette, an outside ground band and a lane floor. Row boundaries are
area-weighted so that small camera shifts change pixels smoothly.

Air: pinhole camera over a floor-cast checker ground, with gate frames and path
marker dots splatted nearest-first.
"""

from __future__ import annotations

import warnings

import numpy as np

from equinav.worldsim.vehicle import CameraRig, VehicleState, translate
from equinav.worldsim.world import GateCourse, Track

HFOV = np.deg2rad(90.0)
GROUND_CAMERA_HEIGHT = 1.2
WALL_HEIGHT = 0.8
MAX_RANGE = 80.0


class DegeneratePoseWarning(UserWarning):
    """Camera is far outside the world; a blank-sky image was returned."""


def _focal(width):
    return (width / 2) / np.tan(HFOV / 2)


def _texture(seed, n_terms=3):
    rng = np.random.default_rng([seed, 17])
    wavelength = rng.uniform(1.5, 9.0, n_terms)
    phase = rng.uniform(0, 2 * np.pi, n_terms)
    amp = rng.uniform(0.05, 0.12, n_terms)
    return wavelength, phase, amp


def _wall_shade(s, seed, base):
    wavelength, phase, amp = _texture(seed)
    v = np.full_like(s, base)
    for w, p, a in zip(wavelength, phase, amp):
        v = v + a * np.sin(2 * np.pi * s / w + p)
    return v


def _silhouette_px(bearing, seed, focal):
    rng = np.random.default_rng([seed, 23])
    k = np.array([2, 3, 5, 7])
    ph = rng.uniform(0, 2 * np.pi, 4)
    a = rng.uniform(0.3, 1.0, 4)
    h = 0.04 + 0.025 * np.sum(a[:, None] * (1 + np.sin(k[:, None] * bearing[None] + ph[:, None])), axis=0)
    return focal * h


def _coverage(a, b, rows):
    """Fraction of pixel rows [r, r+1) covered by the interval [a, b); a, b per column."""
    lo = np.maximum(a[None, :], rows[:, None])
    hi = np.minimum(b[None, :], rows[:, None] + 1.0)
    return np.clip(hi - lo, 0.0, 1.0)


def _blank(height, width):
    return np.full((height, width), 230, dtype=np.uint8)


def _out_of_bounds(xy, lo, hi):
    span = hi - lo
    center = (hi + lo) / 2
    return bool(np.any(np.abs(xy - center) > 2.0 * span))  # bounding box scaled x4


def _to_uint8(img):
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def column_hits(state: VehicleState, track: Track, width=64):
    """Per image column: depth to the nearest lane-edge wall (inf if none within range) and its shade."""
    f = _focal(width)
    o = np.array([state.x, state.y])
    fwd, right = state.forward, state.right
    u = (np.arange(width) + 0.5 - width / 2) / f
    dirs = fwd[None, :] + u[:, None] * right[None, :]  # forward component is 1 => t is depth

    hit_t = np.full(width, np.inf)
    hit_shade = np.zeros(width)
    for wall_id, edge in enumerate(track.edges):
        p = edge
        e = np.roll(edge, -1, axis=0) - edge
        seg_len = np.linalg.norm(e, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg_len)[:-1]])
        w = p - o
        denom = dirs[:, 0:1] * e[None, :, 1] - dirs[:, 1:2] * e[None, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]) / denom
            s = (w[None, :, 0] * dirs[:, 1:2] - w[None, :, 1] * dirs[:, 0:1]) / denom
        valid = (np.abs(denom) > 1e-12) & (t > 1e-6) & (s >= 0) & (s <= 1) & (t < MAX_RANGE)
        t = np.where(valid, t, np.inf)
        j = np.argmin(t, axis=1)
        tj = t[np.arange(width), j]
        arc = cum[j] + np.where(np.isfinite(tj), s[np.arange(width), j], 0) * seg_len[j]
        shade = _wall_shade(arc, track.texture_seed + 7919 * wall_id, 0.62 if wall_id == 0 else 0.78)
        closer = tj < hit_t
        hit_t = np.where(closer, tj, hit_t)
        hit_shade = np.where(closer, shade, hit_shade)

    return hit_t, hit_shade


def render_ground(state: VehicleState, track: Track, width=64, height=48) -> np.ndarray:
    lo, hi = track.bounds
    if _out_of_bounds(np.array([state.x, state.y]), lo, hi):
        warnings.warn(f"degenerate pose at ({state.x:.1f}, {state.y:.1f})", DegeneratePoseWarning,
                      stacklevel=3)
        return _blank(height, width)
    f = _focal(width)
    cam_h = GROUND_CAMERA_HEIGHT - state.z  # z is down
    u = (np.arange(width) + 0.5 - width / 2) / f
    hit_t, hit_shade = column_hits(state, track, width)
    hit = np.isfinite(hit_t)
    horizon = height / 2
    depth = np.where(hit, hit_t, 1e9)
    wall_top = horizon + f * (cam_h - WALL_HEIGHT) / depth
    wall_bot = horizon + f * cam_h / depth
    bearing = state.yaw + np.arctan(u)
    mountain_top = horizon - _silhouette_px(bearing, track.texture_seed, f)

    rows = np.arange(height, dtype=float)
    neg = np.full(width, -1e6)
    pos = np.full(width, 1e6)
    hz = np.full(width, horizon)
    sky_val = (0.92 - 0.12 * (rows + 0.5) / horizon)[:, None]
    floor_val = (0.40 + 0.08 * np.clip((rows + 0.5 - horizon) / horizon, 0, 1))[:, None]
    img = (_coverage(neg, mountain_top, rows) * sky_val
           + _coverage(mountain_top, hz, rows) * 0.52
           + _coverage(hz, wall_top, rows) * 0.22
           + _coverage(wall_top, wall_bot, rows) * hit_shade[None, :]
           + _coverage(wall_bot, pos, rows) * floor_val)
    return _to_uint8(img)


def render_air(state: VehicleState, course: GateCourse, width=64, height=48) -> np.ndarray:
    lo, hi = course.bounds
    if _out_of_bounds(np.array([state.x, state.y]), lo, hi) or state.z >= 0:
        warnings.warn(f"degenerate pose at ({state.x:.1f}, {state.y:.1f}, {state.z:.1f})",
                      DegeneratePoseWarning, stacklevel=3)
        return _blank(height, width)
    f = _focal(width)
    horizon = height / 2
    cam = np.array([state.x, state.y, state.z])
    fwd = np.array([np.cos(state.yaw), np.sin(state.yaw), 0.0])
    right = np.array([-np.sin(state.yaw), np.cos(state.yaw), 0.0])
    down = np.array([0.0, 0.0, 1.0])

    rows = np.arange(height) + 0.5
    cols = np.arange(width) + 0.5
    img = np.empty((height, width))
    sky = rows < horizon
    img[sky] = (0.90 - 0.15 * rows[sky] / horizon)[:, None]
    # floor casting for rows below the horizon
    below = ~sky
    altitude = -state.z
    depth = altitude * f / (rows[below] - horizon)
    lat = (cols[None, :] - width / 2) / f * depth[:, None]
    gx = cam[0] + depth[:, None] * fwd[0] + lat * right[0]
    gy = cam[1] + depth[:, None] * fwd[1] + lat * right[1]
    rng = np.random.default_rng([course.texture_seed, 5])
    period = rng.uniform(3.0, 5.0)
    checker = np.tanh(3 * np.sin(np.pi * gx / period) * np.sin(np.pi * gy / period))
    fade = np.exp(-depth / 25.0)[:, None]
    img[below] = 0.38 + 0.14 * checker * fade

    # primitives: gate edges (dark) and path dots (bright)
    corners = course.gate_corners()
    samples = []
    values = []
    ts = np.linspace(0, 1, 24)
    for k in range(4):
        a, b = corners[:, k], corners[:, (k + 1) % 4]
        pts = a[:, None, :] + ts[None, :, None] * (b - a)[:, None, :]
        samples.append(pts.reshape(-1, 3))
        values.append(np.full(pts.shape[0] * pts.shape[1], 0.08))
    dots = course.reference_path[:: max(1, int(round(2.0 / 0.5)))]
    samples.append(dots)
    values.append(np.full(len(dots), 0.97))
    pts = np.vstack(samples)
    val = np.concatenate(values)
    rel = pts - cam
    zc = rel @ fwd
    keep = zc > 0.3
    rel, zc, val = rel[keep], zc[keep], val[keep]
    px = width / 2 + f * (rel @ right) / zc
    py = horizon + f * (rel @ down) / zc
    size = np.clip(np.round(f * 0.12 / zc), 1, 3).astype(int)
    rr, cc, dd, vv = [], [], [], []
    for s in range(1, 4):
        sel = size == s
        if not np.any(sel):
            continue
        for dr in range(s):
            for dc in range(s):
                rr.append(np.floor(py[sel]).astype(int) + dr - s // 2)
                cc.append(np.floor(px[sel]).astype(int) + dc - s // 2)
                dd.append(zc[sel])
                vv.append(val[sel])
    if rr:
        rr, cc, dd, vv = (np.concatenate(x) for x in (rr, cc, dd, vv))
        inside = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        rr, cc, dd, vv = rr[inside], cc[inside], dd[inside], vv[inside]
        pix = rr * width + cc
        order = np.lexsort((dd, pix))  # nearest sample first within each pixel
        pix, vv = pix[order], vv[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        img.reshape(-1)[pix[first]] = vv[first]
    return _to_uint8(img)


def render_view(state: VehicleState, offset, world, width=64, height=48) -> np.ndarray:
    """Render from the camera displaced by ``offset`` = (right, down) meters in the body frame.

    Returns a (height, width) uint8 image. Poses far outside the world give a
    blank-sky image and emit :class:`DegeneratePoseWarning`.
    """
    cam_state = translate(state, offset)
    if isinstance(world, Track):
        return render_ground(cam_state, world, width, height)
    if isinstance(world, GateCourse):
        return render_air(cam_state, world, width, height)
    raise TypeError(f"unsupported world type {type(world).__name__}")


def observe(state: VehicleState, rig: CameraRig, world) -> tuple:
    """One image per rig viewpoint, center first."""
    return tuple(render_view(state, (lat, vert), world, rig.image_width, rig.image_height)
                 for _, lat, vert in rig.offsets)
