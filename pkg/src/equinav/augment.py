"""Embedding-space training sets for the policy head.

Every builder returns an :class:`EmbeddingDataset` ordered by (episode, step,
viewpoint). Off-center entries carry the expert action shifted by a fixed
per-viewpoint offset from a :class:`PlatformProfile`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from equinav.io import atomic_write_text, read_container, write_container
from equinav.netcore import EquivariantMap, encode, init_params, map_embed

PROVENANCE = ("observed-center", "observed-offcenter", "predicted-equivariant", "noise-augmented")


@dataclass(frozen=True)
class PlatformProfile:
    """Additive action offsets per viewpoint. ``clip`` bounds the corrected action, if set."""

    platform: str
    offsets: dict = field(default_factory=dict)   # viewpoint -> tuple of per-component offsets
    clip: tuple | None = None

    def __post_init__(self):
        if "center" not in self.offsets:
            raise ValueError("profile needs a center entry")
        dims = {len(v) for v in self.offsets.values()}
        if len(dims) != 1:
            raise ValueError("all viewpoint offsets need the same action dimension")
        if any(x != 0 for x in self.offsets["center"]):
            raise ValueError("center correction must be zero")
        if not all(np.isfinite(v).all() for v in self.offsets.values()):
            raise ValueError("offsets must be finite")

    @property
    def viewpoints(self):
        return list(self.offsets)

    @property
    def action_dim(self):
        return len(self.offsets["center"])

    def offset(self, viewpoint):
        try:
            return np.asarray(self.offsets[viewpoint], dtype=float)
        except KeyError:
            raise KeyError(f"viewpoint {viewpoint!r} not in the {self.platform} profile") from None

    def to_dict(self):
        return {"platform": self.platform, "offsets": {k: list(v) for k, v in self.offsets.items()},
                "clip": None if self.clip is None else list(self.clip)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["platform"], {k: tuple(v) for k, v in d["offsets"].items()},
                   None if d.get("clip") is None else tuple(d["clip"]))


# Steering is positive clockwise, so a camera displaced left sees what the
# center camera would see after drifting left and gets a rightward correction.
GROUND_SIM = PlatformProfile("ground-sim", {"center": (0.0,), "left": (0.05,), "right": (-0.05,)},
                             clip=(-1.0, 1.0))
# (delta yaw, delta z) with z pointing down: a top camera is corrected downwards.
FLYING = PlatformProfile("flying", {"center": (0.0, 0.0), "left": (0.03, 0.0), "right": (-0.03, 0.0),
                                    "top": (0.0, 0.5), "bottom": (0.0, -0.5)})
# yaw rate; signs kept as tabulated for the physical robot
HUSKY = PlatformProfile("husky-profile", {"center": (0.0,), "left": (-0.1,), "right": (0.1,)})

PROFILES = {p.platform: p for p in (GROUND_SIM, FLYING, HUSKY)}


def profile_for(platform: str) -> PlatformProfile:
    try:
        return PROFILES[platform]
    except KeyError:
        raise ValueError(f"unknown platform {platform!r}; expected one of {sorted(PROFILES)}") from None


def correct_action(a, viewpoint, profile: PlatformProfile) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    off = profile.offset(viewpoint)
    if a.shape[-1] != len(off):
        raise ValueError(f"action dimension {a.shape[-1]} does not match profile ({len(off)})")
    out = a + off
    if profile.clip is not None:
        out = np.clip(out, *profile.clip)
    return out


@dataclass
class EmbeddingDataset:
    Z: np.ndarray            # (N, D) float32
    actions: np.ndarray      # (N, k) float32
    provenance: np.ndarray   # (N,) str
    episodes: np.ndarray     # (N,) int
    steps: np.ndarray        # (N,) int
    viewpoints: np.ndarray   # (N,) str

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        if self.actions.ndim == 1:
            self.actions = self.actions[:, None]
        self.provenance = np.asarray(self.provenance, dtype=object)
        self.viewpoints = np.asarray(self.viewpoints, dtype=object)
        self.episodes = np.asarray(self.episodes, dtype=np.int64)
        self.steps = np.asarray(self.steps, dtype=np.int64)
        n = len(self.Z)
        if self.Z.ndim != 2:
            raise ValueError("Z must be (N, D)")
        for name in ("actions", "provenance", "episodes", "steps", "viewpoints"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length {len(getattr(self, name))} does not match {n} embeddings")
        bad = set(self.provenance) - set(PROVENANCE)
        if bad:
            raise ValueError(f"unknown provenance tags {sorted(bad)}")

    def __len__(self):
        return len(self.Z)

    @property
    def dim(self):
        return self.Z.shape[1]

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        if len({p.dim for p in parts}) != 1 or len({p.actions.shape[1] for p in parts}) != 1:
            raise ValueError("cannot mix embedding or action dimensions")
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("Z", "actions", "provenance", "episodes", "steps", "viewpoints")))

    def save(self, path):
        """``path`` gets the float32 container; ``path`` + ``.jsonl`` the provenance sidecar."""
        path = Path(path)
        write_container(path, {"Z": self.Z, "actions": self.actions},
                        {"n": len(self), "dim": self.dim, "action_dim": int(self.actions.shape[1])})
        rows = [json.dumps({"i": i, "provenance": str(self.provenance[i]), "episode": int(self.episodes[i]),
                            "step": int(self.steps[i]), "viewpoint": str(self.viewpoints[i])})
                for i in range(len(self))]
        atomic_write_text(path.with_name(path.name + ".jsonl"), "\n".join(rows) + ("\n" if rows else ""))

    @classmethod
    def load(cls, path):
        path = Path(path)
        arrays, meta = read_container(path)
        rows = [json.loads(x) for x in path.with_name(path.name + ".jsonl").read_text().splitlines() if x]
        if len(rows) != meta["n"]:
            raise ValueError(f"sidecar has {len(rows)} rows, container {meta['n']}")
        return cls(arrays["Z"], arrays["actions"], [r["provenance"] for r in rows],
                   [r["episode"] for r in rows], [r["step"] for r in rows], [r["viewpoint"] for r in rows])


def _interleave(blocks):
    """Stack per-viewpoint blocks [(Z, A, tag, viewpoint), ...] so rows run (sample, viewpoint)."""
    n = len(blocks[0][0])
    v = len(blocks)
    Z = np.stack([b[0] for b in blocks], axis=1).reshape(n * v, -1)
    A = np.stack([b[1] for b in blocks], axis=1).reshape(n * v, -1)
    tags = np.array([[b[2]] * n for b in blocks], dtype=object).T.reshape(-1)
    views = np.array([[b[3]] * n for b in blocks], dtype=object).T.reshape(-1)
    return Z, A, tags, views


def _sample_ids(dataset, repeat):
    return np.repeat(dataset.episodes, repeat), np.repeat(dataset.steps, repeat)


def build_center(dataset, encoder) -> EmbeddingDataset:
    Z = encode(encoder, dataset.images[:, 0])
    n = len(Z)
    return EmbeddingDataset(Z, dataset.actions, ["observed-center"] * n, dataset.episodes,
                            dataset.steps, ["center"] * n)


def build_allcams(dataset, encoder, profile: PlatformProfile) -> EmbeddingDataset:
    views = dataset.rig.viewpoints
    blocks = []
    for j, v in enumerate(views):
        Z = encode(encoder, dataset.images[:, j])
        blocks.append((Z, correct_action(dataset.actions, v, profile),
                       "observed-center" if j == 0 else "observed-offcenter", v))
    Z, A, tags, vs = _interleave(blocks)
    return EmbeddingDataset(Z, A, tags, *_sample_ids(dataset, len(views)), vs)


def _apply_map(m, Z):
    if isinstance(m, nn.Module):
        return map_embed(m, Z)
    return np.asarray(m(Z), dtype=np.float32)


def build_equivariant(dataset, encoder, maps, profile: PlatformProfile) -> EmbeddingDataset:
    """Center embeddings plus their mapped neighbors; only center images are read."""
    views = [v for v in profile.viewpoints if v != "center"]
    missing = [v for v in views if v not in maps]
    if missing:
        raise KeyError(f"no map for viewpoints {missing}")
    center = dataset.images[:, 0]
    Zc = encode(encoder, center)
    blocks = [(Zc, correct_action(dataset.actions, "center", profile), "observed-center", "center")]
    for v in views:
        blocks.append((_apply_map(maps[v], Zc), correct_action(dataset.actions, v, profile),
                       "predicted-equivariant", v))
    Z, A, tags, vs = _interleave(blocks)
    return EmbeddingDataset(Z, A, tags, *_sample_ids(dataset, len(blocks)), vs)


def noisy_images(images, sigma, rng) -> np.ndarray:
    """clip(I + N(0, sigma^2), 0, 1) for uint8 images, computed in float32."""
    x = np.asarray(images).astype(np.float32) / np.float32(255.0)
    if sigma == 0:
        return x
    noise = rng.standard_normal(x.shape, dtype=np.float32) * np.float32(sigma)
    return np.clip(x + noise, 0.0, 1.0)


def build_noise(dataset, encoder, sigmas, seed=0, include_original=True) -> EmbeddingDataset:
    """One noisy copy of every center image per sigma, labelled with the center action."""
    parts = [build_center(dataset, encoder)] if include_original else []
    n = len(dataset)
    for k, sigma in enumerate(sigmas):
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        rng = np.random.default_rng([int(seed), k])
        Z = encode(encoder, torch.from_numpy(noisy_images(dataset.images[:, 0], sigma, rng)))
        tag = "observed-center" if sigma == 0 else "noise-augmented"
        parts.append(EmbeddingDataset(Z, dataset.actions, [tag] * n, dataset.episodes,
                                      dataset.steps, ["center"] * n))
    return EmbeddingDataset.concat(parts)


def make_random_map(dim, seed, hidden=128) -> EquivariantMap:
    """Untrained map with the standard initialization and no bypass."""
    m = EquivariantMap(dim, hidden, bypass=False)
    init_params(m, seed)
    return m.eval()


class DeterministicMap:
    """z -> z + shift, the shift broadcast to every coordinate."""

    def __init__(self, dim, shift):
        self.dim = int(dim)
        self.shift = float(shift)

    def __call__(self, Z):
        Z = np.asarray(Z, dtype=np.float32)
        if Z.shape[-1] != self.dim:
            raise ValueError(f"embedding dimension {Z.shape[-1]} does not match {self.dim}")
        return Z + np.float32(self.shift)


DETERMINISTIC_SHIFTS = {"left": 0.25, "right": -0.25}


def make_deterministic_map(dim, viewpoint) -> DeterministicMap:
    if viewpoint not in DETERMINISTIC_SHIFTS:
        raise ValueError(f"deterministic maps exist only for left/right, not {viewpoint!r}")
    return DeterministicMap(dim, DETERMINISTIC_SHIFTS[viewpoint])
