"""Per-step rollout records and their CSV form."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, field

import numpy as np

from equinav.io import atomic_write_text

ACTION_NAMES = {1: ("steering",), 2: ("dyaw", "dz")}


@dataclass
class TrajectoryLog:
    time: np.ndarray          # (T,) seconds at the start of each step
    states: np.ndarray        # (T, 6) x, y, z, yaw, speed, time
    actions: np.ndarray       # (T, k) action applied during the step
    cte: np.ndarray           # (T,) cross-track error before the step
    policy_control: np.ndarray  # (T,) bool, True when the learned policy chose the action
    intervention: np.ndarray  # (T,) bool, True at steps where an intervention began
    dt: float = 0.1
    aborted: bool = False
    images: np.ndarray | None = field(default=None, repr=False)  # optional (T, H, W) center views

    def __post_init__(self):
        n = len(self.time)
        self.actions = np.asarray(self.actions, dtype=float).reshape(n, -1)
        self.policy_control = np.asarray(self.policy_control, dtype=bool)
        self.intervention = np.asarray(self.intervention, dtype=bool)
        for name in ("states", "cte", "policy_control", "intervention"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length does not match time")

    def __len__(self):
        return len(self.time)

    @property
    def elapsed(self):
        return len(self) * self.dt

    def to_csv(self) -> str:
        k = self.actions.shape[1]
        names = ACTION_NAMES.get(k, tuple(f"a{i}" for i in range(k)))
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "time", "x", "y", "z", "yaw", *names, "cte", "in_control", "intervention_flag"])
        for i in range(len(self)):
            s = self.states[i]
            w.writerow([i, repr(float(self.time[i])), repr(float(s[0])), repr(float(s[1])),
                        repr(float(s[2])), repr(float(s[3])), *(repr(float(a)) for a in self.actions[i]),
                        repr(float(self.cte[i])), "policy" if self.policy_control[i] else "expert",
                        int(self.intervention[i])])
        return buf.getvalue()

    def write_csv(self, path):
        atomic_write_text(path, self.to_csv())

    @classmethod
    def from_csv(cls, text, dt=0.1, speed=np.nan):
        rows = list(csv.reader(_io.StringIO(text)))
        head, body = rows[0], rows[1:]
        col = {h: i for i, h in enumerate(head)}
        a_cols = head[col["yaw"] + 1:col["cte"]]

        def f(name):
            return np.array([float(r[col[name]]) for r in body])

        t = f("time")
        states = np.stack([f("x"), f("y"), f("z"), f("yaw"), np.full(len(body), speed), t], axis=1) \
            if body else np.zeros((0, 6))
        actions = np.stack([f(a) for a in a_cols], axis=1) if body else np.zeros((0, len(a_cols)))
        return cls(t, states, actions, f("cte"), np.array([r[col["in_control"]] == "policy" for r in body]),
                   np.array([r[col["intervention_flag"]] == "1" for r in body]), dt)
