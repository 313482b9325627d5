"""Evaluation: metrics, the strategy x DAgger-iteration x seed matrix, map-transfer runs and reports."""

from __future__ import annotations

import csv
import io as _io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from equinav.augment import (
    build_allcams,
    build_center,
    build_equivariant,
    build_noise,
    make_deterministic_map,
    make_random_map,
    profile_for,
)
from equinav.data import collect_demonstrations
from equinav.metrics import (  # noqa: F401  re-exported
    AIR_DEVIATION_LIMIT,
    TAKEOVER_S,
    InterventionRule,
    MetricsRecord,
    intervention_triggers,
    metric_autonomy,
    metric_cte,
    metric_interventions,
    rule_for,
)
from equinav.imitate import DaggerConfig, PolicySnapshot, PolicyTrainConfig, dagger_iterate, evaluate, train_policy
from equinav.io import atomic_write_text
from equinav.worldsim import generate_gate_course, generate_track, rig_for

log = logging.getLogger(__name__)

NOISE_SIGMAS = (0.01, 0.05, 0.1, 0.2, 0.3)


@dataclass(frozen=True)
class WorldSpec:
    kind: str = "track"      # "track" or "gates"
    seed: int = 0
    size: int = 12           # waypoints or gates
    curvature_scale: float = 0.3

    @property
    def world_id(self):
        return f"{self.kind}-{self.seed}"

    def build(self):
        if self.kind == "track":
            return generate_track(self.seed, self.size, self.curvature_scale)
        if self.kind == "gates":
            return generate_gate_course(self.seed, self.size)
        raise ValueError(f"unknown world kind {self.kind!r}")


def strategy_id(strategy, sigma=None):
    return f"noise-{sigma:g}" if strategy == "noise" else strategy


def parse_strategy(sid):
    """'noise-0.1' -> ('noise', 0.1); 'equivariant-ood' -> ('equivariant', None)."""
    if sid.startswith("noise-"):
        return "noise", float(sid[len("noise-"):])
    return sid.removesuffix("-ood"), None


@dataclass
class ExperimentMatrix:
    strategies: list = field(default_factory=lambda: ["center", "allcams", "equivariant"])
    iterations: int = 3
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    platform: str = "ground-sim"
    repr_world: WorldSpec = field(default_factory=lambda: WorldSpec("track", 2))
    test_world: WorldSpec = field(default_factory=lambda: WorldSpec("track", 2))
    map_world: WorldSpec = field(default_factory=lambda: WorldSpec("track", 1))
    demo_episodes: int = 10
    demo_steps: int = 100
    dagger: DaggerConfig = field(default_factory=lambda: DaggerConfig(episodes=3, yaw_noise=0.02))
    policy: PolicyTrainConfig = field(default_factory=PolicyTrainConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.seeds:
            raise ValueError("need at least one seed")
        for s in self.strategies:
            base, sigma = parse_strategy(s)
            if base not in ("center", "allcams", "equivariant", "noise", "random-map", "det-map"):
                raise ValueError(f"unknown strategy {s!r}")

    def supports_ordering_claims(self):
        return len(set(self.seeds)) >= 3

    def check_ood(self):
        if self.map_world == self.test_world:
            raise ValueError("map-training world must differ from the test world in transfer runs")

    def cells(self):
        return [(s, i, seed) for seed in self.seeds for s in self.strategies for i in range(self.iterations + 1)]


def make_builder(strategy, encoder, profile, maps=None, sigma=None, seed=0):
    """Function turning a DemoDataset into the strategy's EmbeddingDataset."""
    dim = encoder.embed_dim
    others = [v for v in profile.viewpoints if v != "center"]
    if strategy == "center":
        return lambda demo: build_center(demo, encoder)
    if strategy == "allcams":
        return lambda demo: build_allcams(demo, encoder, profile)
    if strategy == "equivariant":
        if maps is None:
            raise ValueError("equivariant strategy needs trained maps")
        return lambda demo: build_equivariant(demo, encoder, maps, profile)
    if strategy == "random-map":
        rmaps = {v: make_random_map(dim, 1000 * seed + j) for j, v in enumerate(others)}
        return lambda demo: build_equivariant(demo, encoder, rmaps, profile)
    if strategy == "det-map":
        dmaps = {v: make_deterministic_map(dim, v) for v in others}
        return lambda demo: build_equivariant(demo, encoder, dmaps, profile)
    if strategy == "noise":
        if sigma is None:
            raise ValueError("noise strategy needs sigma")
        counter = iter(range(1 << 30))
        # fresh noise for every batch of new states, reproducible by call order
        return lambda demo: build_noise(demo, encoder, [sigma], seed=1_000_003 * seed + next(counter))
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class MatrixStats:
    trainings: int = 0
    skipped_cells: int = 0
    errors: list = field(default_factory=list)


def run_cell(strategy_sid, seed, matrix: ExperimentMatrix, representation, world, demo, stats=None,
             world_id="", ood_flag=False, snapshot=None, on_iteration=None):
    """Train the iteration-0 policy for one (strategy, seed) and walk it through DAgger.

    ``snapshot`` replaces the iteration-0 training; ``on_iteration(it, snapshot, logs)``
    sees every evaluated policy.
    """
    base, sigma = parse_strategy(strategy_sid)
    profile = profile_for(matrix.platform)
    encoder = representation.encoder
    maps = dict(representation.maps.items()) if hasattr(representation, "maps") else None
    builder = make_builder(base, encoder, profile, maps, sigma, seed)
    pcfg = replace(matrix.policy, seed=seed)
    dcfg = replace(matrix.dagger, seed=seed, iterations=max(matrix.iterations, 1))
    agg = builder(demo)
    if snapshot is None:
        res = train_policy(agg, pcfg)
        if stats is not None:
            stats.trainings += 1
        snapshot = PolicySnapshot(encoder, res.head, profile, base, 0)
    snap = snapshot
    rule = rule_for(world)
    records = []
    for it in range(matrix.iterations + 1):
        if it < matrix.iterations:
            st = dagger_iterate(snap, world, dcfg, agg, builder, demo.rig, pcfg)
            if stats is not None:
                stats.trainings += 1
            logs, snap_next, agg = st.logs, st.next_snapshot, st.aggregate
        else:
            logs, snap_next = evaluate(snap, world, dcfg), None
        if on_iteration is not None:
            on_iteration(it, snap, logs)
        records.append(MetricsRecord.from_logs(logs, rule, strategy_sid, it, seed, world_id, ood_flag))
        snap = snap_next
    return records


def run_matrix(matrix: ExperimentMatrix, representations, existing=(), on_record=None):
    """Full factorial records; cells whose records all exist are skipped.

    ``representations`` maps a world id to a trained RepresentationNet (or a
    callable returning one). Failures are reported per cell in the returned
    stats and the matrix carries on.
    """
    have = {r.key: r for r in existing}
    stats = MatrixStats()
    world = matrix.test_world.build()
    rig = rig_for(matrix.platform)
    out = list(existing)
    demos = {}
    for seed in matrix.seeds:
        for sid in matrix.strategies:
            keys = [(sid, i, seed) for i in range(matrix.iterations + 1)]
            if all(k in have for k in keys):
                stats.skipped_cells += 1
                continue
            try:
                rep = representations[matrix.repr_world.world_id]
                rep = rep() if callable(rep) and not hasattr(rep, "encoder") else rep
                if seed not in demos:
                    demos[seed] = collect_demonstrations(world, rig, matrix.demo_episodes, matrix.demo_steps,
                                                         seed=seed)
                recs = run_cell(sid, seed, matrix, rep, world, demos[seed], stats,
                                matrix.test_world.world_id, matrix.repr_world != matrix.test_world)
            except Exception as err:  # reported per cell, the matrix continues
                log.warning("cell %s seed %d failed: %s", sid, seed, err)
                stats.errors.append((sid, seed, f"{type(err).__name__}: {err}"))
                continue
            for r in recs:
                if r.key not in have:
                    out.append(r)
                    have[r.key] = r
                    if on_record is not None:
                        on_record(r)
    return out, stats


def ood_transfer(matrix: ExperimentMatrix, representations, existing=()):
    """Equivariant policy whose encoder and maps come from the map world, evaluated on the test world.

    Records are tagged ``equivariant-ood`` with ``ood_flag`` set; the
    in-distribution control is the same matrix run with ``repr_world = test_world``.
    """
    matrix.check_ood()
    ood = replace(matrix, strategies=["equivariant-ood"], repr_world=matrix.map_world)
    ctrl = replace(matrix, repr_world=matrix.test_world)
    recs, stats = run_matrix(ood, representations, existing)
    return run_matrix(ctrl, representations, recs)[0], stats


# -- reporting -------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricsRecord.FIELDS)
    for r in sorted(records, key=lambda r: (r.strategy, r.iteration, r.seed, r.world_id, r.ood_flag)):
        w.writerow([_fmt(v) for v in r.as_row()])
    return buf.getvalue()


def records_from_csv(text):
    rows = list(csv.DictReader(_io.StringIO(text)))
    return [MetricsRecord(r["strategy"], int(r["iteration"]), int(r["seed"]), float(r["mean_cte_m"]),
                          int(r["interventions"]), float(r["elapsed_s"]), float(r["autonomy_pct"]),
                          r["world_id"], r["ood_flag"] in ("1", "True", "true")) for r in rows]


def summarize(records, field_name="mean_cte_m"):
    """{(strategy, iteration): (mean, stderr, n)} over seeds."""
    groups = {}
    for r in records:
        groups.setdefault((r.strategy, r.iteration), []).append(getattr(r, field_name))
    out = {}
    for k, vals in groups.items():
        v = np.asarray(vals, dtype=float)
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        out[k] = (float(v.mean()), se, len(v))
    return out


def paired(records, a, b, iteration, field_name="mean_cte_m"):
    """Per-seed values of strategies ``a`` and ``b`` at ``iteration``, over seeds present for both."""
    va = {r.seed: getattr(r, field_name) for r in records if r.strategy == a and r.iteration == iteration}
    vb = {r.seed: getattr(r, field_name) for r in records if r.strategy == b and r.iteration == iteration}
    seeds = sorted(set(va) & set(vb))
    return np.array([va[s] for s in seeds], dtype=float), np.array([vb[s] for s in seeds], dtype=float)


def sign_test(x, y):
    """One-sided sign test that x > y more often than chance; ties are dropped.

    Returns (wins, n_nonzero, p_value).
    """
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    wins = int((d > 0).sum())
    n = int((d != 0).sum())
    p = float(binomtest(wins, n, 0.5, alternative="greater").pvalue) if n else 1.0
    return wins, n, p


def emit_report(records, out_dir, ablation_strategies=("equivariant", "det-map", "random-map")):
    """results.csv, cte_vs_iteration.png and ablation_cte.png in ``out_dir``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "results.csv", records_to_csv(records))
    summ = summarize(records)
    paths = {"csv": out_dir / "results.csv"}

    fig, ax = plt.subplots(figsize=(6, 4))
    for s in sorted({k[0] for k in summ}):
        its = sorted(i for (st, i) in summ if st == s)
        if len(its) < 2:
            continue
        m = np.array([summ[(s, i)][0] for i in its])
        e = np.array([summ[(s, i)][1] for i in its])
        ax.errorbar(its, m, yerr=e, marker="o", capsize=3, label=s)
    ax.set_xlabel("DAgger iteration")
    ax.set_ylabel("mean cross-track error (m)")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7)
    fig.tight_layout()
    paths["cte_plot"] = out_dir / "cte_vs_iteration.png"
    fig.savefig(paths["cte_plot"], dpi=100, metadata={"Software": None})
    plt.close(fig)

    bars = [(s, summ[(s, 0)]) for s in ablation_strategies if (s, 0) in summ]
    if bars:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar([b[0] for b in bars], [b[1][0] for b in bars], yerr=[b[1][1] for b in bars], capsize=4)
        ax.set_ylabel("mean cross-track error (m)")
        fig.tight_layout()
        paths["ablation_plot"] = out_dir / "ablation_cte.png"
        fig.savefig(paths["ablation_plot"], dpi=100, metadata={"Software": None})
        plt.close(fig)
    return paths
