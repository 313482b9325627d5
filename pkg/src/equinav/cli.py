"""Command line entry points.

Artifact layout under the output root::

    config.ini, config.sha256           resolved config and its artifact hash
    data/repr-<world>/                   representation dataset (manifest.jsonl + PGM images)
    data/policy-<world>-s<seed>/         expert demonstrations for policy training
    repr/<world>.ckpt, repr/<world>-curve.csv
    policy/<strategy>-s<seed>-it<k>.ckpt (+ .emb, .emb.jsonl for iteration 0)
    logs/<strategy>-s<seed>-it<k>-ep<e>.csv
    results/results.csv, results/ablation.csv, plots
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from equinav.augment import profile_for
from equinav.config import RunConfig
from equinav.data import collect_demonstrations
from equinav.evalkit import (
    NOISE_SIGMAS,
    ExperimentMatrix,
    WorldSpec,
    emit_report,
    make_builder,
    parse_strategy,
    records_from_csv,
    records_to_csv,
    run_cell,
    run_matrix,
    strategy_id,
)
from equinav.imitate import DaggerConfig, PolicySnapshot, PolicyTrainConfig, load_snapshot, save_snapshot, train_policy
from equinav.io import atomic_write_text, read_dataset, write_dataset
from equinav.replearn import (
    LossWeights,
    ReprTrainConfig,
    equivariance_ratio,
    load_representation,
    save_representation,
    train_representation,
)
from equinav.worldsim import rig_for

log = logging.getLogger("equinav")

STRATEGY_CHOICES = ("center", "allcams", "equivariant", "noise", "random-map", "det-map")
REPR_EPISODE_OFFSET = 1_000_000


class ArtifactError(RuntimeError):
    pass


# -- configuration ------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.out:
        cfg.set("run", "out", args.out)
    if args.seed is not None:
        cfg.set("run", "seed", args.seed)
    if args.platform:
        cfg.set("run", "platform", args.platform)
    if args.strategy:
        cfg.set("policy", "strategy", args.strategy)
    if args.sigma is not None:
        if (args.strategy or cfg.policy.strategy) != "noise":
            raise SystemExit("--sigma only applies to --strategy noise")
        cfg.set("policy", "sigma", args.sigma)
    if args.iterations is not None:
        cfg.set("dagger", "iterations", args.iterations)
    if args.episodes is not None:
        if args.command == "collect":
            cfg.set("data", "episodes", args.episodes)
        else:
            cfg.set("dagger", "episodes", args.episodes)
    return cfg


def artifact_hash(cfg: RunConfig) -> str:
    """Hash of everything that changes artifact contents; per-run selectors are left out."""
    c = RunConfig.from_ini(cfg.to_ini())
    c.run.seed = 0
    c.policy.strategy, c.policy.sigma = "equivariant", 0.1
    c.dagger.iterations = 0
    c.matrix = type(c.matrix)()
    return c.hash()


class Layout:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_root())
        kind = "track" if cfg.run.platform == "ground-sim" else "gates"
        w = cfg.world
        self.repr_world = WorldSpec(kind, w.repr_world_seed, w.size, w.curvature_scale)
        self.test_world = WorldSpec(kind, w.test_world_seed, w.size, w.curvature_scale)
        self.map_world = WorldSpec(kind, w.map_world_seed, w.size, w.curvature_scale)

    def claim(self, force):
        """Record the config in the output root; refuse a root built from a different config."""
        self.root.mkdir(parents=True, exist_ok=True)
        h = artifact_hash(self.cfg)
        stamp = self.root / "config.sha256"
        if stamp.exists() and stamp.read_text().strip() != h and not force:
            raise ArtifactError(f"{self.root} holds artifacts from a different config "
                                f"(hash {stamp.read_text().strip()[:12]}); use --force or another --out")
        atomic_write_text(self.root / "config.ini", self.cfg.to_ini())
        atomic_write_text(stamp, h + "\n")
        return h

    def repr_data(self, spec):
        return self.root / "data" / f"repr-{spec.world_id}"

    def policy_data(self, seed):
        return self.root / "data" / f"policy-{self.test_world.world_id}-s{seed}"

    def repr_ckpt(self, spec):
        return self.root / "repr" / f"{spec.world_id}.ckpt"

    def policy_ckpt(self, sid, seed, it):
        return self.root / "policy" / f"{sid}-s{seed}-it{it}.ckpt"

    def results(self, name="results.csv"):
        return self.root / "results" / name


def repr_config(cfg: RunConfig, seed) -> ReprTrainConfig:
    r = cfg.repr
    return ReprTrainConfig(epochs=r.epochs, batch_size=r.batch_size, lr=r.lr, seed=seed,
                           val_fraction=r.val_fraction, patience=r.patience,
                           weights=LossWeights(r.w_rc, r.w_eq, r.w_eq_rc), dropout=r.dropout)


def build_matrix(cfg: RunConfig, lay: Layout, strategies, iterations=None) -> ExperimentMatrix:
    d = cfg.dagger
    return ExperimentMatrix(
        strategies=list(strategies), iterations=d.iterations if iterations is None else iterations,
        seeds=list(cfg.matrix.seeds), platform=cfg.run.platform, repr_world=lay.repr_world,
        test_world=lay.test_world, map_world=lay.map_world, demo_episodes=cfg.data.policy_episodes,
        demo_steps=cfg.data.policy_steps,
        dagger=DaggerConfig(iterations=max(d.iterations, 1), episodes=d.episodes, max_time=d.max_time,
                            takeover_s=d.takeover_s, takeover=d.takeover, relabel=d.relabel,
                            retrain_epochs=d.retrain_epochs, yaw_noise=d.yaw_noise, z_noise=d.z_noise),
        policy=PolicyTrainConfig(cfg.policy.epochs, cfg.policy.batch_size, cfg.policy.lr))


# -- steps shared by several commands ---------------------------------------------------

def ensure_repr_data(cfg, lay, spec, force=False):
    path = lay.repr_data(spec)
    if (path / "manifest.jsonl").exists() and not force:
        log.info("skip: %s exists", path)
        return path
    d = cfg.data
    ds = collect_demonstrations(spec.build(), rig_for(cfg.run.platform), d.episodes, d.episode_steps,
                                seed=cfg.run.seed, lateral_jitter=d.lateral_jitter,
                                heading_jitter=d.heading_jitter, episode_offset=REPR_EPISODE_OFFSET)
    write_dataset(ds, path, {"config_hash": artifact_hash(cfg)})
    log.info("wrote %d tuples to %s", len(ds), path)
    return path


def ensure_policy_data(cfg, lay, seed, force=False):
    path = lay.policy_data(seed)
    if (path / "manifest.jsonl").exists() and not force:
        log.info("skip: %s exists", path)
        return path
    ds = collect_demonstrations(lay.test_world.build(), rig_for(cfg.run.platform), cfg.data.policy_episodes,
                                cfg.data.policy_steps, seed=seed)
    write_dataset(ds, path, {"config_hash": artifact_hash(cfg)})
    log.info("wrote %d demonstrations to %s", len(ds), path)
    return path


def ensure_repr(cfg, lay, spec, force=False, train_missing=False):
    ckpt = lay.repr_ckpt(spec)
    if ckpt.exists() and not force:
        net, _, meta = load_representation(ckpt)
        if meta.get("config_hash") != artifact_hash(cfg):
            raise ArtifactError(f"{ckpt} was trained under a different config")
        return net
    data_dir = lay.repr_data(spec)
    if not (data_dir / "manifest.jsonl").exists():
        if not train_missing:
            raise ArtifactError(f"missing representation dataset {data_dir}; run `equinav collect` first")
        ensure_repr_data(cfg, lay, spec)
    ds = read_dataset(data_dir)
    rig = rig_for(cfg.run.platform)
    if ds.rig != rig:
        raise ArtifactError(f"{data_dir} was recorded with a different rig")
    rcfg = repr_config(cfg, cfg.run.seed)
    res = train_representation(ds.images, ds.episodes, rcfg, viewpoints=rig.viewpoints)
    ratios, skipped = equivariance_ratio(res.net.encoder, res.net.maps, ds.images[res.val_idx]) \
        if len(res.val_idx) else ({}, {})
    save_representation(res.net, ckpt, rcfg, {"config_hash": artifact_hash(cfg), "world_id": spec.world_id,
                                               "equivariance_ratio": ratios, "flagged": res.flagged})
    curve_path = ckpt.with_name(f"{spec.world_id}-curve.csv")
    rows = ["epoch,split,loss_rc,loss_eq,loss_eq_rc,loss_total"] + [
        f"{r['epoch']},{r['split']},{r['loss_rc']!r},{r['loss_eq']!r},{r['loss_eq_rc']!r},{r['loss_total']!r}"
        for r in res.curve]
    atomic_write_text(curve_path, "\n".join(rows) + "\n")
    log.info("representation %s: ratios %s%s", spec.world_id, ratios, " (flagged)" if res.flagged else "")
    return res.net


def _policy_id(cfg):
    return strategy_id(cfg.policy.strategy, cfg.policy.sigma if cfg.policy.strategy == "noise" else None)


def _check_rig(ds, net, cfg):
    if list(net.viewpoints) != list(ds.rig.viewpoints) or tuple(net.encoder.image_shape) != ds.rig.image_shape:
        raise ArtifactError("dataset rig does not match the representation checkpoint")


# -- commands --------------------------------------------------------------------------

def cmd_collect(cfg, lay, args):
    ensure_repr_data(cfg, lay, lay.repr_world, args.force)
    ensure_policy_data(cfg, lay, cfg.run.seed, args.force)


def cmd_train_repr(cfg, lay, args):
    ckpt = lay.repr_ckpt(lay.repr_world)
    if ckpt.exists() and not args.force:
        log.info("skip: %s exists", ckpt)
        return
    ensure_repr(cfg, lay, lay.repr_world, force=True)


def cmd_train_policy(cfg, lay, args):
    sid, seed = _policy_id(cfg), cfg.run.seed
    out = lay.policy_ckpt(sid, seed, 0)
    if out.exists() and not args.force:
        log.info("skip: %s exists", out)
        return
    net = ensure_repr(cfg, lay, lay.repr_world)
    data_dir = lay.policy_data(seed)
    if not (data_dir / "manifest.jsonl").exists():
        raise ArtifactError(f"missing demonstrations {data_dir}; run `equinav collect --seed {seed}` first")
    demo = read_dataset(data_dir)
    _check_rig(demo, net, cfg)
    profile = profile_for(cfg.run.platform)
    base, sigma = parse_strategy(sid)
    builder = make_builder(base, net.encoder, profile, dict(net.maps.items()), sigma, seed)
    emb = builder(demo)
    pcfg = PolicyTrainConfig(cfg.policy.epochs, cfg.policy.batch_size, cfg.policy.lr, seed)
    res = train_policy(emb, pcfg)
    snap = PolicySnapshot(net.encoder, res.head, profile, base, 0)
    emb.save(out.with_suffix(".emb"))
    save_snapshot(snap, out, str(lay.repr_ckpt(lay.repr_world)),
                  {"seed": seed, "strategy_id": sid, "config_hash": artifact_hash(cfg),
                   "curve": res.curve})
    log.info("policy %s seed %d: loss %.5f -> %.5f", sid, seed, res.curve[0], res.curve[-1])


def _write_logs(lay, sid, seed, it, logs):
    for e, lg in enumerate(logs):
        lg.write_csv(lay.root / "logs" / f"{sid}-s{seed}-it{it}-ep{e}.csv")


def _merge_records(path, new):
    old = records_from_csv(path.read_text()) if path.exists() else []
    keep = {(r.key, r.world_id, r.ood_flag): r for r in old}
    for r in new:
        keep[(r.key, r.world_id, r.ood_flag)] = r
    atomic_write_text(path, records_to_csv(keep.values()))


def cmd_dagger(cfg, lay, args):
    sid, seed = _policy_id(cfg), cfg.run.seed
    n = cfg.dagger.iterations
    final = lay.policy_ckpt(sid, seed, n)
    if final.exists() and not args.force:
        log.info("skip: %s exists", final)
        return
    start = lay.policy_ckpt(sid, seed, 0)
    if not start.exists():
        raise ArtifactError(f"missing {start}; run `equinav train-policy` first")
    net = ensure_repr(cfg, lay, lay.repr_world)
    snap = load_snapshot(start, net.encoder)
    demo = read_dataset(lay.policy_data(seed))
    _check_rig(demo, net, cfg)
    matrix = build_matrix(cfg, lay, [sid])
    world = lay.test_world.build()

    def keep(it, s, logs):
        if it > 0:
            save_snapshot(s, lay.policy_ckpt(sid, seed, it), str(lay.repr_ckpt(lay.repr_world)),
                          {"seed": seed, "strategy_id": sid, "config_hash": artifact_hash(cfg)})
        _write_logs(lay, sid, seed, it, logs)

    recs = run_cell(sid, seed, matrix, net, world, demo, world_id=lay.test_world.world_id,
                    snapshot=snap, on_iteration=keep)
    _merge_records(lay.results("dagger.csv"), recs)
    for r in recs:
        log.info("%s it %d: cte %.3f m, %d interventions, autonomy %.2f%%", r.strategy, r.iteration,
                 r.mean_cte_m, r.interventions, r.autonomy_pct)


def cmd_eval(cfg, lay, args):
    from equinav.imitate import evaluate
    from equinav.metrics import MetricsRecord, rule_for

    sid, seed = _policy_id(cfg), cfg.run.seed
    it = cfg.dagger.iterations if args.iterations is not None else 0
    ckpt = lay.policy_ckpt(sid, seed, it)
    if not ckpt.exists():
        raise ArtifactError(f"missing {ckpt}")
    net = ensure_repr(cfg, lay, lay.repr_world)
    snap = load_snapshot(ckpt, net.encoder)
    world = lay.test_world.build()
    dcfg = build_matrix(cfg, lay, [sid]).dagger
    logs = evaluate(snap, world, replace(dcfg, seed=seed), iteration=it)
    _write_logs(lay, sid, seed, it, logs)
    rec = MetricsRecord.from_logs(logs, rule_for(world), sid, it, seed, lay.test_world.world_id)
    _merge_records(lay.results("eval.csv"), [rec])
    print(",".join(str(x) for x in rec.as_row()))


def _expand(strategies, sigmas):
    out = []
    for s in strategies:
        out += [strategy_id("noise", x) for x in sigmas] if s == "noise" else [s]
    return out


def _run_and_store(matrix, reps, path):
    existing = records_from_csv(path.read_text()) if path.exists() else []
    records, stats = run_matrix(matrix, reps, existing, on_record=None)
    atomic_write_text(path, records_to_csv(records))
    for sid, seed, err in stats.errors:
        log.error("cell %s seed %d failed: %s", sid, seed, err)
    log.info("%s: %d records, %d trainings, %d cells skipped", path.name, len(records), stats.trainings,
             stats.skipped_cells)
    return records, stats


def cmd_matrix(cfg, lay, args):
    strategies = _expand(cfg.matrix.strategies, cfg.matrix.sigmas or NOISE_SIGMAS)
    matrix = build_matrix(cfg, lay, strategies)
    reps = {lay.repr_world.world_id: lambda: ensure_repr(cfg, lay, lay.repr_world, train_missing=True)}
    _, stats = _run_and_store(matrix, reps, lay.results())
    return 1 if stats.errors else 0


def cmd_ablate(cfg, lay, args):
    """Map ablations and map transfer at iteration 0."""
    path = lay.results("ablation.csv")
    reps = {lay.repr_world.world_id: lambda: ensure_repr(cfg, lay, lay.repr_world, train_missing=True),
            lay.map_world.world_id: lambda: ensure_repr(cfg, lay, lay.map_world, train_missing=True)}
    matrix = build_matrix(cfg, lay, ["center", "equivariant", "det-map", "random-map"], iterations=0)
    _, s1 = _run_and_store(matrix, reps, path)
    if lay.map_world != lay.test_world:
        ood = replace(matrix, strategies=["equivariant-ood"], repr_world=lay.map_world)
        _, s2 = _run_and_store(ood, reps, path)
        return 1 if (s1.errors or s2.errors) else 0
    return 1 if s1.errors else 0


def cmd_plot(cfg, lay, args):
    records = []
    for name in ("results.csv", "ablation.csv"):
        p = lay.results(name)
        if p.exists():
            records += records_from_csv(p.read_text())
    if not records:
        raise ArtifactError(f"no results under {lay.results('')}; run `equinav matrix` first")
    main = [r for r in records if r.strategy not in ("det-map", "random-map", "equivariant-ood")]
    paths = emit_report(main, lay.root / "results" / "report")
    abl = [r for r in records if r.iteration == 0]
    paths.update({f"ablation_{k}": v for k, v in emit_report(abl, lay.root / "results" / "ablation").items()})
    for k, v in sorted(paths.items()):
        print(f"{k}: {v}")


COMMANDS = {
    "collect": cmd_collect,
    "train-repr": cmd_train_repr,
    "train-policy": cmd_train_policy,
    "dagger": cmd_dagger,
    "eval": cmd_eval,
    "matrix": cmd_matrix,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI config file")
    common.add_argument("--out", metavar="DIR", help="output root (default: $EQUINAV_OUT or ./equinav-runs)")
    common.add_argument("--seed", type=int, help="master seed for single-run commands")
    common.add_argument("--platform", choices=("ground-sim", "flying"))
    common.add_argument("--strategy", choices=STRATEGY_CHOICES)
    common.add_argument("--sigma", type=float, help="pixel noise std, noise strategy only")
    common.add_argument("--iterations", type=int, help="DAgger iterations")
    common.add_argument("--episodes", type=int,
                        help="collect: representation episodes; dagger/eval/matrix: episodes per iteration")
    common.add_argument("--force", action="store_true", help="recompute outputs that already exist")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="equinav", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"collect": "record expert datasets", "train-repr": "train encoder, decoder and maps",
             "train-policy": "train an iteration-0 policy for one strategy",
             "dagger": "run DAgger from an iteration-0 policy", "eval": "evaluate one policy snapshot",
             "matrix": "run the strategy x iteration x seed matrix",
             "ablate": "map ablations and map-transfer runs", "plot": "write report plots from results"}
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        lay = Layout(cfg)
        lay.claim(args.force)
        return COMMANDS[args.command](cfg, lay, args) or 0
    except (ArtifactError, KeyError, ValueError) as err:
        print(f"equinav {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
