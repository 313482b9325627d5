import json

import numpy as np
import pytest

from equinav.cli import artifact_hash, main
from equinav.config import RunConfig
from equinav.data import collect_demonstrations
from equinav.io import (
    FormatError,
    ManifestError,
    arrays_hash,
    pack_container,
    read_container,
    read_dataset,
    read_manifest,
    read_pgm,
    unpack_container,
    write_container,
    write_dataset,
    write_pgm,
)
from equinav.worldsim import flying_rig, generate_gate_course, generate_track, ground_rig

TINY_INI = """
[data]
episodes = 2
episode_steps = 6
policy_episodes = 1
policy_steps = 6

[repr]
epochs = 1

[policy]
epochs = 1

[dagger]
iterations = 1
episodes = 1
max_time = 1

[matrix]
seeds = 0
strategies = center,equivariant
"""


@pytest.fixture(scope="module")
def ground_ds():
    return collect_demonstrations(generate_track(1), ground_rig(), 10, 3, seed=0, lateral_jitter=0.5)


# -- containers and images ------------------------------------------------------------------

def test_container_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"w": rng.normal(size=(3, 4)).astype(np.float32), "b": np.zeros(0, np.float32),
              "s": np.float32(rng.normal(size=(2, 2, 2)))}
    write_container(tmp_path / "c.eqc", arrays, {"kind": "test"})
    back, meta = read_container(tmp_path / "c.eqc")
    assert meta["kind"] == "test"
    assert arrays_hash(back) == arrays_hash(arrays)
    for k in arrays:
        assert back[k].dtype == np.float32 and np.array_equal(back[k], arrays[k])


def test_container_layout_is_little_endian_float32():
    blob = pack_container({"a": np.array([1.0, -2.5], np.float32)})
    assert blob[:8] == b"EQNVCONT"
    assert blob.endswith(np.array([1.0, -2.5], dtype="<f4").tobytes())


def test_container_rejects_corruption_and_lossy_arrays():
    blob = pack_container({"a": np.ones(4, np.float32)})
    with pytest.raises(FormatError):
        unpack_container(b"NOTACONT" + blob[8:])
    with pytest.raises(FormatError):
        unpack_container(blob[:-4])
    with pytest.raises(FormatError):
        pack_container({"a": np.array([0.1], np.float64)})


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (48, 64), dtype=np.uint8)
    write_pgm(tmp_path / "x.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "x.pgm"), img)
    assert (tmp_path / "x.pgm").read_bytes().startswith(b"P5")


# -- datasets ----------------------------------------------------------------------------

def test_dataset_round_trip(tmp_path, ground_ds):
    write_dataset(ground_ds, tmp_path / "d")
    back = read_dataset(tmp_path / "d")
    assert np.array_equal(back.images, ground_ds.images)
    assert np.array_equal(back.actions, ground_ds.actions) and np.array_equal(back.states, ground_ds.states)
    assert back.rig == ground_ds.rig
    write_dataset(back, tmp_path / "e")
    assert (tmp_path / "d" / "manifest.jsonl").read_bytes() == (tmp_path / "e" / "manifest.jsonl").read_bytes()


def test_flying_dataset_keeps_viewpoint_order(tmp_path):
    ds = collect_demonstrations(generate_gate_course(2), flying_rig(), 1, 2, seed=0)
    write_dataset(ds, tmp_path / "f")
    back = read_dataset(tmp_path / "f")
    assert back.viewpoints == ds.viewpoints and np.array_equal(back.images, ds.images)


def test_missing_image_is_named(tmp_path, ground_ds):
    write_dataset(ground_ds, tmp_path / "d")
    victim = sorted((tmp_path / "d" / "images").iterdir())[4]
    victim.unlink()
    with pytest.raises(ManifestError, match=victim.name):
        read_manifest(tmp_path / "d")


def test_out_of_order_steps_rejected(tmp_path, ground_ds):
    write_dataset(ground_ds, tmp_path / "d")
    path = tmp_path / "d" / "manifest.jsonl"
    lines = path.read_text().splitlines()
    lines[1], lines[2] = lines[2], lines[1]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "d")


# -- configuration -------------------------------------------------------------------------

def test_config_defaults_and_round_trip():
    cfg = RunConfig()
    assert cfg.repr.w_eq == 10.0 and cfg.dagger.takeover_s == 6.0 and cfg.repr.batch_size == 64
    back = RunConfig.from_ini(cfg.to_ini())
    assert back == cfg and back.hash() == cfg.hash()


def test_config_unknown_keys_fail():
    with pytest.raises(KeyError):
        RunConfig.from_ini("[repr]\nepochz = 3\n")
    with pytest.raises(KeyError):
        RunConfig.from_ini("[nope]\na = 1\n")
    with pytest.raises(ValueError):
        RunConfig.from_ini("[run]\nplatform = boat\n")


def test_config_hash_ignores_output_location(monkeypatch):
    a, b = RunConfig(), RunConfig()
    b.set("run", "out", "/elsewhere")
    assert a.hash() == b.hash()
    b.set("repr", "epochs", "3")
    assert a.hash() != b.hash()
    monkeypatch.setenv("EQUINAV_OUT", "/from/env")
    assert a.out_root() == "/from/env" and b.out_root() == "/elsewhere"


def test_artifact_hash_ignores_selectors():
    a, b = RunConfig(), RunConfig()
    b.set("run", "seed", "4")
    b.set("policy", "strategy", "center")
    assert artifact_hash(a) == artifact_hash(b)


# -- command line ---------------------------------------------------------------------------

def test_cli_pipeline_and_idempotence(tmp_path, capsys):
    ini = tmp_path / "tiny.ini"
    ini.write_text(TINY_INI)
    out = str(tmp_path / "run")
    base = ["--config", str(ini), "--out", out]
    assert main(["collect", *base]) == 0
    assert main(["train-repr", *base]) == 0
    assert main(["train-policy", *base, "--strategy", "equivariant"]) == 0
    assert main(["dagger", *base, "--strategy", "equivariant"]) == 0
    assert main(["eval", *base, "--strategy", "equivariant"]) == 0
    assert main(["matrix", *base]) == 0
    assert main(["plot", *base]) == 0
    root = tmp_path / "run"
    for rel in ("config.ini", "config.sha256", "repr/track-2.ckpt", "repr/track-2-curve.csv",
                "policy/equivariant-s0-it0.ckpt", "policy/equivariant-s0-it1.ckpt",
                "logs/equivariant-s0-it0-ep0.csv", "results/results.csv"):
        assert (root / rel).exists(), rel
    header = (root / "repr/track-2-curve.csv").read_text().splitlines()[0]
    assert header == "epoch,split,loss_rc,loss_eq,loss_eq_rc,loss_total"
    _, meta = read_container(root / "repr/track-2.ckpt")
    assert meta["config_hash"] == (root / "config.sha256").read_text().strip()
    first = json.loads((root / "data/repr-track-2/manifest.jsonl").read_text().splitlines()[0])
    assert first["config_hash"] == meta["config_hash"]

    before = (root / "results/results.csv").read_bytes()
    assert main(["matrix", *base]) == 0
    assert (root / "results/results.csv").read_bytes() == before

    ini2 = tmp_path / "other.ini"
    ini2.write_text(TINY_INI.replace("[repr]\nepochs = 1", "[repr]\nepochs = 2"))
    assert main(["matrix", "--config", str(ini2), "--out", out]) == 2
    assert "different config" in capsys.readouterr().err


def test_cli_rejects_bad_flags(tmp_path):
    with pytest.raises(SystemExit):
        main(["train-policy", "--out", str(tmp_path), "--strategy", "center", "--sigma", "0.1"])
    with pytest.raises(SystemExit):
        main(["collect", "--platform", "boat"])
    assert main(["train-policy", "--out", str(tmp_path / "empty")]) == 2
