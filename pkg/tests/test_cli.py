import csv
import json

import pytest

from molflae.cli import run
from molflae.moldata import load_xyz, write_xyz

from builders import dimethyl_ether, ethanol, methane

TINY = ["n_latent=4", "latent_dim=4", "hidden=16", "layers=2", "heads=2", "k=8", "batch_size=3", "n_steps=50", "eval_every=2"]


def _sets():
    out = []
    for kv in TINY:
        out += ["--set", kv]
    return out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, vocab):
    d = tmp_path_factory.mktemp("cli")
    write_xyz(d / "train.xyz", [ethanol(vocab), dimethyl_ether(vocab), methane(vocab)] * 2, vocab)
    write_xyz(d / "a.xyz", [ethanol(vocab)], vocab)
    write_xyz(d / "b.xyz", [methane(vocab)], vocab)
    code = run(["train", "--data", str(d / "train.xyz"), "--steps", "2", "--out", str(d / "run"), *_sets()])
    assert code == 0
    return d


def _ck(d):
    return str(d / "run" / "model.ckpt")


def test_train_outputs(workdir):
    run_dir = workdir / "run"
    assert {p.name for p in run_dir.iterdir()} >= {"model.ckpt", "config.txt", "run.json"}
    rec = json.loads((run_dir / "run.json").read_text())
    assert rec["verb"] == "train" and rec["final_step"] == 2
    assert len(rec["checkpoint_hash"]) == 64
    assert "hidden" in rec["config"] and (run_dir / "config.txt").read_text() == rec["config"]


def test_no_verb_is_usage_error(capsys):
    assert run([]) == 1


def test_unknown_verb_is_usage_error(capsys):
    assert run(["frobnicate"]) == 1


def test_sample_needs_checkpoint(capsys, tmp_path):
    assert run(["sample", "--out", str(tmp_path)]) == 1


def test_bad_override_is_usage_error(workdir, tmp_path):
    assert run(["train", "--data", str(workdir / "train.xyz"), "--set", "no_such_key=1", "--out", str(tmp_path)]) == 1


def test_missing_input_is_runtime_error(workdir, tmp_path):
    assert run(["analog", "--checkpoint", _ck(workdir), "--input", str(tmp_path / "nope.xyz"), "--out", str(tmp_path)]) == 2


def test_sample_is_reproducible(workdir, tmp_path):
    args = ["sample", "--checkpoint", _ck(workdir), "--count", "3", "--steps", "3", "--seed", "5"]
    assert run(args + ["--out", str(tmp_path / "s1")]) == 0
    assert run(args + ["--out", str(tmp_path / "s2")]) == 0
    assert (tmp_path / "s1" / "samples.xyz").read_bytes() == (tmp_path / "s2" / "samples.xyz").read_bytes()
    rec = json.loads((tmp_path / "s1" / "run.json").read_text())
    assert rec["seed"] == 5 and rec["verb"] == "sample" and rec["checkpoint_hash"]


def test_sample_sidecars(workdir, tmp_path):
    assert run(["sample", "--checkpoint", _ck(workdir), "--count", "2", "--steps", "2", "--sidecar", "--out", str(tmp_path)]) == 0
    side = json.loads((tmp_path / "sample_1.json").read_text())
    assert side["op"] == "sample" and side["seed"] == 0


def test_encode_then_decode(workdir, tmp_path, vocab):
    assert run(["encode", "--checkpoint", _ck(workdir), "--input", str(workdir / "a.xyz"), "--out", str(tmp_path)]) == 0
    assert run(["decode", "--checkpoint", _ck(workdir), "--latents", str(tmp_path / "latents.json"), "--steps", "2", "--out", str(tmp_path)]) == 0
    (m,) = load_xyz(tmp_path / "decoded.xyz", vocab)
    assert m.num_atoms == 9


def test_analog_delta(workdir, tmp_path, vocab):
    assert run(["analog", "--checkpoint", _ck(workdir), "--input", str(workdir / "a.xyz"), "--delta", "-2", "--steps", "2", "--out", str(tmp_path)]) == 0
    assert load_xyz(tmp_path / "analogs.xyz", vocab)[0].num_atoms == 7


def test_swap_outputs(workdir, tmp_path, vocab):
    assert run(["swap", "--checkpoint", _ck(workdir), "--a", str(workdir / "a.xyz"), "--b", str(workdir / "b.xyz"), "--steps", "2", "--out", str(tmp_path)]) == 0
    assert load_xyz(tmp_path / "spatial_from_a.xyz", vocab)[0].num_atoms == 5
    assert load_xyz(tmp_path / "spatial_from_b.xyz", vocab)[0].num_atoms == 9
    assert (tmp_path / "swap.csv").exists()


def test_interpolate_writes_frames_and_trends(workdir, tmp_path):
    assert run(["interpolate", "--checkpoint", _ck(workdir), "--a", str(workdir / "a.xyz"), "--b", str(workdir / "b.xyz"), "--steps", "2", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("frame_*.xyz"))) == 10
    with open(tmp_path / "trend.csv") as fh:
        props = [r["property"] for r in csv.DictReader(fh)]
    assert props == ["sp3_fraction", "radius_of_gyration", "heavy_atom_count", "similarity_preference"]


def test_interpolate_lambda(workdir, tmp_path):
    args = ["interpolate", "--checkpoint", _ck(workdir), "--a", str(workdir / "a.xyz"), "--b", str(workdir / "b.xyz"), "--steps", "2", "--out", str(tmp_path)]
    assert run(args + ["--lambda", "0.5", "--repeats", "2"]) == 0
    assert json.loads((tmp_path / "blend.json").read_text())["lambda"] == 0.5
    assert run(args + ["--lambda", "1.5"]) == 1


def test_align(workdir, tmp_path):
    assert run(["align", "--checkpoint", _ck(workdir), "--a", str(workdir / "a.xyz"), "--b", str(workdir / "a.xyz"), "--out", str(tmp_path)]) == 0
    rec = json.loads((tmp_path / "transform.json").read_text())
    assert len(rec["rotation"]) == 3


def test_eval_without_checkpoint(workdir, tmp_path, capsys):
    assert run(["eval", "--input", str(workdir / "train.xyz"), "--metrics", "stability,validity,uniqueness", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "metrics.csv") as fh:
        (row,) = list(csv.DictReader(fh))
    assert float(row["atom_stability_pct"]) == pytest.approx(100.0)
    assert float(row["valid_unique_pct"]) == pytest.approx(50.0)
    assert "atom_stability" in capsys.readouterr().out


def test_eval_unknown_metric(workdir, tmp_path):
    assert run(["eval", "--input", str(workdir / "train.xyz"), "--metrics", "bogus", "--out", str(tmp_path)]) == 1


def test_data_dir_fallback(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("MOLFLAE_DATA_DIR", str(workdir))
    assert run(["eval", "--input", "a.xyz", "--out", str(tmp_path)]) == 0
