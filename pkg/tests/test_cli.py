import csv
import json
import math

import numpy as np
import pytest

from pouchreg import pgm
from pouchreg.cli import main
from pouchreg.ffd import TransformChain, invert_chain
from pouchreg.synth import pouch_phantom

from conftest import tree_bytes, write_rotation_sequence


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("phantom")
    assert main(["phantom", "--size", "64", "--out", str(d)]) == 0
    return d


def synth(tmp, phantom_dir, name, spec, *extra):
    spec_path = tmp / f"{name}.json"
    spec_path.write_text(json.dumps(spec))
    out = tmp / name
    assert main(["synth", str(phantom_dir / "ref.pgm"), str(phantom_dir / "mask.pgm"),
                 "--spec", str(spec_path), "--out", str(out), *extra]) == 0
    return out


ZERO = {"count": 1, "elastic_max_disp": 0, "rigid_max_theta": 0, "rigid_max_trans": 0, "noise_sigma": 0}


def test_synth_zero_spec_copies_reference(tmp_path, phantom_dir):
    out = synth(tmp_path, phantom_dir, "zero", ZERO)
    ref = (out / "ref.pgm").read_bytes()
    assert (out / "000" / "s1.pgm").read_bytes() == ref
    assert (out / "000" / "s2.pgm").read_bytes() == ref


def test_synth_default_structure_and_determinism(tmp_path, phantom_dir):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        assert main(["synth", str(phantom_dir / "ref.pgm"), str(phantom_dir / "mask.pgm"),
                     "--out", str(out), "--seed", "42"]) == 0
    assert tree_bytes(a) == tree_bytes(b)
    items = sorted(p.name for p in a.iterdir() if p.is_dir())
    assert len(items) == 20 and all((a / i / "truth.json").exists() for i in items)
    assert json.loads((a / "manifest.json").read_text())["spec"]["seed"] == 42


def test_synth_invalid_spec(tmp_path, phantom_dir, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"count": 0}))
    assert main(["synth", str(phantom_dir / "ref.pgm"), str(phantom_dir / "mask.pgm"),
                 "--spec", str(bad), "--out", str(tmp_path / "x")]) != 0
    assert "bad.json" in capsys.readouterr().err


def test_eval_identity_and_oracle_transforms(tmp_path, phantom_dir):
    data = synth(tmp_path, phantom_dir, "data", {"count": 3, "seed": 1})
    ident = tmp_path / "ident"
    for name in ("000", "001", "002"):
        (ident / name).mkdir(parents=True)
        (ident / name / "transform.json").write_text(TransformChain().to_json())
    assert main(["eval", str(data), str(ident)]) == 0
    table = read_csv(ident / "eval_table.csv")[0]
    assert table["rmse_mean"] == table["baseline_mean"]

    rigid_only = synth(tmp_path, phantom_dir, "rigid", {"count": 2, "seed": 2, "elastic_max_disp": 0})
    oracle = tmp_path / "oracle"
    ref = pgm.read_image(rigid_only / "ref.pgm")
    for name in ("000", "001"):
        truth = TransformChain.from_json((rigid_only / name / "truth.json").read_text())
        (oracle / name).mkdir(parents=True)
        (oracle / name / "transform.json").write_text(invert_chain(truth, ref.shape).to_json())
    assert main(["eval", str(rigid_only), str(oracle)]) == 0
    assert float(read_csv(oracle / "eval_table.csv")[0]["rmse_mean"]) <= 0.05

    zero = synth(tmp_path, phantom_dir, "zero", dict(ZERO, count=2))
    zres = tmp_path / "zres"
    for name in ("000", "001"):
        truth = TransformChain.from_json((zero / name / "truth.json").read_text())
        (zres / name).mkdir(parents=True)
        (zres / name / "transform.json").write_text(invert_chain(truth, ref.shape).to_json())
    assert main(["eval", str(zero), str(zres)]) == 0
    assert float(read_csv(zres / "eval_table.csv")[0]["rmse_mean"]) <= 0.01


def test_eval_mismatch_fails(tmp_path, phantom_dir, capsys):
    data = synth(tmp_path, phantom_dir, "data", {"count": 2})
    res = tmp_path / "res"
    (res / "000").mkdir(parents=True)
    (res / "000" / "transform.json").write_text(TransformChain().to_json())
    assert main(["eval", str(data), str(res)]) != 0
    assert "001" in capsys.readouterr().err
    (res / "001").mkdir()
    (res / "001" / "transform.json").write_text(TransformChain().to_json())
    (res / "007").mkdir()
    assert main(["eval", str(data), str(res)]) != 0


def test_register_and_eval_dataset(tmp_path, phantom_dir):
    data = synth(tmp_path, phantom_dir, "data", {"count": 2, "seed": 8})
    res = tmp_path / "res"
    assert main(["register", str(data), "--out", str(res), "--jobs", "2"]) == 0
    assert sorted(p.name for p in res.iterdir()) == ["000", "001"]
    assert main(["eval", str(data), str(res)]) == 0
    row = read_csv(res / "eval_table.csv")[0]
    assert float(row["rmse_mean"]) <= 0.5 * float(row["baseline_mean"])


@pytest.fixture(scope="module")
def small_pouch():
    return pouch_phantom(64, 1)


def test_register_identical_frames(tmp_path, small_pouch):
    img, mask = small_pouch
    write_rotation_sequence(tmp_path / "seq", tmp_path / "masks", img, mask, [0, 0, 0])
    out = tmp_path / "out"
    assert main(["register", str(tmp_path / "seq"), str(tmp_path / "masks"), "--out", str(out)]) == 0
    rows = read_csv(out / "metrics.csv")
    hd = [float(r["value"]) for r in rows if r["metric"] == "hd"]
    assert len(hd) == 2 and max(hd) <= 1.0
    for r in rows:
        if r["metric"] != "hd":
            assert abs(float(r["value"])) < 0.1
    for sub in ("transforms", "registered", "annotations", "overlays", "logs"):
        assert len(list((out / sub).iterdir())) == 2
    assert read_csv(out / "annotations" / "f001.csv")[0].keys() == {"index", "x", "y"}


def test_register_warm_start_chain_to_170_degrees(tmp_path, small_pouch):
    img, mask = small_pouch
    degrees = list(range(0, 171, 10))
    write_rotation_sequence(tmp_path / "seq", tmp_path / "masks", img, mask, degrees)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"nonrigid": {"max_iters": 5, "levels": 1}, "pipeline": {"write_overlays": False}}))
    out = tmp_path / "out"
    assert main(["register", str(tmp_path / "seq"), str(tmp_path / "masks"), "--out", str(out),
                 "--config", str(cfg)]) == 0
    final = TransformChain.from_json((out / "transforms" / "f017.json").read_text())
    err = math.degrees(math.remainder(final.rigid.theta - math.radians(170), 2 * math.pi))
    assert abs(err) < 5.0


def test_register_resume_and_idempotence(tmp_path, small_pouch):
    img, mask = small_pouch
    write_rotation_sequence(tmp_path / "seq", tmp_path / "masks", img, mask, [0, 5, 10, 15])
    args = ["register", str(tmp_path / "seq"), str(tmp_path / "masks"), "--out"]
    full = tmp_path / "full"
    assert main(args + [str(full)]) == 0
    first = tree_bytes(full)
    assert main(args + [str(full)]) == 0
    assert tree_bytes(full) == first

    # simulate an interruption after the first registered frame
    part = tmp_path / "part"
    assert main(args + [str(part)]) == 0
    state = json.loads((part / "state.json").read_text())
    state["completed"] = state["completed"][:1]
    (part / "state.json").write_text(json.dumps(state, indent=1) + "\n")
    for stem in ("f002", "f003"):
        (part / "transforms" / f"{stem}.json").unlink()
    assert main(args + [str(part)]) == 0
    assert tree_bytes(part) == first


def test_register_reference_mask_only(tmp_path, small_pouch):
    img, mask = small_pouch
    write_rotation_sequence(tmp_path / "seq", None, img, mask, [0, 6, 12])
    (tmp_path / "masks").mkdir()
    pgm.write_mask(tmp_path / "masks" / "f000.pgm", mask)
    out = tmp_path / "out"
    assert main(["register", str(tmp_path / "seq"), str(tmp_path / "masks"), "--out", str(out)]) == 0
    final = TransformChain.from_json((out / "transforms" / "f002.json").read_text())
    assert math.degrees(final.rigid.theta) == pytest.approx(12, abs=2.0)
    assert not list((out / "annotations").iterdir())


def test_register_parent_of_movies_with_jobs(tmp_path, small_pouch):
    img, mask = small_pouch
    for movie, degs in (("m1", [0, 4]), ("m2", [0, -4])):
        write_rotation_sequence(tmp_path / "seqs" / movie, tmp_path / "masks" / movie, img, mask, degs)
    base = ["register", str(tmp_path / "seqs"), str(tmp_path / "masks"), "--out"]
    assert main(base + [str(tmp_path / "o1")]) == 0
    assert main(base + [str(tmp_path / "o2"), "--jobs", "2"]) == 0
    assert tree_bytes(tmp_path / "o1") == tree_bytes(tmp_path / "o2")
    assert (tmp_path / "o1" / "m2" / "metrics.csv").exists()


def test_register_diagnostics_name_the_file(tmp_path, small_pouch, capsys):
    img, mask = small_pouch
    write_rotation_sequence(tmp_path / "seq", tmp_path / "masks", img, mask, [0, 3, 6])
    (tmp_path / "masks" / "f001.pgm").unlink()
    out = tmp_path / "out"
    assert main(["register", str(tmp_path / "seq"), str(tmp_path / "masks"), "--out", str(out)]) != 0
    assert "f001.pgm" in capsys.readouterr().err

    pgm.write_mask(tmp_path / "masks" / "f001.pgm", np.zeros_like(mask))
    assert main(["register", str(tmp_path / "seq"), str(tmp_path / "masks"), "--out", str(out)]) != 0
    assert "f001.pgm" in capsys.readouterr().err

    (tmp_path / "seq" / "f002.pgm").write_bytes(b"P5\n1 1\n")
    pgm.write_mask(tmp_path / "masks" / "f001.pgm", mask)
    assert main(["register", str(tmp_path / "seq"), str(tmp_path / "masks"), "--out", str(out)]) != 0
    assert "f002.pgm" in capsys.readouterr().err


def test_register_with_refine_flag(tmp_path, small_pouch):
    img, mask = small_pouch
    write_rotation_sequence(tmp_path / "seq", tmp_path / "masks", img, mask, [0, 5])
    out = tmp_path / "out"
    assert main(["register", str(tmp_path / "seq"), str(tmp_path / "masks"), "--out", str(out), "--refine"]) == 0
    assert (out / "transforms" / "f001.json").exists()


def test_refine_command(tmp_path, phantom_dir):
    out = tmp_path / "r"
    assert main(["refine", str(phantom_dir / "ref.pgm"), str(phantom_dir / "mask.pgm"), "--out", str(out)]) == 0
    rows = read_csv(out / "polygon.csv")
    assert len(rows) == 360 and rows[0].keys() == {"theta_index", "x", "y"}
    assert pgm.read_mask(out / "refined_mask.pgm").any()

    empty = tmp_path / "empty.pgm"
    pgm.write_mask(empty, np.zeros((64, 64), bool))
    assert main(["refine", str(phantom_dir / "ref.pgm"), str(empty), "--out", str(out)]) != 0


def test_metrics_command(tmp_path, phantom_dir, capsys):
    out = tmp_path / "m.csv"
    m = str(phantom_dir / "mask.pgm")
    assert main(["metrics", m, m, "--out", str(out)]) == 0
    rows = {(r["frame"], r["metric"]): float(r["value"]) for r in read_csv(out)}
    assert rows[("mask.pgm", "iou")] == 1.0 and rows[("mask.pgm", "hd")] == 0.0
    assert main(["metrics", m, str(tmp_path)]) != 0


def test_bad_config_rejected(tmp_path, phantom_dir, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"nonrigid": {"levelz": 2}}))
    assert main(["phantom", "--out", str(tmp_path / "p"), "--config", str(cfg)]) != 0
    cfg.write_text(json.dumps({"extra": {}}))
    assert main(["phantom", "--out", str(tmp_path / "p"), "--config", str(cfg)]) != 0
    assert "extra" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "pouchreg", "phantom", "--size", "32", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "ref.pgm").exists()
