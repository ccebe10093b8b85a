"""Command-line interface: exit codes, outputs, manifests."""

import json

import numpy as np
import pytest

from meshflow.cli import main
from meshflow.fields import load_grid, save_grid, unsigned_distance_map
from meshflow.mesh import TriangleMesh
from meshflow.meshio import load_mesh, save_mesh
from meshflow.primitives import ellipsoid, icosphere

CENTER = (0.5, 0.5, 0.5)

FAST_CFG = {
    "max_iters_linear": 60,
    "max_iters_flow": 30,
    "lr_flow": 0.5,
    "field_dims": [32, 32, 32],
    "integration": {"n_steps": 10},
}


@pytest.fixture()
def sphere_file(tmp_path, sphere2):
    p = tmp_path / "sphere.obj"
    save_mesh(sphere2, p)
    return p


@pytest.fixture()
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(FAST_CFG))
    return p


def test_fit_template_equals_target(tmp_path, sphere_file, cfg_file, sphere2):
    out = tmp_path / "out"
    code = main(["fit", str(sphere_file), str(sphere_file),
                 "--config", str(cfg_file), "--out-dir", str(out)])
    assert code == 0
    deformed = load_mesh(out / "deformed.ply")
    assert np.abs(deformed.vertices - sphere2.vertices).max() < 1e-6
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "fit"
    assert str(sphere_file) in manifest["inputs"]
    assert len(manifest["inputs"][str(sphere_file)]) == 64  # sha256 hex
    history = json.loads((out / "loss_history.json").read_text())
    assert history["schema_version"] == 1


def test_fit_sphere_to_ellipsoid(tmp_path, sphere_file, cfg_file):
    target = tmp_path / "ellip.obj"
    save_mesh(ellipsoid((0.27, 0.24, 0.26), CENTER, 2), target)
    out = tmp_path / "out"
    code = main(["fit", str(sphere_file), str(target),
                 "--config", str(cfg_file), "--out-dir", str(out)])
    assert code == 0
    # the deformed mesh passes the SIF gate
    chk = tmp_path / "chk"
    assert main(["check", str(out / "deformed.ply"), "--out-dir", str(chk)]) == 0
    report = json.loads((chk / "sif_report.json").read_text())
    assert report["sif_faces"] == []


def test_fit_missing_target(tmp_path, sphere_file, cfg_file, capsys):
    code = main(["fit", str(sphere_file), str(tmp_path / "absent.obj"),
                 "--config", str(cfg_file), "--out-dir", str(tmp_path / "o")])
    assert code == 1
    assert "absent.obj" in capsys.readouterr().err


def test_deform_identity(tmp_path, sphere_file, sphere2):
    lin = tmp_path / "lin.json"
    lin.write_text(json.dumps({
        "scale": [1, 1, 1], "rotation": [0, 0, 0], "translation": [0, 0, 0],
    }))
    field = tmp_path / "field.bin"
    from meshflow.fields import VectorField

    save_grid(VectorField.zeros((8, 8, 8)), field)
    out_mesh = tmp_path / "out.ply"
    code = main(["deform", str(sphere_file), str(lin), str(field),
                 str(out_mesh), "--out-dir", str(tmp_path / "o")])
    assert code == 0
    assert np.abs(load_mesh(out_mesh).vertices - sphere2.vertices).max() < 1e-12


def test_deform_corrupt_field(tmp_path, sphere_file):
    lin = tmp_path / "lin.json"
    lin.write_text(json.dumps({
        "scale": [1, 1, 1], "rotation": [0, 0, 0], "translation": [0, 0, 0],
    }))
    field = tmp_path / "field.bin"
    from meshflow.fields import VectorField

    save_grid(VectorField.zeros((8, 8, 8)), field)
    field.write_bytes(field.read_bytes()[:-8])  # header dims no longer match
    code = main(["deform", str(sphere_file), str(lin), str(field),
                 str(tmp_path / "out.ply"), "--out-dir", str(tmp_path / "o")])
    assert code == 1


def test_metrics_self_dice_one(tmp_path, sphere_file):
    out = tmp_path / "m"
    code = main(["metrics", str(sphere_file), str(sphere_file),
                 "--dims", "32,32,32", "--out-dir", str(out)])
    assert code == 0
    report = json.loads((out / "metrics.json").read_text())
    assert report["union"]["dice"] == 1.0
    assert report["structures"]["default"]["dice"] == 1.0


def test_metrics_offset_spheres_hausdorff(tmp_path):
    # two spheres offset by exactly 4 voxels along x
    n, k = 32, 4
    a = icosphere(0.2, (0.5, 0.5, 0.5), 3)
    b = icosphere(0.2, (0.5 + k / n, 0.5, 0.5), 3)
    pa, pb = tmp_path / "a.obj", tmp_path / "b.obj"
    save_mesh(a, pa)
    save_mesh(b, pb)
    out = tmp_path / "m"
    spacing = 1.25
    code = main(["metrics", str(pa), str(pb), "--dims", str(n),
                 "--spacing", str(spacing), "--out-dir", str(out)])
    assert code == 0
    report = json.loads((out / "metrics.json").read_text())
    assert abs(report["union"]["hausdorff"] - k * spacing) < 1e-9


def test_metrics_label_mismatch(tmp_path, sphere_file):
    other = tmp_path / "labeled.obj"
    save_mesh(icosphere(0.25, CENTER, 2, label="LV"), other)
    code = main(["metrics", str(sphere_file), str(other),
                 "--dims", "16", "--out-dir", str(tmp_path / "m")])
    assert code == 1


def test_check_crossing_fixture(tmp_path):
    v = np.array([
        [0.2, 0.2, 0.5], [0.8, 0.2, 0.5], [0.5, 0.8, 0.5],
        [0.4, 0.3, 0.2], [0.6, 0.3, 0.2], [0.5, 0.45, 0.9],
    ])
    p = tmp_path / "crossing.obj"
    save_mesh(TriangleMesh(v, [[0, 1, 2], [3, 4, 5]]), p)
    out = tmp_path / "c"
    code = main(["check", str(p), "--out-dir", str(out)])
    assert code == 3
    report = json.loads((out / "sif_report.json").read_text())
    assert report["sif_faces"] == [0, 1]


def test_check_sphere_clean(tmp_path, sphere_file):
    assert main(["check", str(sphere_file), "--out-dir", str(tmp_path / "c")]) == 0


def test_check_unreadable(tmp_path, capsys):
    assert main(["check", str(tmp_path / "nope.obj"),
                 "--out-dir", str(tmp_path / "c")]) == 1


def test_distmap_output(tmp_path, sphere_file):
    out_file = tmp_path / "d.bin"
    code = main(["distmap", str(sphere_file), str(out_file),
                 "--dims", "16", "--out-dir", str(tmp_path / "o")])
    assert code == 0
    grid = load_grid(out_file)
    assert grid.dims == (16, 16, 16)
    # spot-check 5 voxels against a brute-force scan (float32 storage)
    ref = unsigned_distance_map(load_mesh(sphere_file), (16, 16, 16))
    rng = np.random.default_rng(40)
    for _ in range(5):
        i, j, k = rng.integers(0, 16, 3)
        assert abs(grid.data[i, j, k] - ref.data[i, j, k]) < 1e-6


def test_distmap_empty_mesh(tmp_path):
    p = tmp_path / "empty.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\n")
    code = main(["distmap", str(p), str(tmp_path / "d.bin"),
                 "--out-dir", str(tmp_path / "o")])
    assert code == 1


def test_determinism_hash_equal(tmp_path, sphere_file, cfg_file):
    import hashlib

    target = tmp_path / "t.obj"
    save_mesh(ellipsoid((0.26, 0.25, 0.27), CENTER, 2), target)
    digests = []
    for d in ("r1", "r2"):
        out = tmp_path / d
        assert main(["fit", str(sphere_file), str(target),
                     "--config", str(cfg_file), "--out-dir", str(out)]) == 0
        h = hashlib.sha256()
        h.update((out / "deformed.ply").read_bytes())
        h.update((out / "field.bin").read_bytes())
        h.update((out / "linear.json").read_bytes())
        digests.append(h.hexdigest())
    assert digests[0] == digests[1]
