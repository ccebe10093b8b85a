"""Quality audits: self-intersections, voxelization, metrics, marching cubes."""

import numpy as np
import pytest

from meshflow.errors import UndefinedMetricError, ValidationError
from meshflow.fields import ScalarField
from meshflow.mesh import TriangleMesh
from meshflow.primitives import box, icosphere
from meshflow.quality import (
    detect_self_intersections,
    dice_jaccard,
    marching_cubes,
    mesh_area,
    segmentation_metrics,
    shell_thickness,
    surface_distances,
    voxelize,
)

CENTER = (0.5, 0.5, 0.5)


def _crossing_pair():
    v = np.array([
        [0.2, 0.2, 0.5], [0.8, 0.2, 0.5], [0.5, 0.8, 0.5],
        [0.4, 0.3, 0.2], [0.6, 0.3, 0.2], [0.5, 0.45, 0.9],
    ])
    return TriangleMesh(v, [[0, 1, 2], [3, 4, 5]])


def _fold_pair():
    # coplanar edge-sharing triangles with both apexes on the same side
    v = np.array([
        [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 1.0, 0.0], [0.5, 0.6, 0.0],
    ])
    return TriangleMesh(v, [[0, 1, 2], [1, 0, 3]])


def test_convex_sphere_no_sif(sphere3):
    report = detect_self_intersections(sphere3)
    assert report.sif_faces == ()
    assert report.sif_percent == 0.0


def test_crossing_pair_interpenetration():
    report = detect_self_intersections(_crossing_pair())
    assert report.sif_faces == (0, 1)
    assert report.pairs == ((0, 1, "interpenetration"),)
    assert report.sif_percent == 100.0


def test_fold_classified_inversion():
    report = detect_self_intersections(_fold_pair())
    assert report.pairs == ((0, 1, "inversion"),)


def test_hinge_not_intersecting():
    v = np.array([
        [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 1.0, 0.0], [0.5, -1.0, 0.2],
    ])
    m = TriangleMesh(v, [[0, 1, 2], [1, 0, 3]])
    assert detect_self_intersections(m).pairs == ()


def test_shared_vertex_pierce_and_touch():
    f = np.array([[0, 1, 2], [0, 3, 4]])
    pierce = TriangleMesh(np.array([
        [0.5, 0.5, 0.5], [0.9, 0.2, 0.5], [0.9, 0.8, 0.5],
        [0.7, 0.5, 0.2], [0.75, 0.6, 0.9],
    ]), f)
    assert detect_self_intersections(pierce).pairs == ((0, 1, "inversion"),)
    touch = TriangleMesh(np.array([
        [0.5, 0.5, 0.5], [0.9, 0.2, 0.5], [0.9, 0.8, 0.5],
        [0.1, 0.5, 0.2], [0.1, 0.5, 0.9],
    ]), f)
    assert detect_self_intersections(touch).pairs == ()


def test_brute_force_agreement_randomized():
    rng = np.random.default_rng(31)
    base = icosphere(0.25, CENTER, 2)  # 320 faces
    for trial in range(50):
        jitter = rng.uniform(0.0, 0.06)
        m = base.with_vertices(base.vertices + rng.normal(0, jitter, base.vertices.shape))
        fast = detect_self_intersections(m)
        brute = detect_self_intersections(m, brute_force=True)
        assert fast.pairs == brute.pairs
        assert fast.sif_faces == brute.sif_faces


def test_predicate_symmetric():
    m = _crossing_pair()
    flipped = TriangleMesh(m.vertices, m.faces[::-1].copy())
    a = detect_self_intersections(m)
    b = detect_self_intersections(flipped)
    assert len(a.pairs) == len(b.pairs) == 1


def test_voxelize_sphere_volume(sphere3):
    seg = voxelize(sphere3, (64, 64, 64))
    frac = seg.data.mean()
    true = 4.0 / 3.0 * np.pi * 0.25**3
    assert abs(frac - true) / true < 0.02


def test_voxelize_box_exact():
    seg = voxelize(box((0.25, 0.25, 0.25), (0.75, 0.75, 0.75)), (64, 64, 64))
    assert seg.data.mean() == 0.125


def test_voxelize_outside_bbox_empty(sphere2):
    seg = voxelize(sphere2, (32, 32, 32))
    assert seg.data[:2].sum() == 0.0  # sphere occupies the middle only
    assert seg.data[:, :2].sum() == 0.0
    assert seg.data[..., :2].sum() == 0.0


def test_voxelize_face_order_invariant(sphere2):
    rng = np.random.default_rng(32)
    perm = rng.permutation(sphere2.n_faces)
    shuffled = TriangleMesh(
        sphere2.vertices, sphere2.faces[perm], sphere2.face_labels[perm]
    )
    a = voxelize(sphere2, (32, 32, 32))
    b = voxelize(shuffled, (32, 32, 32))
    assert np.array_equal(a.data, b.data)


def test_voxelize_requires_watertight():
    with pytest.raises(ValidationError, match="default"):
        voxelize(_crossing_pair(), (16, 16, 16))


def test_dice_identity(sphere2):
    seg = voxelize(sphere2, (32, 32, 32))
    dice, jac = dice_jaccard(seg, seg)
    assert dice == 1.0
    assert jac == 1.0


def test_dice_disjoint():
    a = np.zeros((8, 8, 8))
    b = np.zeros((8, 8, 8))
    a[:2] = 1.0
    b[6:] = 1.0
    dice, jac = dice_jaccard(ScalarField(a), ScalarField(b))
    assert dice == 0.0
    assert jac == 0.0


def test_dice_half_overlap():
    a = np.zeros((10, 10, 10))
    b = np.zeros((10, 10, 10))
    a.ravel()[:100] = 1.0
    b.ravel()[50:150] = 1.0
    dice, jac = dice_jaccard(ScalarField(a), ScalarField(b))
    assert abs(dice - 0.5) < 1e-15
    assert abs(jac - 1.0 / 3.0) < 1e-15


def test_dice_both_empty_undefined():
    empty = ScalarField(np.zeros((8, 8, 8)))
    with pytest.raises(UndefinedMetricError):
        dice_jaccard(empty, empty)


def test_jaccard_dice_identity_random():
    rng = np.random.default_rng(33)
    for _ in range(20):
        a = ScalarField((rng.uniform(0, 1, (8, 8, 8)) > 0.5).astype(float))
        b = ScalarField((rng.uniform(0, 1, (8, 8, 8)) > 0.5).astype(float))
        dice, jac = dice_jaccard(a, b)
        assert abs(jac - dice / (2.0 - dice)) < 1e-12


def test_surface_distances_identity(sphere2):
    seg = voxelize(sphere2, (32, 32, 32))
    assd, hd = surface_distances(seg, seg)
    assert assd == 0.0
    assert hd == 0.0


def test_surface_distances_offset_cubes():
    k, n = 4, 32
    a = np.zeros((n, n, n))
    b = np.zeros((n, n, n))
    a[8:16, 8:16, 8:16] = 1.0
    b[8 + k:16 + k, 8:16, 8:16] = 1.0
    spacing = 0.7
    assd, hd = surface_distances(ScalarField(a), ScalarField(b), spacing)
    assert abs(hd - k * spacing) < 1e-12
    assert assd <= hd


def test_assd_leq_hausdorff_random():
    rng = np.random.default_rng(34)
    for _ in range(10):
        a = np.zeros((16, 16, 16))
        b = np.zeros((16, 16, 16))
        ca, cb = rng.integers(4, 12, 3), rng.integers(4, 12, 3)
        a[ca[0] - 2:ca[0] + 2, ca[1] - 2:ca[1] + 2, ca[2] - 2:ca[2] + 2] = 1
        b[cb[0] - 3:cb[0] + 3, cb[1] - 3:cb[1] + 3, cb[2] - 3:cb[2] + 3] = 1
        assd, hd = surface_distances(ScalarField(a), ScalarField(b))
        assert assd <= hd + 1e-15


def test_marching_cubes_single_voxel():
    seg = np.zeros((8, 8, 8))
    seg[4, 4, 4] = 1.0
    mesh = marching_cubes(ScalarField(seg), smooth_iters=0)
    assert mesh.is_watertight()
    assert mesh.euler_characteristic() == 2


def test_marching_cubes_sphere_area(sphere3):
    seg = voxelize(sphere3, (64, 64, 64))
    mesh = marching_cubes(seg)
    assert mesh.is_watertight()
    area = mesh_area(mesh)
    true = 4.0 * np.pi * 0.25**2
    assert abs(area - true) / true < 0.05
    assert detect_self_intersections(mesh).sif_faces == ()


def test_marching_cubes_roundtrip_dice(sphere3):
    seg = voxelize(sphere3, (64, 64, 64))
    mesh = marching_cubes(seg)
    seg2 = voxelize(mesh, (64, 64, 64))
    dice, _ = dice_jaccard(seg, seg2)
    assert dice > 0.98


def test_marching_cubes_empty_is_flagged():
    mesh = marching_cubes(ScalarField(np.zeros((8, 8, 8))))
    assert mesh.n_faces == 0


def test_shell_thickness_concentric():
    inner = icosphere(0.24, CENTER, 3)
    outer = icosphere(0.25, CENTER, 3)
    tmin, tmean = shell_thickness(inner, outer)
    assert abs(tmean - 0.01) < 0.002
    assert abs(tmin - 0.01) < 0.002


def test_shell_thickness_identical(sphere2):
    tmin, tmean = shell_thickness(sphere2, sphere2)
    assert tmin == 0.0
    assert tmean == 0.0


def test_shell_thickness_collapse_detectable(sphere2):
    tmin, _ = shell_thickness(sphere2, sphere2)
    assert tmin < 1e-4


def test_segmentation_metrics_bundle(sphere2, sphere3):
    a = voxelize(sphere2, (32, 32, 32))
    b = voxelize(icosphere(0.27, CENTER, 2), (32, 32, 32))
    m = segmentation_metrics(a, b, spacing=1.0 / 32.0)
    assert 0.0 < m.dice < 1.0
    assert abs(m.jaccard - m.dice / (2 - m.dice)) < 1e-12
    assert m.assd <= m.hausdorff
