"""Acceptance gate: one test per criterion, one printed verdict line each.

Each test prints ``criterion N (<name>): PASS|FAIL in <t>s`` so the gate
can be read off a plain pytest -s run. Runtime budgets are asserted along
with the numeric conditions.
"""

import time

import numpy as np

from meshflow.fields import VectorField, clip_field, sample_trilinear
from meshflow.fit import FitConfig, fit_flow, fit_linear
from meshflow.integrate import IntegrationConfig, integrate, rk4_step
from meshflow.losses import (
    LossReport,
    LossWeights,
    chamfer_l1,
    normal_consistency,
    volume_loss,
)
from meshflow.mesh import LinearTransform, TriangleMesh, apply_linear_transform
from meshflow.primitives import concentric_shell, icosphere
from meshflow.quality import (
    detect_self_intersections,
    dice_jaccard,
    shell_thickness,
    surface_distances,
    voxelize,
)

CENTER = np.array([0.5, 0.5, 0.5])


def _verdict(num, name, ok, t0, budget):
    elapsed = time.time() - t0
    print(f"criterion {num} ({name}): {'PASS' if ok else 'FAIL'} "
          f"in {elapsed:.1f}s")
    assert ok, f"criterion {num} ({name}) failed"
    assert elapsed < budget, f"criterion {num} over budget: {elapsed:.1f}s"


def test_criterion_01_volume_loss_analytic():
    t0 = time.time()
    ok = True
    cfg = IntegrationConfig()  # defaults: 30 steps of dt 1, total time 30
    T = cfg.n_steps * cfg.dt
    for k in (0.1, 0.2, 0.4):
        for sign in (1.0, -1.0):
            # expanding trajectories grow by e^{kT}; start near the center
            # so both signs stay inside the sampling hull
            radius = 1e-7 if sign > 0 else 0.3
            mesh = icosphere(radius, CENTER, 1)
            f = VectorField.from_function(
                lambda p: sign * k * (p - CENTER), (32, 32, 32)
            )
            trace = integrate(mesh, f, cfg)
            expect = np.exp(-sign * 3.0 * k * T)
            ok = ok and abs(volume_loss(trace) - expect) / expect < 1e-5
    _verdict(1, "volume-loss analytic agreement", ok, t0, 5.0)


def test_criterion_02_geometric_volume_oracle():
    t0 = time.time()
    base = np.array([
        [0.5, 0.5, 0.5], [0.52, 0.5, 0.5], [0.5, 0.52, 0.5], [0.5, 0.5, 0.52],
    ])
    tet = TriangleMesh(base, [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    A = np.array([[0.1, 0.05, 0.0], [0.0, -0.2, 0.03], [0.02, 0.0, 0.07]])
    f = VectorField.from_function(lambda p: (p - CENTER) @ A.T, (32, 32, 32))
    cfg = IntegrationConfig(n_steps=30, dt=1.0 / 30.0)
    trace = integrate(tet, f, cfg)

    def vol(v):
        return abs(np.linalg.det(v[1:] - v[0])) / 6.0

    actual = vol(trace.initial_positions) / vol(trace.final_positions)
    ok = np.abs(np.exp(-trace.div_integral) - actual).max() < 1e-5
    _verdict(2, "tetrahedron geometric volume oracle", ok, t0, 1.0)


def test_criterion_03_rk4_order():
    t0 = time.time()
    errs = []
    ns = [8, 16, 32, 64]
    for n in ns:
        x = np.array([[0.1, 0.0, 0.0]])
        for _ in range(n):
            x = rk4_step(lambda p: p, x, 1.0 / n)
        errs.append(abs(x[0, 0] - 0.1 * np.e))
    slope = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    _verdict(3, "RK4 global order slope >= 3.8", slope >= 3.8, t0, 1.0)


def test_criterion_04_clip_invariant():
    t0 = time.time()
    rng = np.random.default_rng(104)
    alpha = 0.0075
    field = clip_field(VectorField(rng.normal(0, 0.02, (24, 24, 24, 3))), alpha)
    pts = rng.uniform(1.0 / 48.0, 1.0 - 1.0 / 48.0, (100_000, 3))
    norms = np.linalg.norm(sample_trilinear(field, pts), axis=1)
    ok = norms.max() <= alpha + 1e-12
    ok = ok and np.array_equal(clip_field(field, alpha).data, field.data)
    _verdict(4, "clip bound and idempotence", ok, t0, 5.0)


def test_criterion_05_zero_sif_proxy():
    t0 = time.time()
    from scipy.ndimage import gaussian_filter

    mesh = icosphere(0.25, CENTER, 5)  # 20480 faces
    assert mesh.n_faces == 20480
    rng = np.random.default_rng(105)
    ok = True
    for _ in range(20):
        raw = rng.normal(0, 1.0, (16, 16, 16, 3))
        for c in range(3):
            raw[..., c] = gaussian_filter(raw[..., c], sigma=2.0, mode="nearest")
        raw *= 0.01 / np.abs(raw).max()
        field = clip_field(VectorField(raw), 0.0075)
        trace = integrate(
            mesh, field, IntegrationConfig(accumulate_divergence=False)
        )
        moved = mesh.with_vertices(trace.final_positions)
        ok = ok and len(detect_self_intersections(moved).sif_faces) == 0
    _verdict(5, "smooth clipped fields keep SIF = 0", ok, t0, 120.0)


def _split_shell(mesh, n_outer_faces):
    def compact(faces):
        vids = np.unique(faces)
        remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
        remap[vids] = np.arange(len(vids))
        return TriangleMesh(mesh.vertices[vids], remap[faces])

    return compact(mesh.faces[n_outer_faces:]), compact(mesh.faces[:n_outer_faces])


def _shell_fit(volume_weight):
    template = concentric_shell(0.24, 0.25, CENTER, 4, label="shell")
    # the target sphere's tessellation is rotated so no template vertex
    # coincides with a target vertex (coincidence pins the L1 chamfer at
    # a nonsmooth minimum and stalls the descent)
    target = apply_linear_transform(
        icosphere(0.28, CENTER, 4, label="shell"),
        LinearTransform(rotation=(0.3, 0.2, 0.1)),
    )
    cfg = FitConfig(
        weights=LossWeights(volume=volume_weight),
        field_dims=(48, 48, 48),
        lr_flow=0.01,
        max_iters_flow=150,
        max_iters_linear=100,
        integration=IntegrationConfig(n_steps=30, dt=0.1),
    )
    lin = fit_linear(template, target, cfg)
    res = fit_flow(template, target, lin, cfg)
    deformed = template.with_vertices(res.trace.final_positions)
    inner, outer = _split_shell(deformed, template.n_faces // 2)
    tmin, _ = shell_thickness(inner, outer)
    report = detect_self_intersections(deformed)
    return tmin, report


def test_criterion_06_thin_shell_contrast():
    t0 = time.time()
    t_init = 0.01  # concentric radii 0.24 / 0.25

    t1 = time.time()
    tmin_vol, sif_vol = _shell_fit(LossWeights().volume)
    fit1 = time.time() - t1
    t2 = time.time()
    tmin_zero, sif_zero = _shell_fit(0.0)
    fit2 = time.time() - t2

    preserved = tmin_vol >= 0.2 * t_init and len(sif_vol.sif_faces) == 0
    interpen = any(kind == "interpenetration" for _, _, kind in sif_zero.pairs)
    collapsed = tmin_zero < 0.05 * t_init or interpen
    print(f"  volume arm: tmin={tmin_vol:.5f} sif={len(sif_vol.sif_faces)} "
          f"({fit1:.0f}s); zero arm: tmin={tmin_zero:.5f} "
          f"sif={len(sif_zero.sif_faces)} ({fit2:.0f}s)")
    ok = preserved and collapsed and fit1 < 600.0 and fit2 < 600.0
    _verdict(6, "thin-shell collapse contrast", ok, t0, 1200.0)


def _tiny_closed_mesh(rng):
    v = np.array([
        [0.5, 0.5, 0.7], [0.4, 0.4, 0.5], [0.6, 0.4, 0.5],
        [0.6, 0.6, 0.5], [0.4, 0.6, 0.5], [0.5, 0.5, 0.3],
        [0.45, 0.45, 0.62], [0.55, 0.45, 0.62], [0.55, 0.55, 0.62],
        [0.45, 0.55, 0.62],
    ]) + rng.normal(0, 0.01, (10, 3))
    return TriangleMesh(v, np.array([
        [0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1],
        [5, 2, 1], [5, 3, 2], [5, 4, 3], [5, 1, 4],
        [6, 7, 9], [7, 8, 9],
    ]))


def test_criterion_07_gradient_correctness():
    t0 = time.time()
    from meshflow.fit import _flow_loss_and_grad

    rng = np.random.default_rng(107)
    ok = True
    # 20 trials split between the geometric terms (tol 1e-4) and the
    # volume term (tol 1e-3); central differences on 40 sampled voxels
    for trial in range(20):
        volume_trial = trial >= 14
        if volume_trial:
            w = LossWeights(chamfer=0, chamfer_normal=0, volume=1,
                            edge=0, face_normal=0, laplacian=0)
            tol = 1e-3
        else:
            w = LossWeights(volume=0)
            tol = 1e-4
        cfg = FitConfig(
            weights=w, field_dims=(8, 8, 8),
            integration=IntegrationConfig(n_steps=4, dt=0.25),
            volume_grad_clip=None,
        )
        mesh = _tiny_closed_mesh(rng)
        target = _tiny_closed_mesh(rng)
        raw = rng.normal(0, 0.003, (8, 8, 8, 3))
        _, grad, _ = _flow_loss_and_grad(mesh, target, VectorField(raw), cfg)
        grad = np.asarray(grad).reshape(-1)
        flat = raw.reshape(-1)
        idx = rng.choice(flat.size, 40, replace=False)
        fd = np.zeros(40)
        h = 1e-6
        for j, i in enumerate(idx):
            for sgn in (1.0, -1.0):
                bumped = flat.copy()
                bumped[i] += sgn * h
                r, _, _ = _flow_loss_and_grad(
                    mesh, target, VectorField(bumped.reshape(8, 8, 8, 3)),
                    cfg, want_grad=False,
                )
                fd[j] += sgn * r.total / (2.0 * h)
        scale = max(np.abs(fd).max(), 1e-12)
        ok = ok and np.abs(grad[idx] - fd).max() / scale < tol
    _verdict(7, "adjoint vs finite differences", ok, t0, 120.0)


def test_criterion_08_affine_recovery():
    t0 = time.time()
    sphere = icosphere(0.25, CENTER, 2)
    cfg = FitConfig(max_iters_linear=120, field_dims=(32, 32, 32),
                    integration=IntegrationConfig(n_steps=10))
    rng = np.random.default_rng(108)
    ok = True
    for _ in range(10):
        truth = LinearTransform(
            scale=rng.uniform(0.85, 1.25, 3),
            translation=rng.uniform(-0.04, 0.04, 3),
        )
        target = apply_linear_transform(sphere, truth)
        t = fit_linear(sphere, target, cfg)
        ok = ok and np.abs(t.translation - truth.translation).max() < 2e-3
        ok = ok and np.abs(t.scale / truth.scale - 1.0).max() < 0.02
    _verdict(8, "affine recovery", ok, t0, 120.0)


def test_criterion_09_sif_detector_oracle():
    t0 = time.time()
    rng = np.random.default_rng(109)
    ok = True
    for trial in range(50):
        base = icosphere(0.25, CENTER, 3 if trial % 5 == 0 else 2)
        assert base.n_faces <= 2000
        jitter = rng.uniform(0.0, 0.06)
        m = base.with_vertices(
            base.vertices + rng.normal(0, jitter, base.vertices.shape)
        )
        fast = detect_self_intersections(m)
        brute = detect_self_intersections(m, brute_force=True)
        ok = ok and fast.sif_faces == brute.sif_faces
        ok = ok and fast.pairs == brute.pairs

    crossing = TriangleMesh(np.array([
        [0.2, 0.2, 0.5], [0.8, 0.2, 0.5], [0.5, 0.8, 0.5],
        [0.4, 0.3, 0.2], [0.6, 0.3, 0.2], [0.5, 0.45, 0.9],
    ]), [[0, 1, 2], [3, 4, 5]])
    ok = ok and detect_self_intersections(crossing).pairs == (
        (0, 1, "interpenetration"),
    )
    fold = TriangleMesh(np.array([
        [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 1.0, 0.0], [0.5, 0.6, 0.0],
    ]), [[0, 1, 2], [1, 0, 3]])
    ok = ok and detect_self_intersections(fold).pairs == ((0, 1, "inversion"),)
    _verdict(9, "SIF detector vs brute force", ok, t0, 120.0)


def test_criterion_10_metric_identities():
    t0 = time.time()
    rng = np.random.default_rng(110)
    ok = True
    from meshflow.fields import ScalarField

    for _ in range(20):
        a = ScalarField((rng.uniform(0, 1, (8, 8, 8)) > 0.5).astype(float))
        b = ScalarField((rng.uniform(0, 1, (8, 8, 8)) > 0.5).astype(float))
        dice, jac = dice_jaccard(a, b)
        ok = ok and abs(jac - dice / (2.0 - dice)) < 1e-12

    seg = voxelize(icosphere(0.25, CENTER, 2), (32, 32, 32))
    dice, jac = dice_jaccard(seg, seg)
    ok = ok and dice == 1.0 and jac == 1.0

    k, spacing = 4, 0.75
    a = np.zeros((32, 32, 32))
    b = np.zeros((32, 32, 32))
    a[8:16, 8:16, 8:16] = 1.0
    b[8 + k:16 + k, 8:16, 8:16] = 1.0
    _, hd = surface_distances(ScalarField(a), ScalarField(b), spacing)
    ok = ok and hd == k * spacing
    _verdict(10, "segmentation metric identities", ok, t0, 30.0)


def test_criterion_11_loss_unit_examples():
    t0 = time.time()
    ok = abs(chamfer_l1(np.array([[0.0, 0.0, 0.0]]),
                        np.array([[1.0, 0.0, 0.0]])) - 2.0) < 1e-12
    ok = ok and abs(chamfer_l1(
        np.array([[0.0, 0.0, 0.0]]),
        np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]),
    ) - 2.5) < 1e-12

    # identical point sets with opposed normals: every cosine is -1
    p = np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]])
    n = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    ok = ok and abs(normal_consistency(p, n, p, -n) - 2.0) < 1e-12

    report = LossReport(
        chamfer=1.0, chamfer_normal=1.0, volume=1.0, edge=1.0,
        face_normal=1.0, laplacian=1.0, weights=LossWeights(),
        per_structure_chamfer={},
    )
    ok = ok and abs(report.total - 82.205) < 1e-12
    _verdict(11, "loss-term unit examples", ok, t0, 1.0)
