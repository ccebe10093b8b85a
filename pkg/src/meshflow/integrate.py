"""Explicit RK4 advection of mesh vertices along a stationary flow field.

The divergence integral that drives the volume regularizer is accumulated
simultaneously with the position update, using the same (1, 2, 2, 1)/6
stage weights so the accumulator carries the integrator's order. The
local volume ratio of an advected neighborhood is then
``exp(-div_integral)`` per vertex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ParameterError, StateError
from .fields import (
    VectorField,
    divergence_at,
    sample_trilinear,
    velocity_gradient_at,
)

_RK4_WEIGHTS = (1.0, 2.0, 2.0, 1.0)


@dataclass(frozen=True)
class IntegrationConfig:
    """Settings for vertex advection.

    With a field clipped at alpha, no vertex can travel farther than
    ``alpha * dt`` in one step, the CFL-style bound behind the clipping.
    """

    n_steps: int = 30
    dt: float = 1.0
    accumulate_divergence: bool = True
    accumulate_area_rate: bool = False
    keep_stage_points: bool = False

    def __post_init__(self):
        if self.n_steps < 1:
            raise ParameterError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.dt <= 0:
            raise ParameterError(f"dt must be positive, got {self.dt}")

    @property
    def total_time(self):
        return self.n_steps * self.dt


class DeformationTrace:
    """Per-vertex trajectory summary produced by :func:`integrate`.

    Attributes
    ----------
    positions : (n_steps + 1, n, 3) array
        Vertex positions at every step boundary (kept for the adjoint).
    div_integral : (n,) array or None
        Accumulated integral of div(v) along each trajectory.
    area_rate_integral : (n,) array or None
        Accumulated integral of div(v) - n^T grad(v) n along each
        trajectory, i.e. log of the local area stretch.
    step_max_displacement : (n_steps,) array
        Largest single-vertex displacement in each step (diagnostics).
    stage_points : list of (4, n, 3) arrays or None
        The four RK4 stage points of every step, kept only when
        ``config.keep_stage_points`` is set so the adjoint sweep can skip
        recomputing them.
    """

    def __init__(self, positions, div_integral, area_rate_integral,
                 step_max_displacement, config, stage_points=None):
        self.positions = positions
        self.div_integral = div_integral
        self.area_rate_integral = area_rate_integral
        self.step_max_displacement = step_max_displacement
        self.config = config
        self.stage_points = stage_points

    @property
    def initial_positions(self):
        return self.positions[0]

    @property
    def final_positions(self):
        return self.positions[-1]


def _evaluate(field, points):
    if isinstance(field, VectorField):
        return sample_trilinear(field, points)
    return np.asarray(field(points))


def rk4_stage_points(field, x, dt):
    """Stage points and stage velocities of one classical RK4 step."""
    p1 = x
    k1 = _evaluate(field, p1)
    p2 = x + 0.5 * dt * k1
    k2 = _evaluate(field, p2)
    p3 = x + 0.5 * dt * k2
    k3 = _evaluate(field, p3)
    p4 = x + dt * k3
    k4 = _evaluate(field, p4)
    return (p1, p2, p3, p4), (k1, k2, k3, k4)


def rk4_step(field, x, dt):
    """One classical RK4 update of ``x`` under a stationary field.

    ``field`` may be a VectorField (sampled trilinearly) or any callable
    mapping (..., 3) positions to (..., 3) velocities, which lets tests
    inject analytic fields.
    """
    if dt <= 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=np.float64)
    _, (k1, k2, k3, k4) = rk4_stage_points(field, x, dt)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(mesh, field, config=IntegrationConfig(), vertex_subset=None):
    """Advect all mesh vertices ``config.n_steps`` RK4 steps along ``field``.

    The divergence (and optionally area-rate) integrals are accumulated at
    the four position-stage points with the RK4 quadrature weights. When
    ``vertex_subset`` is given, only those vertices are advected and
    accounted.
    """
    x = np.array(mesh.vertices if vertex_subset is None else mesh.vertices[vertex_subset])
    normals = None
    if config.accumulate_area_rate:
        normals = mesh.vertex_normals()
        if vertex_subset is not None:
            normals = normals[vertex_subset]
        normals = np.array(normals)

    n = len(x)
    dt = config.dt
    positions = np.empty((config.n_steps + 1, n, 3))
    positions[0] = x
    div_int = np.zeros(n) if config.accumulate_divergence else None
    area_int = np.zeros(n) if config.accumulate_area_rate else None
    step_max = np.empty(config.n_steps)
    kept = [] if config.keep_stage_points else None

    for step in range(config.n_steps):
        pts, ks = rk4_stage_points(field, x, dt)
        if kept is not None:
            kept.append(np.stack(pts))
        if div_int is not None:
            divs = divergence_at(field, np.stack(pts))  # all four stages at once
            div_int += (dt / 6.0) * (divs[0] + 2.0 * divs[1] + 2.0 * divs[2] + divs[3])
        if area_int is not None:
            normals = _advance_area_rate(field, pts, normals, dt, area_int)
        x = x + (dt / 6.0) * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3])
        if not np.isfinite(x).all():
            bad = int(np.nonzero(~np.isfinite(x).all(axis=1))[0][0])
            raise NumericalError(
                f"non-finite position for vertex {bad} at step {step}"
            )
        positions[step + 1] = x
        step_max[step] = float(np.linalg.norm(x - positions[step], axis=1).max(initial=0.0))

    return DeformationTrace(positions, div_int, area_int, step_max, config,
                            stage_points=kept)


def _advance_area_rate(field, stage_points, normals, dt, area_int):
    """RK4 update of the advected unit normal and the log-area integral.

    Uses the surface-element kinematics: the unit normal evolves as
    ``dn/dt = -(grad v)^T n + (n^T grad v n) n`` and the log-area rate is
    ``div(v) - n^T grad(v) n``.
    """
    def rates(p, nrm):
        grad = velocity_gradient_at(field, p)
        div = divergence_at(field, p)
        gn = np.einsum("nij,ni->nj", grad, nrm)  # (grad v)^T n
        stretch = np.einsum("ni,ni->n", gn, nrm)  # n^T grad v n
        dn = -gn + stretch[:, None] * nrm
        return dn, div - stretch

    n1 = normals
    dn1, a1 = rates(stage_points[0], n1)
    n2 = n1 + 0.5 * dt * dn1
    dn2, a2 = rates(stage_points[1], n2)
    n3 = n1 + 0.5 * dt * dn2
    dn3, a3 = rates(stage_points[2], n3)
    n4 = n1 + dt * dn3
    dn4, a4 = rates(stage_points[3], n4)
    area_int += (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    out = n1 + (dt / 6.0) * (dn1 + 2.0 * dn2 + 2.0 * dn3 + dn4)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def volume_ratio(trace):
    """Local initial-to-final volume ratio ``exp(-div_integral)`` per vertex.

    Values above 1 indicate local contraction (collapse risk), values in
    (0, 1) expansion.
    """
    if trace.div_integral is None:
        raise StateError("trace has no divergence integral; enable accumulate_divergence")
    return np.exp(-trace.div_integral)


def area_rate(field, x, normal):
    """Instantaneous per-unit-area rate of change of a surface element.

    Computes ``div(v) - n^T grad(v) n`` with the central-difference
    stencil; ``normal`` must be unit length.
    """
    x = np.asarray(x, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ParameterError(f"normal must be unit length, |n| = {np.linalg.norm(n)}")
    grad = velocity_gradient_at(field, x)
    return float(divergence_at(field, x) - n @ grad @ n)
