"""Per-case optimization of the two-stage deformation pipeline.

Stage 1 fits the 9 linear parameters (scale, rotation, translation) by
descending the per-structure L1 chamfer distance with a backtracking line
search. Stage 2 fits the voxel flow field by momentum descent on the full
weighted objective, with gradients carried through the RK4 integration by
a hand-derived discrete adjoint: loss terms -> final vertex positions ->
RK4 stage points -> trilinear samples -> voxel values. The raw field is
the optimization variable; the magnitude clip is applied inside the
forward pass so gradients flow through it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .errors import OptimizationError, ParameterError
from .fields import (
    VectorField,
    clip_field,
    clip_field_adjoint,
    divergence_adjoint_with_jacobian,
    sample_with_jacobian,
    scatter_sample_adjoint,
)
from .integrate import (
    DeformationTrace,
    IntegrationConfig,
    integrate,
    rk4_stage_points,
)
from .losses import LossWeights, total_loss_with_grad
from .losses import _chamfer_per_structure_grad
from .mesh import LinearTransform, apply_linear_transform

_RK4_WEIGHTS = (1.0, 2.0, 2.0, 1.0)


@dataclass(frozen=True)
class FitConfig:
    """Settings for both fitting stages.

    The flow-stage learning rate default follows the reference training
    configuration; per-case optimization usually wants a larger value, so
    tests and demos pass their own. ``alpha`` is the flow-norm clip
    threshold (just under one voxel at the default grid).
    """

    max_iters_linear: int = 200
    max_iters_flow: int = 200
    lr_linear: float = 0.05
    lr_flow: float = 5e-5
    tolerance: float = 1e-6
    alpha: float = 0.0075
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    field_dims: tuple = (128, 128, 128)
    integration: IntegrationConfig = field(default_factory=IntegrationConfig)
    momentum: float = 0.9
    volume_grad_clip: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ParameterError("alpha must be positive")
        if self.lr_linear <= 0 or self.lr_flow <= 0:
            raise ParameterError("learning rates must be positive")
        if self.tolerance <= 0:
            raise ParameterError("tolerance must be positive")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            obj = json.load(fh)
        if "weights" in obj:
            obj["weights"] = LossWeights(**obj["weights"])
        if "integration" in obj:
            obj["integration"] = IntegrationConfig(**obj["integration"])
        if "field_dims" in obj:
            obj["field_dims"] = tuple(obj["field_dims"])
        return cls(**obj)


@dataclass(frozen=True)
class FitResult:
    """Outcome of a flow fit.

    ``field`` is the clipped flow field (its max voxel norm satisfies the
    clip bound by construction); ``loss_history`` holds one report per
    accepted descent step, so totals are non-increasing.
    """

    linear: LinearTransform
    field: VectorField
    trace: DeformationTrace
    loss_history: list
    converged: bool


# -- stage 1: linear fit -----------------------------------------------


def _linear_param_jacobian(transform, base_points):
    """d(transformed point)/d(param) for the flat 9-parameter vector.

    Returns shape (n, 3, 9); parameter order is scale, rotation, translation.
    """
    rel = base_points - LinearTransform.ORIGIN
    rot = transform.rotation_matrix()
    jac = np.zeros((len(base_points), 3, 9))
    for j in range(3):
        jac[:, :, j] = rel[:, j, None] * rot[:, j][None, :]
    srel = rel * transform.scale
    for j, dr in enumerate(transform.rotation_matrix_derivatives()):
        jac[:, :, 3 + j] = srel @ dr.T
    for j in range(3):
        jac[:, j, 6 + j] = 1.0
    return jac


def _linear_value_and_grad(template, target, params):
    t = LinearTransform.from_params(params)
    moved = apply_linear_transform(template, t)
    val, _, gv = _chamfer_per_structure_grad(moved, target)
    jac = _linear_param_jacobian(t, template.vertices)
    return val, np.einsum("nc,ncp->p", gv, jac)


def fit_linear(template, target, cfg=FitConfig()):
    """Fit the 9 linear parameters by chamfer descent from the identity.

    Uses backtracking-line-searched gradient descent; the returned
    transform is the best-found parameter vector. Deterministic.
    """
    params = LinearTransform.identity().params()
    step = cfg.lr_linear
    val, grad = _linear_value_and_grad(template, target, params)
    if not np.isfinite(val):
        raise OptimizationError("non-finite chamfer at iteration 0")
    history = [val]
    for it in range(cfg.max_iters_linear):
        gnorm2 = float(grad @ grad)
        if gnorm2 == 0.0:
            break
        accepted = False
        while step > 1e-14:
            trial = params - step * grad
            trial[:3] = np.maximum(trial[:3], 1e-6)  # keep scales positive
            tval, tgrad = _linear_value_and_grad(template, target, trial)
            if not np.isfinite(tval):
                raise OptimizationError(f"non-finite chamfer at iteration {it}")
            if tval <= val - 1e-4 * step * gnorm2:
                params, val, grad = trial, tval, tgrad
                step *= 1.5
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        history.append(val)
        if len(history) > 10 and abs(history[-11] - val) <= cfg.tolerance * max(
            abs(history[-11]), 1e-12
        ):
            break

    # The L1 chamfer is only piecewise smooth: line-searched descent can
    # stall on a kink where nearest-point assignments switch. A simplex
    # polish from the stalled iterate is derivative-free and deterministic.
    def value(p):
        q = np.concatenate([np.maximum(p[:3], 1e-6), p[3:]])
        v, _ = _linear_value_and_grad(template, target, q)
        return v

    res = minimize(
        value,
        params,
        method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 5000,
                 "adaptive": True},
    )
    if res.fun <= val:
        params = np.concatenate([np.maximum(res.x[:3], 1e-6), res.x[3:]])
    return LinearTransform.from_params(params)


# -- discrete adjoint through RK4 --------------------------------------


def _jvt(field, points, cotangent):
    """(d sample / d position)^T applied to a cotangent on the sample."""
    _, jac = sample_with_jacobian(field, points)
    return np.einsum("nc,ncd->nd", cotangent, jac)


def _integrate_backward(clipped, trace, cfg, xbar, dbar, grad_flat,
                        grad_flat_vol=None):
    """Reverse sweep of the RK4 integration.

    ``trace`` holds the recorded trajectory (and, when available, the
    cached stage points) and ``xbar`` the cotangent on the final
    positions; its voxel gradients accumulate into ``grad_flat``
    (nx*ny*nz, 3). When ``dbar`` (the constant cotangent on each step's
    divergence increment) is given, a second channel with zero position
    cotangent rides the same sweep, reusing the shared stage points and
    velocity Jacobians; its voxel gradients go to ``grad_flat_vol``.
    Returns the gradient with respect to the initial positions: one
    array, or a pair when dual.
    """
    dt = cfg.dt
    dual = dbar is not None
    xbar = np.array(xbar)
    if dual:
        xbar_v = np.zeros_like(xbar)
        cat = np.zeros((len(grad_flat), 6))
    for step in range(cfg.n_steps - 1, -1, -1):
        if trace.stage_points is not None:
            pts = trace.stage_points[step]
        else:
            pts, _ = rk4_stage_points(clipped, trace.positions[step], dt)
        kbar = [
            (dt / 6.0) * xbar,
            (2.0 * dt / 6.0) * xbar,
            (2.0 * dt / 6.0) * xbar,
            (dt / 6.0) * xbar,
        ]
        if dual:
            kbar_v = [
                (dt / 6.0) * xbar_v,
                (2.0 * dt / 6.0) * xbar_v,
                (2.0 * dt / 6.0) * xbar_v,
                (dt / 6.0) * xbar_v,
            ]
        xbar_new = np.array(xbar)
        if dual:
            xbar_v_new = np.array(xbar_v)
        # stages unwind in reverse; each stage point feeds the previous
        # stage's velocity through p_{i+1} = x + c_i * dt * k_i
        coeffs = (None, 0.5, 0.5, 1.0)
        for i in (3, 2, 1, 0):
            if not dual:
                _, jac = sample_with_jacobian(clipped, pts[i])
                pbar = np.squeeze(kbar[i][:, None, :] @ jac, 1)
                scatter_sample_adjoint(grad_flat, clipped.dims, pts[i], kbar[i])
            else:
                # stage jacobian and divergence stencil share one call
                gbar = dbar * (dt * _RK4_WEIGHTS[i] / 6.0)
                div_pbar, jac = divergence_adjoint_with_jacobian(
                    clipped, pts[i], gbar, grad_flat_vol
                )
                pbar = np.squeeze(kbar[i][:, None, :] @ jac, 1)
                scatter_sample_adjoint(
                    cat, clipped.dims, pts[i],
                    np.concatenate([kbar[i], kbar_v[i]], axis=1),
                )
                pbar_v = np.squeeze(kbar_v[i][:, None, :] @ jac, 1)
                pbar_v += div_pbar
                xbar_v_new += pbar_v
            xbar_new += pbar
            if i > 0:
                kbar[i - 1] = kbar[i - 1] + (coeffs[i] * dt) * pbar
                if dual:
                    kbar_v[i - 1] = kbar_v[i - 1] + (coeffs[i] * dt) * pbar_v
        xbar = xbar_new
        if dual:
            xbar_v = xbar_v_new
    if dual:
        grad_flat += cat[:, :3]
        grad_flat_vol += cat[:, 3:]
        return xbar, xbar_v
    return xbar


def _flow_loss_and_grad(moved_template, target, raw, cfg, volume_subset=None,
                        want_grad=True):
    """Objective and gradients of the flow stage.

    Returns ``(report, grad_raw_voxels, grad_initial_positions)``; the two
    gradients are None when ``want_grad`` is false. The volume term's
    field gradient is globally norm-clipped before being combined, the
    stabilization used against the exponential blowing up.
    """
    weights = cfg.weights
    clipped = clip_field(raw, cfg.alpha)
    icfg = replace(
        cfg.integration,
        accumulate_divergence=weights.volume > 0,
        keep_stage_points=want_grad,
    )
    trace = integrate(moved_template, clipped, icfg)
    deformed = moved_template.with_vertices(trace.final_positions)
    report, gv, gdiv = total_loss_with_grad(
        deformed, target, trace, weights, volume_subset, want_grad=want_grad
    )
    if not want_grad:
        return report, None, None

    nvox = int(np.prod(raw.dims))
    grad_flat = np.zeros((nvox, 3))
    if weights.volume == 0:
        x0bar = _integrate_backward(clipped, trace, icfg, gv, None, grad_flat)
        return report, clip_field_adjoint(
            raw, cfg.alpha, grad_flat.reshape(raw.data.shape)
        ), x0bar

    # position and volume cotangents share one backward sweep
    grad_flat_v = np.zeros((nvox, 3))
    x0bar, x0bar_v = _integrate_backward(
        clipped, trace, icfg, gv, gdiv, grad_flat, grad_flat_v
    )
    grad_raw = clip_field_adjoint(raw, cfg.alpha, grad_flat.reshape(raw.data.shape))
    grad_raw_v = clip_field_adjoint(
        raw, cfg.alpha, grad_flat_v.reshape(raw.data.shape)
    )
    if cfg.volume_grad_clip is not None:
        norm = float(np.linalg.norm(grad_raw_v))
        if norm > cfg.volume_grad_clip:
            scale = cfg.volume_grad_clip / norm
            grad_raw_v = grad_raw_v * scale
            x0bar_v = x0bar_v * scale
    return report, grad_raw + grad_raw_v, x0bar + x0bar_v


def adjoint_gradient(template, target, field_raw, linear, cfg, volume_subset=None):
    """Exact reverse-mode gradient of the total loss.

    Differentiates through loss terms, final vertex positions, RK4 steps,
    trilinear samples and the magnitude clip down to the raw voxel values,
    and through the linear transform's closed-form parameter Jacobian.
    Nearest-neighbor matchings are frozen per evaluation.

    Returns ``(grad_field (nx, ny, nz, 3), grad_linear_params (9,))``.
    """
    moved = apply_linear_transform(template, linear)
    _, grad_raw, x0bar = _flow_loss_and_grad(
        moved, target, field_raw, cfg, volume_subset
    )
    jac = _linear_param_jacobian(linear, template.vertices)
    grad_params = np.einsum("nc,ncp->p", x0bar, jac)
    return grad_raw, grad_params


# -- stage 2: flow fit -------------------------------------------------


def fit_flow(template, target, linear, cfg=FitConfig(), volume_subset=None):
    """Fit the voxel flow field: fixed-step momentum descent with a
    periodic line-search fallback.

    The field starts at zero (identity flow). Steps are taken at a fixed
    rate so descent can cross the kinks of the L1 chamfer; only states
    that improve on the best total are recorded, which keeps
    ``loss_history`` non-increasing. When no improvement appears for a
    stretch, the search rolls back to the best state with the rate halved
    (the line-search element). Deterministic given the config.
    """
    moved = apply_linear_transform(template, linear)
    raw = VectorField.zeros(cfg.field_dims)
    lr = cfg.lr_flow
    velocity = np.zeros_like(raw.data)

    report, grad, _ = _flow_loss_and_grad(moved, target, raw, cfg, volume_subset)
    if not np.isfinite(report.total):
        raise OptimizationError("non-finite loss at iteration 0")
    history = [report]
    best_raw, best_grad = raw, grad
    converged = False
    since_best = 0  # iterations since the last recorded improvement
    improved_at_lr = False
    for it in range(cfg.max_iters_flow):
        velocity = cfg.momentum * velocity + grad
        raw = VectorField(raw.data - lr * velocity)
        report, grad, _ = _flow_loss_and_grad(moved, target, raw, cfg, volume_subset)
        if not np.isfinite(report.total):
            raise OptimizationError(f"non-finite loss at iteration {it}")
        wandered = report.total > 2.0 * history[-1].total + cfg.tolerance
        if report.total <= history[-1].total - cfg.tolerance * max(
            abs(history[-1].total), 1e-12
        ):
            best_raw, best_grad = raw, grad
            history.append(report)
            since_best = 0
            improved_at_lr = True
        else:
            since_best += 1
        if wandered or since_best >= 20:
            # rollback to the best state and shorten the step
            raw, grad = best_raw, best_grad
            velocity = np.zeros_like(raw.data)
            if not wandered and not improved_at_lr:
                converged = True  # a full patience window at this rate gained nothing
                break
            lr *= 0.5
            since_best = 0
            improved_at_lr = False
            if lr < 1e-16:
                converged = True
                break

    clipped = clip_field(best_raw, cfg.alpha)
    trace = integrate(moved, clipped, cfg.integration)
    return FitResult(
        linear=linear,
        field=clipped,
        trace=trace,
        loss_history=history,
        converged=converged,
    )


def deform(template, linear, flow_field, integration=IntegrationConfig()):
    """Pure inference: apply the linear transform, then integrate.

    Works with fields from any source and with templates of any
    resolution, including ones unseen during fitting.
    """
    moved = apply_linear_transform(template, linear)
    trace = integrate(moved, flow_field, integration)
    return moved.with_vertices(trace.final_positions)
