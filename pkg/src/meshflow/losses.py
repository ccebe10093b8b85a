"""Objective terms for template fitting, with analytic vertex gradients.

Six terms combine into the weighted training objective: L1 chamfer
distance (per structure, averaged), orientation-sensitive normal
consistency between template and target, the kinematic volume ratio
accumulated by the integrator, and three mesh regularizers (edge length,
face-normal consistency, Laplacian smoothing).

Gradient semantics: nearest-neighbor matchings are frozen per evaluation,
giving the standard piecewise-smooth chamfer subgradient. The chamfer
matching minimizes the L1 norm itself; normal-consistency matching is
under L2, as its defining expression requires.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree, distance

from .errors import ParameterError, StateError, ValidationError

LOSS_KEYS = ("chamfer", "chamfer_normal", "volume", "edge", "face_normal", "laplacian")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the six objective terms (defaults follow the reference
    training configuration: chamfer 1, normal 0.20, volume 0.005, edge 50,
    face-normal 1, Laplacian 30)."""

    chamfer: float = 1.0
    chamfer_normal: float = 0.20
    volume: float = 0.005
    edge: float = 50.0
    face_normal: float = 1.0
    laplacian: float = 30.0

    def __post_init__(self):
        for key in LOSS_KEYS:
            if getattr(self, key) < 0:
                raise ParameterError(f"loss weight {key!r} must be >= 0")

    def as_array(self):
        return np.array([getattr(self, k) for k in LOSS_KEYS])

    @classmethod
    def from_json(cls, path):
        """Read weights from a JSON object with exactly the six term keys."""
        with open(path) as fh:
            obj = json.load(fh)
        unknown = set(obj) - set(LOSS_KEYS)
        if unknown:
            raise ValidationError(f"unknown loss weight keys: {sorted(unknown)}")
        missing = set(LOSS_KEYS) - set(obj)
        if missing:
            raise ValidationError(f"missing loss weight keys: {sorted(missing)}")
        return cls(**obj)


@dataclass(frozen=True)
class LossReport:
    """Per-term values plus their weighted sum."""

    chamfer: float
    chamfer_normal: float
    volume: float
    edge: float
    face_normal: float
    laplacian: float
    weights: LossWeights
    per_structure_chamfer: dict = field(default_factory=dict)

    def terms(self):
        return np.array([getattr(self, k) for k in LOSS_KEYS])

    @property
    def total(self):
        return float(self.terms() @ self.weights.as_array())

    def as_dict(self):
        out = {k: getattr(self, k) for k in LOSS_KEYS}
        out["per_structure_chamfer"] = dict(self.per_structure_chamfer)
        out["total"] = self.total
        return out


# -- nearest neighbors -------------------------------------------------


def _nearest(query, points, p):
    """Index of the nearest point under the L^p norm, lowest index on ties."""
    if len(query) * len(points) <= 4_000_000:
        metric = "cityblock" if p == 1 else "euclidean"
        d = distance.cdist(query, points, metric=metric)
        return d.argmin(axis=1)
    _, idx = cKDTree(points).query(query, p=p)
    return idx


# -- chamfer -----------------------------------------------------------


def chamfer_l1(p1, p2):
    """Symmetric chamfer distance under the L1 norm.

    Each point is matched to the neighbor minimizing the L1 norm itself
    (not the L2-nearest), and the two directed means are summed.
    """
    val, _, _, _, _ = _chamfer_parts(p1, p2)
    return val


def _chamfer_parts(p1, p2):
    p1 = np.asarray(p1, dtype=np.float64).reshape(-1, 3)
    p2 = np.asarray(p2, dtype=np.float64).reshape(-1, 3)
    if len(p1) == 0 or len(p2) == 0:
        raise ValidationError("chamfer distance requires non-empty point sets")
    idx12 = _nearest(p1, p2, p=1)
    idx21 = _nearest(p2, p1, p=1)
    d12 = np.abs(p1 - p2[idx12]).sum(axis=1).mean()
    d21 = np.abs(p2 - p1[idx21]).sum(axis=1).mean()
    return float(d12 + d21), p1, p2, idx12, idx21


def chamfer_l1_grad(p1, p2):
    """Chamfer value and its gradients with respect to both point sets."""
    val, p1, p2, idx12, idx21 = _chamfer_parts(p1, p2)
    g1 = np.sign(p1 - p2[idx12]) / len(p1)
    g2 = np.sign(p2 - p1[idx21]) / len(p2)
    grad1 = g1.copy()
    np.add.at(grad1, idx21, -g2)
    grad2 = np.zeros_like(p2)
    np.add.at(grad2, idx12, -g1)
    grad2 += g2
    return val, grad1, grad2


def _check_labels(template, target):
    st, sg = set(template.structures()), set(target.structures())
    if st != sg:
        missing = sorted((st - sg) | (sg - st))
        raise ValidationError(f"structure label mismatch, unmatched labels: {missing}")


def chamfer_per_structure(template, target):
    """Mean over structures of the L1 chamfer between matching structures."""
    val, per, _ = _chamfer_per_structure_grad(template, target, want_grad=False)
    return val


def chamfer_per_structure_breakdown(template, target):
    """(mean, {label: chamfer}) over shared structures."""
    val, per, _ = _chamfer_per_structure_grad(template, target, want_grad=False)
    return val, per


def _chamfer_per_structure_grad(template, target, want_grad=True):
    _check_labels(template, target)
    labels = template.structures()
    per = {}
    grad = np.zeros_like(template.vertices) if want_grad else None
    for label in labels:
        vt = template.vertex_ids_of(label)
        vg = target.vertex_ids_of(label)
        if want_grad:
            val, g1, _ = chamfer_l1_grad(template.vertices[vt], target.vertices[vg])
            np.add.at(grad, vt, g1 / len(labels))
        else:
            val = chamfer_l1(template.vertices[vt], target.vertices[vg])
        per[label] = val
    mean = float(np.mean(list(per.values())))
    return mean, per, grad


# -- normal consistency ------------------------------------------------


def _check_unit(normals, what):
    err = np.abs(np.linalg.norm(normals, axis=1) - 1.0)
    if err.size and err.max() > 1e-8:
        raise ParameterError(f"{what} normals must be unit length (max |.|-1 = {err.max():.2e})")


def normal_consistency(p, p_normals, q, q_normals):
    """Orientation-sensitive normal mismatch between two oriented point sets.

    Each point is matched to its L2-nearest neighbor in the other set and
    contributes ``1 - n(x)^T n(y)``; the two directed means are averaged.
    No absolute value is taken, so opposite orientations contribute 2,
    which is precisely what keeps the two walls of a thin structure from
    being matched to each other.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    pn = np.asarray(p_normals, dtype=np.float64).reshape(-1, 3)
    qn = np.asarray(q_normals, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0 or len(q) == 0:
        raise ValidationError("normal consistency requires non-empty point sets")
    _check_unit(pn, "first set")
    _check_unit(qn, "second set")
    fwd = 1.0 - np.sum(pn * qn[_nearest(p, q, p=2)], axis=1)
    bwd = 1.0 - np.sum(qn * pn[_nearest(q, p, p=2)], axis=1)
    return float(0.5 * (fwd.mean() + bwd.mean()))


def normal_consistency_meshes(template, target):
    """Normal consistency between the vertex sets of two meshes."""
    return normal_consistency(
        template.vertices,
        template.vertex_normals(),
        target.vertices,
        target.vertex_normals(),
    )


def normal_consistency_meshes_grad(template, target):
    """Value and gradient with respect to the template vertex positions.

    With the matching frozen, the loss depends on the template only
    through its vertex normals, so the gradient flows through the
    area-weighted normal computation.
    """
    tn = template.vertex_normals()
    gn = target.vertex_normals()
    tp, gp = template.vertices, target.vertices
    idx_tg = _nearest(tp, gp, p=2)
    idx_gt = _nearest(gp, tp, p=2)
    fwd = 1.0 - np.sum(tn * gn[idx_tg], axis=1)
    bwd = 1.0 - np.sum(gn * tn[idx_gt], axis=1)
    val = float(0.5 * (fwd.mean() + bwd.mean()))

    cot = -0.5 * gn[idx_tg] / len(tp)
    np.add.at(cot, idx_gt, -0.5 * gn / len(gp))
    return val, vertex_normal_backward(template, cot)


def vertex_normal_backward(mesh, cotangent):
    """Pull a cotangent on unit vertex normals back to vertex positions."""
    c = mesh.face_cross()
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], c)
    norms = np.linalg.norm(acc, axis=1, keepdims=True)
    safe = np.maximum(norms, 1e-300)
    nhat = acc / safe
    # through normalization: (I - n n^T) / |u|
    g_acc = (cotangent - nhat * np.sum(nhat * cotangent, axis=1, keepdims=True)) / safe
    g_cross = g_acc[mesh.faces[:, 0]] + g_acc[mesh.faces[:, 1]] + g_acc[mesh.faces[:, 2]]
    return _cross_backward(mesh, g_cross)


def _cross_backward(mesh, g_cross):
    """Backward of c_f = (v1 - v0) x (v2 - v0) onto vertex positions."""
    v0 = mesh.vertices[mesh.faces[:, 0]]
    v1 = mesh.vertices[mesh.faces[:, 1]]
    v2 = mesh.vertices[mesh.faces[:, 2]]
    ga = np.cross(v2 - v0, g_cross)  # d/d(v1 - v0)
    gb = np.cross(g_cross, v1 - v0)  # d/d(v2 - v0)
    grad = np.zeros_like(mesh.vertices)
    np.add.at(grad, mesh.faces[:, 0], -(ga + gb))
    np.add.at(grad, mesh.faces[:, 1], ga)
    np.add.at(grad, mesh.faces[:, 2], gb)
    return grad


# -- volume loss -------------------------------------------------------


def volume_loss(trace, subset=None):
    """Mean local volume ratio ``exp(-div_integral)`` over selected vertices.

    Neutral value is 1 under divergence-free flow; values above 1 flag
    local collapse.
    """
    val, _ = volume_loss_grad(trace, subset)
    return val


def volume_loss_grad(trace, subset=None):
    """Value and gradient with respect to the per-vertex divergence integral."""
    if trace.div_integral is None:
        raise StateError("trace has no divergence integral")
    d = trace.div_integral
    if subset is not None:
        subset = np.asarray(subset, dtype=np.int64)
        if subset.size == 0:
            raise ValidationError("volume loss vertex subset is empty")
        d = d[subset]
    ratios = np.exp(-d)
    grad = np.zeros_like(trace.div_integral)
    contrib = -ratios / len(d)
    if subset is None:
        grad[:] = contrib
    else:
        np.add.at(grad, subset, contrib)
    return float(ratios.mean()), grad


# -- mesh regularizers -------------------------------------------------


def edge_length_loss(mesh):
    """Mean squared length over unique edges."""
    e = mesh.edges()
    if len(e) == 0:
        raise ValidationError("mesh has no edges")
    d = mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]]
    return float((d * d).sum(axis=1).mean())


def edge_length_loss_grad(mesh):
    e = mesh.edges()
    if len(e) == 0:
        raise ValidationError("mesh has no edges")
    d = mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]]
    val = float((d * d).sum(axis=1).mean())
    grad = np.zeros_like(mesh.vertices)
    g = 2.0 * d / len(e)
    np.add.at(grad, e[:, 0], g)
    np.add.at(grad, e[:, 1], -g)
    return val, grad


def _face_pairs(mesh):
    """Pairs of face indices sharing an edge, each pair once."""
    faces = mesh.faces
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    fid = np.tile(np.arange(len(faces)), 3)
    key = np.sort(e, axis=1)
    order = np.lexsort((key[:, 1], key[:, 0]))
    ks = key[order]
    fs = fid[order]
    same = (ks[:-1] == ks[1:]).all(axis=1)
    pairs = []
    i = 0
    n = len(ks)
    while i < n:
        j = i + 1
        while j < n and same[j - 1]:
            j += 1
        for a in range(i, j):
            for b in range(a + 1, j):
                pairs.append((fs[a], fs[b]))
        i = j
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def face_normal_consistency_loss(mesh):
    """Mean of ``1 - cos(angle)`` between unit normals of adjacent faces."""
    val, _ = face_normal_consistency_loss_grad(mesh)
    return val


def face_normal_consistency_loss_grad(mesh):
    pairs = _face_pairs(mesh)
    if len(pairs) == 0:
        return 0.0, np.zeros_like(mesh.vertices)
    c = mesh.face_cross()
    norms = np.linalg.norm(c, axis=1, keepdims=True)
    n = c / np.maximum(norms, 1e-300)
    ni, nj = n[pairs[:, 0]], n[pairs[:, 1]]
    val = float((1.0 - np.sum(ni * nj, axis=1)).mean())

    g_n = np.zeros_like(n)
    np.add.at(g_n, pairs[:, 0], -nj / len(pairs))
    np.add.at(g_n, pairs[:, 1], -ni / len(pairs))
    g_cross = (g_n - n * np.sum(n * g_n, axis=1, keepdims=True)) / np.maximum(norms, 1e-300)
    return val, _cross_backward(mesh, g_cross)


def laplacian_loss(mesh):
    """Mean squared norm of the uniform Laplacian over vertices."""
    lap = mesh.uniform_laplacian()
    return float((lap * lap).sum(axis=1).mean())


def laplacian_loss_grad(mesh):
    from scipy import sparse

    adj = mesh._adjacency()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if (deg == 0).any():
        from .errors import ConnectivityError

        raise ConnectivityError("mesh has an isolated vertex")
    n = mesh.n_vertices
    lap_op = sparse.diags(1.0 / deg) @ adj - sparse.identity(n)
    lap = lap_op @ mesh.vertices
    val = float((lap * lap).sum(axis=1).mean())
    grad = lap_op.T @ (2.0 * lap / n)
    return val, np.asarray(grad)


# -- combination -------------------------------------------------------


def total_loss(template_deformed, target, trace, weights, volume_subset=None):
    """Evaluate all six terms and combine them with ``weights``.

    ``trace`` supplies the divergence integral for the volume term; it may
    be None only when the volume weight is zero (the term then reports 0).
    """
    report, _, _ = total_loss_with_grad(
        template_deformed, target, trace, weights, volume_subset, want_grad=False
    )
    return report


def total_loss_with_grad(
    template_deformed, target, trace, weights, volume_subset=None, want_grad=True
):
    """LossReport plus gradients for the optimizer.

    Returns ``(report, grad_vertices, grad_div_integral)``; the vertex
    gradient covers every term that depends on the deformed positions,
    and ``grad_div_integral`` is the volume term's gradient with respect
    to the per-vertex divergence integral (zero weight excluded).
    """
    grad = np.zeros_like(template_deformed.vertices) if want_grad else None
    grad_div = None

    if want_grad:
        cham, per, g = _chamfer_per_structure_grad(template_deformed, target)
        grad += weights.chamfer * g
        nc, g = normal_consistency_meshes_grad(template_deformed, target)
        grad += weights.chamfer_normal * g
        edge, g = edge_length_loss_grad(template_deformed)
        grad += weights.edge * g
        fnc, g = face_normal_consistency_loss_grad(template_deformed)
        grad += weights.face_normal * g
        lap, g = laplacian_loss_grad(template_deformed)
        grad += weights.laplacian * g
    else:
        cham, per, _ = _chamfer_per_structure_grad(template_deformed, target, want_grad=False)
        nc = normal_consistency_meshes(template_deformed, target)
        edge = edge_length_loss(template_deformed)
        fnc = face_normal_consistency_loss(template_deformed)
        lap = laplacian_loss(template_deformed)

    if trace is not None and trace.div_integral is not None:
        vol, gdiv = volume_loss_grad(trace, volume_subset)
        if want_grad:
            grad_div = weights.volume * gdiv
    elif weights.volume == 0:
        vol = 0.0
    else:
        raise StateError("volume weight is nonzero but no divergence trace was given")

    report = LossReport(
        chamfer=cham,
        chamfer_normal=nc,
        volume=vol,
        edge=edge,
        face_normal=fnc,
        laplacian=lap,
        weights=weights,
        per_structure_chamfer=per,
    )
    return report, grad, grad_div
