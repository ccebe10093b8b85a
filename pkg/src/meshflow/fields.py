"""Scalar and vector fields on a voxel grid over the unit cube.

Voxel centers sit at ``(i + 0.5) / n`` per axis. Trilinear sampling clamps
out-of-domain coordinates to the boundary voxel centers, which keeps every
sampling-based operation total. Besides plain sampling, this module
provides the pieces reverse-mode differentiation needs: the sample's
Jacobian with respect to the query position and the adjoint scatter of a
cotangent back onto the voxel values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import MeshFormatError, ParameterError, ValidationError

GRID_MAGIC = b"MESHFLOWGRID"
GRID_VERSION = 1


class _Grid:
    def __init__(self, data, channels):
        data = np.ascontiguousarray(data, dtype=np.float64)
        expect = 4 if channels > 1 else 3
        if data.ndim != expect or (channels > 1 and data.shape[3] != channels):
            raise ValidationError(
                f"grid data must have shape (nx, ny, nz{', ' + str(channels) if channels > 1 else ''}), got {data.shape}"
            )
        if min(data.shape[:3]) < 2:
            raise ValidationError(f"grid dims must be >= 2, got {data.shape[:3]}")
        if not np.isfinite(data).all():
            raise ValidationError("grid data contains non-finite values")
        data.setflags(write=False)
        self.data = data
        self.dims = data.shape[:3]

    @property
    def spacing(self):
        """Per-axis voxel spacing (1 / n)."""
        return 1.0 / np.array(self.dims, dtype=np.float64)

    def voxel_centers(self):
        """(nx, ny, nz, 3) array of voxel center coordinates."""
        axes = [(np.arange(n) + 0.5) / n for n in self.dims]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


class ScalarField(_Grid):
    """One scalar per voxel: a distance map or a binary segmentation."""

    def __init__(self, data):
        super().__init__(data, channels=1)

    @classmethod
    def zeros(cls, dims):
        return cls(np.zeros(tuple(dims)))

    @classmethod
    def from_function(cls, fn, dims):
        """Evaluate ``fn`` (mapping (..., 3) -> (...)) at voxel centers."""
        field = cls.zeros(dims)
        return cls(np.asarray(fn(field.voxel_centers())))


class VectorField(_Grid):
    """One 3-vector per voxel, in normalized coordinates per unit time."""

    def __init__(self, data):
        super().__init__(data, channels=3)

    @classmethod
    def zeros(cls, dims):
        return cls(np.zeros(tuple(dims) + (3,)))

    @classmethod
    def from_function(cls, fn, dims):
        field = cls.zeros(dims)
        return cls(np.asarray(fn(field.voxel_centers())))

    def max_norm(self):
        return float(np.linalg.norm(self.data.reshape(-1, 3), axis=1).max(initial=0.0))


# -- trilinear interpolation ------------------------------------------


def _trilinear_parts(dims, points, with_derivative=False):
    """Corner indices and weights for trilinear interpolation.

    Returns flat corner indices (N, 8), weights (N, 8), and, when
    requested, the weight derivatives with respect to the query position
    (N, 8, 3). Derivatives are zero along axes where the coordinate is
    clamped outside the voxel-center range.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = np.asarray(dims)
    g = pts * n - 0.5
    inside = (g > 0.0) & (g < n - 1.0)  # clamp kills the position derivative
    g = np.clip(g, 0.0, n - 1.0)
    i0 = np.minimum(g.astype(np.int64), n - 2)
    f = g - i0

    wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
    wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
    wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
    w = (
        wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]
    ).reshape(-1, 8)

    strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    base = i0 @ strides
    offs = np.array(
        [dx * strides[0] + dy * strides[1] + dz
         for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)],
        dtype=np.int64,
    )
    corners = base[:, None] + offs[None, :]

    if not with_derivative:
        return corners, w, None

    sx = np.where(inside[:, 0], float(n[0]), 0.0)
    sy = np.where(inside[:, 1], float(n[1]), 0.0)
    sz = np.where(inside[:, 2], float(n[2]), 0.0)
    dwx = np.stack([-np.ones(len(pts)), np.ones(len(pts))], axis=1)
    dw = np.empty((len(pts), 8, 3))
    dw[:, :, 0] = (
        dwx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]
    ).reshape(-1, 8) * sx[:, None]
    dw[:, :, 1] = (
        wx[:, :, None, None] * dwx[:, None, :, None] * wz[:, None, None, :]
    ).reshape(-1, 8) * sy[:, None]
    dw[:, :, 2] = (
        wx[:, :, None, None] * wy[:, None, :, None] * dwx[:, None, None, :]
    ).reshape(-1, 8) * sz[:, None]
    return corners, w, dw


def sample_trilinear(field, points):
    """Trilinear interpolation with clamp-to-border semantics.

    For a ScalarField returns shape (...,); for a VectorField (..., 3).
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    corners, w, _ = _trilinear_parts(field.dims, pts)
    flat = field.data.reshape(-1, field.data.shape[3]) if field.data.ndim == 4 \
        else field.data.reshape(-1, 1)
    out = (w[:, :, None] * flat[corners]).sum(axis=1)
    if field.data.ndim == 3:
        out = out[:, 0]
        return float(out[0]) if single else out.reshape(pts.shape[:-1])
    return out[0] if single else out.reshape(pts.shape[:-1] + (3,))


def sample_with_jacobian(field, points):
    """Sampled values and their Jacobian with respect to the position.

    Returns ``(values (N, C), jac (N, C, 3))`` with C = 1 or 3.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    corners, w, dw = _trilinear_parts(field.dims, pts, with_derivative=True)
    flat = field.data.reshape(-1, field.data.shape[3]) if field.data.ndim == 4 \
        else field.data.reshape(-1, 1)
    vals = flat[corners]  # (N, 8, C)
    out = (w[:, :, None] * vals).sum(axis=1)
    jac = np.swapaxes(vals, 1, 2) @ dw  # (N, C, 3)
    return out, jac


def scatter_sample_adjoint(grad_flat, dims, points, cotangent):
    """Accumulate d(sum cot . sample)/d(voxel values) into ``grad_flat``.

    ``grad_flat`` has shape (nx * ny * nz, C) and is modified in place.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cot = np.asarray(cotangent, dtype=np.float64).reshape(len(pts), -1)
    corners, w, _ = _trilinear_parts(dims, pts)
    contrib = w[:, :, None] * cot[:, None, :]  # (N, 8, C)
    idx = corners.ravel()
    for c in range(cot.shape[1]):  # bincount beats ufunc.at here
        grad_flat[:, c] += np.bincount(
            idx, weights=contrib[:, :, c].ravel(), minlength=len(grad_flat)
        )


# -- flow clipping ------------------------------------------------------


def clip_field(field, alpha):
    """Rescale voxel vectors with norm above ``alpha`` to norm exactly alpha.

    Directions are preserved; vectors at or below the threshold pass
    through unchanged, so the operation is idempotent.
    """
    if alpha <= 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    v = field.data
    # repeat until a fixed point so round-off in the rescale cannot leave a
    # norm one ulp above alpha (makes clip(clip(f)) bit-identical to clip(f))
    while True:
        norm = np.linalg.norm(v, axis=3, keepdims=True)
        scale = np.where(norm > alpha, alpha / np.maximum(norm, alpha), 1.0)
        out = v * scale
        if np.array_equal(out, v):
            return VectorField(out)
        v = out


def clip_field_adjoint(raw, alpha, cotangent):
    """Pull a cotangent on the clipped field back to the raw field.

    Above the threshold the Jacobian of ``alpha * v / |v|`` is
    ``alpha / |v| (I - vv^T / |v|^2)`` (symmetric); at or below the
    threshold it is the identity.
    """
    v = raw.data
    g = np.asarray(cotangent, dtype=np.float64).reshape(v.shape)
    norm = np.linalg.norm(v, axis=3, keepdims=True)
    over = norm > alpha
    safe = np.maximum(norm, alpha)
    vhat = np.where(over, v / safe, 0.0)
    proj = g - vhat * np.sum(vhat * g, axis=3, keepdims=True)
    return np.where(over, (alpha / safe) * proj, g)


# -- divergence and velocity gradient -----------------------------------


def _offset_points(points, spacing):
    """Points shifted by +/- one voxel spacing along each axis: (6, N, 3)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty((6, len(pts), 3))
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = spacing[axis]
        out[2 * axis] = pts + step
        out[2 * axis + 1] = pts - step
    return out

def divergence_at(field, points):
    """div(v) by central differences of the interpolated field.

    The stencil step is one voxel spacing per axis, applied to the
    trilinearly sampled field so the divergence is defined at arbitrary
    trajectory points (exact for fields affine in each coordinate).
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    h = field.spacing
    offs = _offset_points(pts, h)
    # one batched interpolation over all six stencil shifts
    vals = sample_trilinear(field, offs.reshape(-1, 3)).reshape(6, -1, 3)
    div = np.zeros(offs.shape[1])
    for axis in range(3):
        div += (vals[2 * axis, :, axis] - vals[2 * axis + 1, :, axis]) / (
            2.0 * h[axis]
        )
    return float(div[0]) if single else div.reshape(pts.shape[:-1])


def divergence_adjoint(field, points, cotangent, grad_flat=None):
    """Reverse-mode through :func:`divergence_at`.

    Returns the gradient with respect to the query points, shape (N, 3).
    When ``grad_flat`` (nx*ny*nz, 3) is given, also accumulates the
    gradient with respect to the voxel values into it.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cot = np.asarray(cotangent, dtype=np.float64).reshape(-1)
    h = field.spacing
    offs = _offset_points(pts, h)
    # batch all six stencil shifts through one interpolation call
    _, jac = sample_with_jacobian(field, offs.reshape(-1, 3))
    jac = jac.reshape(6, len(pts), 3, 3)
    x_grad = np.zeros_like(pts)
    stencil_cot = np.zeros((6, len(pts), 3))
    for axis in range(3):
        coef = cot / (2.0 * h[axis])
        for sgn, k in ((1.0, 2 * axis), (-1.0, 2 * axis + 1)):
            x_grad += sgn * coef[:, None] * jac[k, :, axis, :]
            stencil_cot[k, :, axis] = sgn * coef
    if grad_flat is not None:
        scatter_sample_adjoint(
            grad_flat, field.dims, offs.reshape(-1, 3), stencil_cot.reshape(-1, 3)
        )
    return x_grad


def divergence_adjoint_with_jacobian(field, points, cotangent, grad_flat=None):
    """:func:`divergence_adjoint` plus the velocity Jacobian at ``points``.

    The backward integration sweep needs both at the same stage points, so
    the query points and the six stencil shifts share one batched
    interpolation call. Returns ``(x_grad (N, 3), jac (N, 3, 3))``, each
    entry bit-identical to the separate computations.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cot = np.asarray(cotangent, dtype=np.float64).reshape(-1)
    h = field.spacing
    offs = _offset_points(pts, h)
    _, jac_all = sample_with_jacobian(
        field, np.concatenate([pts, offs.reshape(-1, 3)], axis=0)
    )
    jac_pts = jac_all[: len(pts)]
    jac = jac_all[len(pts):].reshape(6, len(pts), 3, 3)
    x_grad = np.zeros_like(pts)
    stencil_cot = np.zeros((6, len(pts), 3))
    for axis in range(3):
        coef = cot / (2.0 * h[axis])
        for sgn, k in ((1.0, 2 * axis), (-1.0, 2 * axis + 1)):
            x_grad += sgn * coef[:, None] * jac[k, :, axis, :]
            stencil_cot[k, :, axis] = sgn * coef
    if grad_flat is not None:
        scatter_sample_adjoint(
            grad_flat, field.dims, offs.reshape(-1, 3), stencil_cot.reshape(-1, 3)
        )
    return x_grad, jac_pts


def velocity_gradient_at(field, points):
    """Full velocity gradient (dv_i/dx_j) by the same central-difference stencil.

    Returns shape (..., 3, 3) with rows indexing the component and columns
    the differentiation axis.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    h = field.spacing
    offs = _offset_points(pts, h)
    grad = np.zeros((offs.shape[1], 3, 3))
    for axis in range(3):
        plus = sample_trilinear(field, offs[2 * axis])
        minus = sample_trilinear(field, offs[2 * axis + 1])
        grad[:, :, axis] = (plus - minus) / (2.0 * h[axis])
    return grad[0] if single else grad.reshape(pts.shape[:-1] + (3, 3))


# -- unsigned distance map ----------------------------------------------


def point_triangle_distance(points, v0, v1, v2):
    """Exact distance from each point to the corresponding triangle.

    All arguments broadcast to a common leading shape; the closest-point
    computation follows the standard barycentric region classification.
    """
    p, a, b, c = np.broadcast_arrays(
        np.asarray(points, dtype=np.float64),
        np.asarray(v0, dtype=np.float64),
        np.asarray(v1, dtype=np.float64),
        np.asarray(v2, dtype=np.float64),
    )
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.sum(ab * ap, axis=-1)
    d2 = np.sum(ac * ap, axis=-1)
    bp = p - b
    d3 = np.sum(ab * bp, axis=-1)
    d4 = np.sum(ac * bp, axis=-1)
    cp = p - c
    d5 = np.sum(ab * cp, axis=-1)
    d6 = np.sum(ac * cp, axis=-1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = np.where(va + vb + vc != 0.0, va + vb + vc, 1.0)
    v = vb / denom
    w = vc / denom
    closest = a + v[..., None] * ab + w[..., None] * ac

    # vertex regions
    closest = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, closest)
    # edge AB
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0) & ~((d1 <= 0) & (d2 <= 0)) & ~(
        (d3 >= 0) & (d4 <= d3)
    )
    t_ab = np.divide(d1, d1 - d3, out=np.zeros_like(d1), where=(d1 - d3) != 0)
    closest = np.where(on_ab[..., None], a + t_ab[..., None] * ab, closest)
    # edge AC
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0) & ~((d1 <= 0) & (d2 <= 0)) & ~(
        (d6 >= 0) & (d5 <= d6)
    )
    t_ac = np.divide(d2, d2 - d6, out=np.zeros_like(d2), where=(d2 - d6) != 0)
    closest = np.where(on_ac[..., None], a + t_ac[..., None] * ac, closest)
    # edge BC
    on_bc = (
        (va <= 0)
        & ((d4 - d3) >= 0)
        & ((d5 - d6) >= 0)
        & ~((d3 >= 0) & (d4 <= d3))
        & ~((d6 >= 0) & (d5 <= d6))
    )
    denom_bc = (d4 - d3) + (d5 - d6)
    t_bc = np.divide(
        d4 - d3, denom_bc, out=np.zeros_like(d4), where=denom_bc != 0
    )
    closest = np.where(on_bc[..., None], b + t_bc[..., None] * (c - b), closest)

    return np.linalg.norm(p - closest, axis=-1)


def mesh_distance(points, mesh, tree=None):
    """Exact nearest point-to-surface distance for a batch of points.

    A centroid KD-tree prunes candidate faces: every face whose centroid
    lies within (nearest centroid distance + 2 * max circumradius) could
    host the true minimum, so enlarging the k-nearest candidate set until
    the k-th centroid lies beyond that bound guarantees exactness.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    faces = mesh.faces
    if len(faces) == 0:
        raise ValidationError("mesh has no faces")
    tri = mesh.vertices[faces]  # (F, 3, 3)
    centroids = tri.mean(axis=1)
    rmax = float(np.linalg.norm(tri - centroids[:, None, :], axis=2).max())
    if tree is None:
        tree = cKDTree(centroids)

    nf = len(faces)
    k = min(8, nf)
    best = np.full(len(pts), np.inf)
    pending = np.arange(len(pts))
    while len(pending):
        d_cent, idx = tree.query(pts[pending], k=k)
        if k == 1:
            d_cent = d_cent[:, None]
            idx = idx[:, None]
        d = point_triangle_distance(
            pts[pending][:, None, :],
            tri[idx, 0],
            tri[idx, 1],
            tri[idx, 2],
        )
        best[pending] = d.min(axis=1)
        if k >= nf:
            break
        # candidates certainly exhaustive once the k-th centroid is beyond
        # the nearest-centroid bound
        done = d_cent[:, -1] >= d_cent[:, 0] + 2.0 * rmax
        pending = pending[~done]
        k = min(2 * k, nf)
    return best


def unsigned_distance_map(mesh, dims, chunk=65536):
    """Exact unsigned distance from each voxel center to the mesh surface."""
    if mesh.n_faces == 0:
        raise ValidationError("cannot build a distance map from an empty mesh")
    field = ScalarField.zeros(dims)
    centers = field.voxel_centers().reshape(-1, 3)
    tri = mesh.vertices[mesh.faces]
    tree = cKDTree(tri.mean(axis=1))
    out = np.empty(len(centers))
    for start in range(0, len(centers), chunk):
        out[start : start + chunk] = mesh_distance(
            centers[start : start + chunk], mesh, tree=tree
        )
    return ScalarField(out.reshape(tuple(dims)))


def resample_transformed(field, transform):
    """Pull-back resampling: output voxel x holds the input at t^-1(x)."""
    if abs(np.linalg.det(transform.matrix())) < 1e-300:
        raise ParameterError("transform is singular")
    centers = field.voxel_centers().reshape(-1, 3)
    vals = sample_trilinear(field, transform.apply_inverse(centers))
    return ScalarField(vals.reshape(field.dims))


# -- voxel-grid binary format -------------------------------------------


def save_grid(field, path):
    """Write the 16-byte-header voxel-grid binary format.

    Layout: 12-byte magic + uint32 version, dims as three little-endian
    uint32, channel count (1 or 3) as uint32, then channel-interleaved
    little-endian float32 values in x-fastest order.
    """
    channels = 3 if field.data.ndim == 4 else 1
    data = field.data if channels == 3 else field.data[..., None]
    # x-fastest: transpose so x becomes the innermost spatial axis
    payload = np.ascontiguousarray(
        data.transpose(2, 1, 0, 3), dtype="<f4"
    )
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", GRID_VERSION))
        fh.write(struct.pack("<3I", *field.dims))
        fh.write(struct.pack("<I", channels))
        fh.write(payload.tobytes())


def load_grid(path):
    """Read the voxel-grid binary format; returns ScalarField or VectorField."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16 or header[:12] != GRID_MAGIC:
            raise MeshFormatError(f"{path}: bad grid magic")
        (version,) = struct.unpack("<I", header[12:16])
        if version != GRID_VERSION:
            raise MeshFormatError(f"{path}: unsupported grid version {version}")
        meta = fh.read(16)
        if len(meta) < 16:
            raise MeshFormatError(f"{path}: truncated grid header")
        nx, ny, nz, channels = struct.unpack("<4I", meta)
        if channels not in (1, 3):
            raise MeshFormatError(f"{path}: channel count must be 1 or 3, got {channels}")
        raw = fh.read()
    expected = nx * ny * nz * channels * 4
    if len(raw) != expected:
        raise MeshFormatError(
            f"{path}: payload is {len(raw)} bytes, expected {expected} for dims ({nx}, {ny}, {nz})"
        )
    arr = np.frombuffer(raw, dtype="<f4").reshape(nz, ny, nx, channels)
    arr = arr.transpose(2, 1, 0, 3).astype(np.float64)
    if channels == 1:
        return ScalarField(np.ascontiguousarray(arr[..., 0]))
    return VectorField(np.ascontiguousarray(arr))
