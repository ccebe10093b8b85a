"""Mesh-quality and accuracy auditing.

Self-intersecting-face (SIF) detection uses an exact triangle-triangle
predicate (epsilon 1e-12 on normalized coordinates) over AABB-pruned
candidate pairs, and classifies each intersecting pair as an adjacent
fold (element inversion) or a non-adjacent contact (surface
interpenetration). Meshes convert to binary segmentations by a
parity ray test, segmentations compare via Dice/Jaccard/ASSD/Hausdorff,
and targets can be ingested from segmentations via marching cubes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .errors import UndefinedMetricError, ValidationError
from .fields import ScalarField, mesh_distance
from .mesh import TriangleMesh

EPS = 1e-12


@dataclass(frozen=True)
class SifReport:
    """Outcome of a self-intersection scan.

    ``pairs`` holds ``(face_i, face_j, kind)`` with kind one of
    ``"interpenetration"`` (disjoint topology) or ``"inversion"``
    (faces sharing a vertex or edge that overlap beyond the shared
    simplex). A face in any intersecting pair counts once toward
    ``sif_faces``.
    """

    total_faces: int
    sif_faces: tuple
    pairs: tuple

    @property
    def sif_percent(self):
        if self.total_faces == 0:
            return 0.0
        return 100.0 * len(self.sif_faces) / self.total_faces

    def as_dict(self):
        return {
            "total_faces": self.total_faces,
            "sif_faces": list(self.sif_faces),
            "sif_percent": self.sif_percent,
            "pairs": [[int(i), int(j), kind] for i, j, kind in self.pairs],
        }


@dataclass(frozen=True)
class SegmentationMetrics:
    dice: float
    jaccard: float
    assd: float
    hausdorff: float

    def as_dict(self):
        return {
            "dice": self.dice,
            "jaccard": self.jaccard,
            "assd": self.assd,
            "hausdorff": self.hausdorff,
        }


# -- triangle-triangle intersection ------------------------------------


def _plane_dists(tri_ref, pts):
    """Geometric signed distances of ``pts`` to the planes of ``tri_ref``.

    tri_ref: (m, 3, 3); pts: (m, k, 3) -> (m, k)
    """
    n = np.cross(tri_ref[:, 1] - tri_ref[:, 0], tri_ref[:, 2] - tri_ref[:, 0])
    norm = np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    nhat = n / norm
    return np.einsum("mkc,mc->mk", pts - tri_ref[:, None, 0], nhat), nhat


def _interval_on_line(direction, tri, dists):
    """Extent of each triangle's plane-crossing set along ``direction``.

    Candidates are vertices lying on the other plane (|d| <= EPS) and
    edge crossings with strict sign change. Returns (tmin, tmax, valid).
    """
    m = len(tri)
    t_vert = np.einsum("mkc,mc->mk", tri, direction)  # (m, 3)
    cand_t = np.full((m, 6), np.nan)
    cand_ok = np.zeros((m, 6), dtype=bool)
    on_plane = np.abs(dists) <= EPS
    cand_t[:, :3] = t_vert
    cand_ok[:, :3] = on_plane
    edges = ((0, 1), (1, 2), (2, 0))
    for e, (i, j) in enumerate(edges):
        di, dj = dists[:, i], dists[:, j]
        crossing = ((di > EPS) & (dj < -EPS)) | ((di < -EPS) & (dj > EPS))
        denom = np.where(crossing, di - dj, 1.0)
        frac = di / denom
        cand_t[:, 3 + e] = t_vert[:, i] + frac * (t_vert[:, j] - t_vert[:, i])
        cand_ok[:, 3 + e] = crossing
    tmin = np.where(cand_ok, cand_t, np.inf).min(axis=1)
    tmax = np.where(cand_ok, cand_t, -np.inf).max(axis=1)
    valid = cand_ok.any(axis=1)
    return tmin, tmax, valid


def _coplanar_overlap(t1, t2, nhat):
    """Strict 2D overlap of coplanar triangle pairs (separating axes).

    Touching along a point or a shared edge counts as no overlap; the
    interiors must overlap by more than EPS on every axis.
    """
    m = len(t1)
    # project to the plane: build an orthonormal 2D basis per pair
    a = np.where(
        np.abs(nhat[:, [0]]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    )
    u = np.cross(nhat, a)
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
    v = np.cross(nhat, u)
    p = np.stack(
        [np.einsum("mkc,mc->mk", t1, u), np.einsum("mkc,mc->mk", t1, v)], axis=-1
    )  # (m, 3, 2)
    q = np.stack(
        [np.einsum("mkc,mc->mk", t2, u), np.einsum("mkc,mc->mk", t2, v)], axis=-1
    )
    overlap = np.ones(m, dtype=bool)
    for tri in (p, q):
        for e in range(3):
            edge = tri[:, (e + 1) % 3] - tri[:, e]
            axis = np.stack([-edge[:, 1], edge[:, 0]], axis=-1)
            norm = np.maximum(np.linalg.norm(axis, axis=1, keepdims=True), 1e-300)
            axis = axis / norm
            pp = np.einsum("mkd,md->mk", p, axis)
            qq = np.einsum("mkd,md->mk", q, axis)
            gap_ok = (np.minimum(pp.max(axis=1), qq.max(axis=1))
                      - np.maximum(pp.min(axis=1), qq.min(axis=1))) > EPS
            overlap &= gap_ok
    return overlap


def _pairs_intersect(tri_a, tri_b, shared_counts):
    """Exact proper-intersection predicate for batches of triangle pairs.

    ``shared_counts`` is the number of shared vertex *indices* per pair
    (0, 1, or 2); pairs sharing topology intersect only when their
    geometric intersection exceeds the shared simplex.
    """
    m = len(tri_a)
    out = np.zeros(m, dtype=bool)
    if m == 0:
        return out
    d_b, n1 = _plane_dists(tri_a, tri_b)  # dists of B's verts to plane(A)
    d_a, n2 = _plane_dists(tri_b, tri_a)

    coplanar = (np.abs(d_b) <= EPS).all(axis=1)
    one_side_b = (d_b > EPS).all(axis=1) | (d_b < -EPS).all(axis=1)
    one_side_a = (d_a > EPS).all(axis=1) | (d_a < -EPS).all(axis=1)

    # shared-edge pairs: off-plane apexes make the intersection exactly the
    # shared edge, so only the coplanar same-side fold can intersect more
    edge_pairs = shared_counts == 2
    if edge_pairs.any():
        out[edge_pairs] = _shared_edge_fold(
            tri_a[edge_pairs], tri_b[edge_pairs], coplanar[edge_pairs]
        )

    rest = ~edge_pairs
    cop = rest & coplanar
    if cop.any():
        ok = _coplanar_overlap(tri_a[cop], tri_b[cop], n1[cop])
        out[cop] = ok

    gen = rest & ~coplanar & ~one_side_a & ~one_side_b
    if gen.any():
        direction = np.cross(n1[gen], n2[gen])
        amin, amax, aval = _interval_on_line(direction, tri_a[gen], d_a[gen])
        bmin, bmax, bval = _interval_on_line(direction, tri_b[gen], d_b[gen])
        overlap = np.minimum(amax, bmax) - np.maximum(amin, bmin)
        out[gen] = aval & bval & (overlap > EPS)
    return out


def _shared_edge_fold(tri_a, tri_b, coplanar):
    """Coplanar edge-sharing pairs fold onto each other when both apexes
    lie strictly on the same side of the shared edge."""
    m = len(tri_a)
    out = np.zeros(m, dtype=bool)
    if not coplanar.any():
        return out
    for idx in np.nonzero(coplanar)[0]:
        pa = [tuple(p) for p in np.round(tri_a[idx], 15)]
        pb = [tuple(p) for p in np.round(tri_b[idx], 15)]
        shared = [p for p in pa if p in pb]
        if len(shared) != 2:
            continue
        apex_a = next(p for p in pa if p not in shared)
        apex_b = next(p for p in pb if p not in shared)
        a0 = np.array(shared[0])
        edge = np.array(shared[1]) - a0
        n = np.cross(
            tri_a[idx, 1] - tri_a[idx, 0], tri_a[idx, 2] - tri_a[idx, 0]
        )
        sa = np.cross(edge, np.array(apex_a) - a0) @ n
        sb = np.cross(edge, np.array(apex_b) - a0) @ n
        out[idx] = sa * sb > EPS
    return out


def _candidate_pairs(mesh):
    """Face pairs with overlapping axis-aligned bounding boxes (sweep)."""
    tri = mesh.vertices[mesh.faces]
    lo = tri.min(axis=1) - EPS
    hi = tri.max(axis=1) + EPS
    order = np.argsort(lo[:, 0], kind="stable")
    lo_s, hi_s = lo[order], hi[order]
    xs = lo_s[:, 0]
    pairs_i = []
    pairs_j = []
    for a in range(len(order)):
        stop = np.searchsorted(xs, hi_s[a, 0], side="right")
        if stop <= a + 1:
            continue
        cand = np.arange(a + 1, stop)
        ok = (
            (lo_s[cand, 1] <= hi_s[a, 1]) & (hi_s[cand, 1] >= lo_s[a, 1])
            & (lo_s[cand, 2] <= hi_s[a, 2]) & (hi_s[cand, 2] >= lo_s[a, 2])
        )
        sel = cand[ok]
        if len(sel):
            pairs_i.append(np.full(len(sel), a))
            pairs_j.append(sel)
    if not pairs_i:
        return np.empty((0, 2), dtype=np.int64)
    pi = order[np.concatenate(pairs_i)]
    pj = order[np.concatenate(pairs_j)]
    pairs = np.stack([np.minimum(pi, pj), np.maximum(pi, pj)], axis=1)
    return pairs


def detect_self_intersections(mesh, brute_force=False, batch=200_000):
    """Report all face pairs whose triangles properly intersect.

    Pairs sharing a vertex or edge count only when the intersection
    exceeds the shared simplex and are classified as element inversion;
    disjoint intersecting pairs are surface interpenetration.
    ``brute_force=True`` scans all pairs instead of pruning by bounding
    boxes (identical results, used as the oracle in tests).
    """
    faces = mesh.faces
    if brute_force:
        n = len(faces)
        ii, jj = np.triu_indices(n, k=1)
        pairs = np.stack([ii, jj], axis=1)
    else:
        pairs = _candidate_pairs(mesh)

    hit_pairs = []
    tri = mesh.vertices[faces]
    for start in range(0, len(pairs), batch):
        chunk = pairs[start : start + batch]
        fa, fb = faces[chunk[:, 0]], faces[chunk[:, 1]]
        shared = (fa[:, :, None] == fb[:, None, :]).any(axis=2).sum(axis=1)
        hits = _pairs_intersect(tri[chunk[:, 0]], tri[chunk[:, 1]], shared)
        for k in np.nonzero(hits)[0]:
            kind = "inversion" if shared[k] > 0 else "interpenetration"
            hit_pairs.append((int(chunk[k, 0]), int(chunk[k, 1]), kind))

    sif = sorted({i for i, _, _ in hit_pairs} | {j for _, j, _ in hit_pairs})
    return SifReport(
        total_faces=len(faces),
        sif_faces=tuple(sif),
        pairs=tuple(sorted(hit_pairs)),
    )


# -- voxelization ------------------------------------------------------

# fixed sub-voxel ray offsets avoid edge/vertex ties deterministically
_RAY_SHIFT = (np.sqrt(2.0) - 1.0) * 1e-7, (np.sqrt(3.0) - 1.0) * 1e-7


def voxelize(mesh, dims):
    """Binary occupancy at voxel centers via +z parity ray casting.

    Each structure must be watertight on its own; structures are
    voxelized independently and unioned.
    """
    dims = tuple(int(d) for d in dims)
    occ = np.zeros(dims, dtype=bool)
    for label in mesh.structures():
        if not mesh.is_watertight(label):
            raise ValidationError(f"structure {label!r} is not watertight")
        occ |= _voxelize_faces(mesh.vertices, mesh.faces[mesh.faces_of(label)], dims)
    return ScalarField(occ.astype(np.float64))


def _voxelize_faces(vertices, faces, dims):
    nx, ny, nz = dims
    hx, hy, hz = 1.0 / nx, 1.0 / ny, 1.0 / nz
    cx = (np.arange(nx) + 0.5) * hx + _RAY_SHIFT[0]
    cy = (np.arange(ny) + 0.5) * hy + _RAY_SHIFT[1]
    # hist[ix, iy, b] counts ray hits whose height falls in z-bin b
    hist = np.zeros((nx, ny, nz + 1), dtype=np.int64)
    tri = vertices[faces]
    for t in tri:
        (x0, y0, z0), (x1, y1, z1), (x2, y2, z2) = t
        det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(det) < 1e-30:
            continue  # vertical triangle: measure-zero for shifted rays
        i0 = np.searchsorted(cx, min(x0, x1, x2))
        i1 = np.searchsorted(cx, max(x0, x1, x2), side="right")
        j0 = np.searchsorted(cy, min(y0, y1, y2))
        j1 = np.searchsorted(cy, max(y0, y1, y2), side="right")
        if i0 >= i1 or j0 >= j1:
            continue
        gx, gy = np.meshgrid(cx[i0:i1], cy[j0:j1], indexing="ij")
        b1 = ((gx - x0) * (y2 - y0) - (x2 - x0) * (gy - y0)) / det
        b2 = ((x1 - x0) * (gy - y0) - (gx - x0) * (y1 - y0)) / det
        inside = (b1 >= 0.0) & (b2 >= 0.0) & (b1 + b2 <= 1.0)
        if not inside.any():
            continue
        zhit = z0 + b1 * (z1 - z0) + b2 * (z2 - z0)
        zbin = np.clip(np.floor(zhit / hz + 0.5).astype(np.int64), 0, nz)
        ii, jj = np.nonzero(inside)
        np.add.at(hist, (ii + i0, jj + j0, zbin[inside]), 1)
    # a voxel is inside when an odd number of hits lie above its center
    above = np.cumsum(hist[:, :, ::-1], axis=2)[:, :, ::-1][:, :, 1:]
    return (above % 2) == 1


# -- overlap metrics ---------------------------------------------------


def _as_bool(field):
    return field.data > 0.5


def dice_jaccard(a, b):
    """Dice and Jaccard overlap of two binary fields of equal dims."""
    if a.dims != b.dims:
        raise ValidationError(f"dims mismatch: {a.dims} vs {b.dims}")
    av, bv = _as_bool(a), _as_bool(b)
    na, nb = int(av.sum()), int(bv.sum())
    if na == 0 and nb == 0:
        raise UndefinedMetricError("both segmentations are empty")
    inter = int((av & bv).sum())
    union = na + nb - inter
    dice = 2.0 * inter / (na + nb)
    jaccard = inter / union
    assert abs(jaccard - dice / (2.0 - dice)) < 1e-12
    return dice, jaccard


def _boundary_voxels(mask):
    """Occupied voxels with at least one empty 6-neighbor (borders count)."""
    interior = np.ones_like(mask)
    interior[1:] &= mask[:-1]
    interior[:-1] &= mask[1:]
    interior[:, 1:] &= mask[:, :-1]
    interior[:, :-1] &= mask[:, 1:]
    interior[:, :, 1:] &= mask[:, :, :-1]
    interior[:, :, :-1] &= mask[:, :, 1:]
    # out-of-bounds neighbors are empty
    border = np.zeros_like(mask)
    border[0] = border[-1] = True
    border[:, 0] = border[:, -1] = True
    border[:, :, 0] = border[:, :, -1] = True
    boundary = mask & (~interior | border)
    return np.argwhere(boundary).astype(np.float64)


def surface_distances(a, b, spacing=1.0):
    """(ASSD, Hausdorff) between segmentation boundaries.

    Boundaries are occupied voxels with an empty 6-neighbor; distances
    are between boundary voxel centers, in voxel units scaled by
    ``spacing``.
    """
    if a.dims != b.dims:
        raise ValidationError(f"dims mismatch: {a.dims} vs {b.dims}")
    av, bv = _as_bool(a), _as_bool(b)
    if not av.any() or not bv.any():
        raise UndefinedMetricError("surface distances need two non-empty segmentations")
    pa = _boundary_voxels(av)
    pb = _boundary_voxels(bv)
    dab, _ = cKDTree(pb).query(pa)
    dba, _ = cKDTree(pa).query(pb)
    assd = 0.5 * (dab.mean() + dba.mean()) * spacing
    hd = max(dab.max(), dba.max()) * spacing
    return float(assd), float(hd)


def segmentation_metrics(a, b, spacing=1.0):
    dice, jac = dice_jaccard(a, b)
    assd, hd = surface_distances(a, b, spacing)
    return SegmentationMetrics(dice=dice, jaccard=jac, assd=assd, hausdorff=hd)


# -- marching cubes ----------------------------------------------------


def marching_cubes(seg, iso=0.5, smooth_iters=5, smooth_factor=0.5, label="default"):
    """Watertight triangle mesh of the iso-surface of a voxel field.

    The volume is zero-padded so surfaces close at the domain boundary;
    vertices come back in normalized coordinates. An optional uniform
    Laplacian smoothing pass (default 5 iterations) matches the usual
    treatment of segmentation-derived surfaces. An empty iso-surface
    yields an empty mesh (``n_faces == 0``), not an error.
    """
    padded = np.pad(seg.data, 1)
    if not (padded.min() < iso < padded.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(padded, level=iso)
    h = 1.0 / np.array(seg.dims)
    verts = (verts - 0.5) * h  # padded index -> voxel-center coordinates
    mesh = TriangleMesh(verts, faces.astype(np.int64),
                        np.full(len(faces), label, dtype=object))
    if _signed_volume(mesh) < 0:
        mesh = mesh.flipped()
    for _ in range(smooth_iters):
        mesh = mesh.with_vertices(
            mesh.vertices + smooth_factor * mesh.uniform_laplacian()
        )
    return mesh


def _signed_volume(mesh):
    tri = mesh.vertices[mesh.faces]
    return float(np.einsum("fi,fi->", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])) / 6.0)


def mesh_area(mesh):
    """Total surface area."""
    return float(0.5 * np.linalg.norm(mesh.face_cross(), axis=1).sum())


# -- shell thickness ---------------------------------------------------


def shell_thickness(inner, outer):
    """(min, mean) of per-vertex nearest surface distance from inner to outer."""
    if inner.n_vertices == 0 or outer.n_faces == 0:
        raise ValidationError("shell thickness requires non-empty meshes")
    d = mesh_distance(inner.vertices, outer)
    return float(d.min()), float(d.mean())
