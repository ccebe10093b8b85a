"""Triangle meshes, their differential quantities, and the global linear transform.

Meshes live in normalized image coordinates (the unit cube) and carry a
per-face structure label so losses can be evaluated per cardiac structure.
All operations are pure: meshes are frozen after construction and
transforms return new meshes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import (
    ConnectivityError,
    DegenerateNormalError,
    ParameterError,
    ValidationError,
)

DEFAULT_LABEL = "default"

_MIN_FACE_AREA = 1e-14


class TriangleMesh:
    """Immutable triangle mesh with per-face structure labels.

    Parameters
    ----------
    vertices : (n, 3) array_like of float
        Vertex positions, normally inside the unit cube.
    faces : (m, 3) array_like of int
        Vertex index triples with consistent winding (outward normals).
    face_labels : (m,) array_like of str, optional
        Structure name per face. Defaults to a single ``"default"`` label.
    """

    def __init__(self, vertices, faces, face_labels=None):
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        f = np.ascontiguousarray(faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must be (n, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValidationError(f"faces must be (m, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            bad = int(f.max() if f.max() >= len(v) else f.min())
            raise ValidationError(
                f"face index {bad} out of range for {len(v)} vertices"
            )
        same = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if same.any():
            raise ValidationError(
                f"degenerate faces (repeated vertex index): {np.nonzero(same)[0][:10].tolist()}"
            )
        if face_labels is None:
            labels = np.full(len(f), DEFAULT_LABEL, dtype=object)
        else:
            labels = np.asarray(face_labels, dtype=object)
            if labels.shape != (len(f),):
                raise ValidationError(
                    f"face_labels must have one entry per face, got {labels.shape}"
                )
        v.setflags(write=False)
        f.setflags(write=False)
        labels.setflags(write=False)
        self.vertices = v
        self.faces = f
        self.face_labels = labels

    # -- basic counts -------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def structures(self):
        """Sorted list of distinct structure labels."""
        return sorted(set(self.face_labels.tolist()))

    def faces_of(self, label):
        """Indices of the faces carrying ``label``."""
        return np.nonzero(self.face_labels == label)[0]

    def vertex_ids_of(self, label):
        """Sorted unique vertex indices incident to faces of ``label``."""
        fids = self.faces_of(label)
        return np.unique(self.faces[fids])

    # -- connectivity -------------------------------------------------

    def edges(self):
        """Unique undirected edges as a (k, 2) int array, each row sorted."""
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def euler_characteristic(self):
        return self.n_vertices - len(self.edges()) + self.n_faces

    def is_watertight(self, label=None):
        """True when every undirected edge borders exactly two faces."""
        faces = self.faces if label is None else self.faces[self.faces_of(label)]
        if len(faces) == 0:
            return False
        e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool((counts == 2).all())

    def check_winding(self):
        """Raise unless shared edges are traversed in opposite directions.

        Only edges bordered by exactly two faces are checked; this is the
        standard consistency condition for outward orientation on oriented
        manifold surfaces.
        """
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        key = np.sort(e, axis=1)
        order = np.lexsort((key[:, 1], key[:, 0]))
        ks = key[order]
        ds = e[order]
        same = (ks[:-1] == ks[1:]).all(axis=1)
        # within a run of identical undirected edges, directed copies must
        # alternate orientation; for 2-manifolds runs have length 2
        i = 0
        n = len(ks)
        while i < n:
            j = i + 1
            while j < n and same[j - 1]:
                j += 1
            if j - i == 2 and (ds[i] == ds[i + 1]).all():
                raise ValidationError(
                    f"inconsistent winding across edge {ks[i].tolist()}"
                )
            i = j

    # -- differential quantities --------------------------------------

    def face_cross(self):
        """Unnormalized face normals (v1-v0) x (v2-v0); |.| = 2 * area."""
        v0 = self.vertices[self.faces[:, 0]]
        v1 = self.vertices[self.faces[:, 1]]
        v2 = self.vertices[self.faces[:, 2]]
        return np.cross(v1 - v0, v2 - v0)

    def face_normals(self):
        """Unit face normals."""
        c = self.face_cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        if (n < 2.0 * _MIN_FACE_AREA).any():
            bad = int(np.argmin(n))
            raise DegenerateNormalError(f"face {bad} has near-zero area")
        return c / n

    def vertex_normals(self):
        """Area-weighted unit vertex normals.

        The unnormalized face cross product has magnitude twice the face
        area, so summing it over incident faces is exactly the
        area-weighted average up to normalization.
        """
        c = self.face_cross()
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], c)
        norms = np.linalg.norm(acc, axis=1)
        used = np.zeros(self.n_vertices, dtype=bool)
        used[self.faces.ravel()] = True
        bad = used & (norms < 2.0 * _MIN_FACE_AREA)
        if bad.any():
            raise DegenerateNormalError(
                f"vertex {int(np.nonzero(bad)[0][0])} has no usable incident face area"
            )
        out = np.zeros_like(acc)
        out[used] = acc[used] / norms[used, None]
        return out

    def _adjacency(self):
        e = self.edges()
        n = self.n_vertices
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(n, n)
        )

    def uniform_laplacian(self):
        """Per-vertex mean of one-ring neighbors minus the vertex itself."""
        adj = self._adjacency()
        deg = np.asarray(adj.sum(axis=1)).ravel()
        if (deg == 0).any():
            raise ConnectivityError(
                f"isolated vertex {int(np.nonzero(deg == 0)[0][0])}"
            )
        return adj @ self.vertices / deg[:, None] - self.vertices

    # -- derived meshes -----------------------------------------------

    def with_vertices(self, vertices):
        """Same topology and labels with replaced vertex positions."""
        return TriangleMesh(vertices, self.faces, self.face_labels)

    def flipped(self):
        """Reversed winding (normals negated)."""
        return TriangleMesh(
            self.vertices, self.faces[:, [0, 2, 1]], self.face_labels
        )

    def submesh(self, label):
        """Faces of one structure with compacted vertex indexing."""
        fids = self.faces_of(label)
        if len(fids) == 0:
            raise ValidationError(f"no faces labeled {label!r}")
        vids = np.unique(self.faces[fids])
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[vids] = np.arange(len(vids))
        return TriangleMesh(
            self.vertices[vids], remap[self.faces[fids]], self.face_labels[fids]
        )

    def merged(self, other):
        """Concatenation of two meshes (labels preserved)."""
        faces = np.concatenate([self.faces, other.faces + self.n_vertices])
        return TriangleMesh(
            np.concatenate([self.vertices, other.vertices]),
            faces,
            np.concatenate([self.face_labels, other.face_labels]),
        )


@dataclass(frozen=True)
class LinearTransform:
    """9-parameter global transform: per-axis scale, Euler rotation, translation.

    Applied to a point ``p`` as ``R (S (p - origin)) + origin + translation``
    (scale, then rotate, then translate, all about the image center).
    Rotation uses intrinsic XYZ Euler angles in radians.
    """

    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    ORIGIN = np.array([0.5, 0.5, 0.5])

    def __post_init__(self):
        for name in ("scale", "rotation", "translation"):
            val = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            object.__setattr__(self, name, val)
        if (self.scale <= 0).any():
            raise ParameterError(f"scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_params(cls, params):
        """Build from the flat 9-vector (scale, rotation, translation)."""
        p = np.asarray(params, dtype=np.float64).reshape(9)
        return cls(scale=p[:3], rotation=p[3:6], translation=p[6:9])

    def params(self):
        return np.concatenate([self.scale, self.rotation, self.translation])

    def rotation_matrix(self):
        a, b, c = self.rotation
        return _rot_x(a) @ _rot_y(b) @ _rot_z(c)

    def rotation_matrix_derivatives(self):
        """dR/d(angle) for each of the three Euler angles."""
        a, b, c = self.rotation
        rx, ry, rz = _rot_x(a), _rot_y(b), _rot_z(c)
        return (
            _drot_x(a) @ ry @ rz,
            rx @ _drot_y(b) @ rz,
            rx @ ry @ _drot_z(c),
        )

    def matrix(self):
        """Linear part ``R @ diag(scale)`` (determinant > 0 by construction)."""
        return self.rotation_matrix() * self.scale[None, :]

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.ORIGIN) @ self.matrix().T + self.ORIGIN + self.translation

    def apply_inverse(self, points):
        """Analytic inverse map ``S^-1 R^T (p - origin - translation) + origin``."""
        pts = np.asarray(points, dtype=np.float64)
        rel = (pts - self.ORIGIN - self.translation) @ self.rotation_matrix()
        return rel / self.scale[None, :] + self.ORIGIN


def _rot_x(a):
    ca, sa = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])


def _rot_y(a):
    ca, sa = np.cos(a), np.sin(a)
    return np.array([[ca, 0, sa], [0, 1, 0], [-sa, 0, ca]])


def _rot_z(a):
    ca, sa = np.cos(a), np.sin(a)
    return np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])


def _drot_x(a):
    ca, sa = np.cos(a), np.sin(a)
    return np.array([[0, 0, 0], [0, -sa, -ca], [0, ca, -sa]])


def _drot_y(a):
    ca, sa = np.cos(a), np.sin(a)
    return np.array([[-sa, 0, ca], [0, 0, 0], [-ca, 0, -sa]])


def _drot_z(a):
    ca, sa = np.cos(a), np.sin(a)
    return np.array([[-sa, -ca, 0], [ca, -sa, 0], [0, 0, 0]])


def apply_linear_transform(mesh, transform):
    """Transform every vertex; topology, labels, and winding are unchanged."""
    return mesh.with_vertices(transform.apply(mesh.vertices))
