"""Synthetic meshes used by the demos and the test corpus."""

from __future__ import annotations

import numpy as np

from .mesh import DEFAULT_LABEL, TriangleMesh


def icosphere(radius=0.25, center=(0.5, 0.5, 0.5), subdivisions=2, label=DEFAULT_LABEL):
    """Subdivided icosahedron projected onto a sphere.

    Subdivision level 0 is the icosahedron (20 faces); each level
    quadruples the face count.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        verts, faces = _subdivide(verts, faces)
        verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    verts = verts * radius + np.asarray(center, dtype=np.float64)
    labels = np.full(len(faces), label, dtype=object)
    return TriangleMesh(verts, faces, labels)


def _subdivide(verts, faces):
    """Split every triangle into four, deduplicating midpoint vertices."""
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    key = np.sort(edges, axis=1)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    mids = 0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]])
    mid_idx = inverse.reshape(3, -1).T + len(verts)  # (m01, m12, m20) per face
    new_verts = np.concatenate([verts, mids])
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    m01, m12, m20 = mid_idx[:, 0], mid_idx[:, 1], mid_idx[:, 2]
    new_faces = np.concatenate(
        [
            np.stack([a, m01, m20], axis=1),
            np.stack([b, m12, m01], axis=1),
            np.stack([c, m20, m12], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ]
    )
    return new_verts, new_faces


def subdivided(mesh):
    """One loop-style topological subdivision of an arbitrary mesh.

    New vertices are edge midpoints (no smoothing), so the refined mesh
    lies on the same piecewise-linear surface.
    """
    verts, faces = _subdivide(mesh.vertices, mesh.faces)
    labels = np.repeat(mesh.face_labels[None, :], 4, axis=0).ravel()
    return TriangleMesh(verts, faces, labels)


def ellipsoid(semi_axes, center=(0.5, 0.5, 0.5), subdivisions=2, label=DEFAULT_LABEL):
    """Icosphere scaled per axis about its center."""
    sph = icosphere(1.0, (0.0, 0.0, 0.0), subdivisions, label)
    verts = sph.vertices * np.asarray(semi_axes, dtype=np.float64)
    return TriangleMesh(verts + np.asarray(center, dtype=np.float64), sph.faces, sph.face_labels)


def concentric_shell(
    inner_radius=0.24,
    outer_radius=0.25,
    center=(0.5, 0.5, 0.5),
    subdivisions=2,
    label=DEFAULT_LABEL,
):
    """Closed thin shell: outer sphere plus inner sphere with inward normals."""
    outer = icosphere(outer_radius, center, subdivisions, label)
    inner = icosphere(inner_radius, center, subdivisions, label).flipped()
    return outer.merged(inner)


def box(lo, hi, label=DEFAULT_LABEL):
    """Axis-aligned box as 12 triangles with outward winding."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array(
        [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
    )
    # corner index bit layout: (x << 2) | (y << 1) | z
    quads = [
        (0, 1, 3, 2),  # x = lo, inward x -> outward is -x
        (4, 6, 7, 5),  # x = hi
        (0, 4, 5, 1),  # y = lo
        (2, 3, 7, 6),  # y = hi
        (0, 2, 6, 4),  # z = lo
        (1, 5, 7, 3),  # z = hi
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append([a, b, c])
        faces.append([a, c, d])
    labels = np.full(12, label, dtype=object)
    return TriangleMesh(corners, np.array(faces, dtype=np.int64), labels)
