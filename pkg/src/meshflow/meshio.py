"""Mesh file I/O: ASCII OBJ, binary little-endian PLY, and label sidecars.

OBJ carries structure labels through ``o``/``g`` group lines. PLY has no
group concept, so labels ride in a JSON sidecar next to the mesh file
(``<path>.labels.json``) mapping structure names to half-open face-index
ranges ``[start, stop)``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import MeshFormatError, ValidationError
from .mesh import DEFAULT_LABEL, TriangleMesh

_PLY_DTYPES = {
    "char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2",
    "int": "i4", "uint": "u4", "float": "f4", "double": "f8",
    "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2",
    "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8",
}


def sidecar_path(path):
    return Path(str(path) + ".labels.json")


def load_mesh(path):
    """Load an OBJ or PLY mesh, inferring the format from the extension.

    Raises
    ------
    MeshFormatError
        On parse failures (message carries line/offset context).
    ValidationError
        When the parsed data violates mesh invariants (e.g. an
        out-of-range face index).
    """
    path = Path(path)
    if not path.exists():
        raise MeshFormatError(f"no such file: {path}")
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _load_obj(path)
    if suffix == ".ply":
        return _load_ply(path)
    raise MeshFormatError(f"unsupported mesh format {suffix!r} for {path}")


def save_mesh(mesh, path):
    """Save to OBJ or binary PLY (with label sidecar), by extension."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        _save_obj(mesh, path)
    elif suffix == ".ply":
        _save_ply(mesh, path)
    else:
        raise MeshFormatError(f"unsupported mesh format {suffix!r} for {path}")


# -- OBJ --------------------------------------------------------------


def _load_obj(path):
    vertices = []
    faces = []
    labels = []
    current = DEFAULT_LABEL
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: vertex needs 3 coords")
                try:
                    vertices.append([float(p) for p in parts[1:4]])
                except ValueError as exc:
                    raise MeshFormatError(f"{path}:{lineno}: {exc}") from exc
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshFormatError(
                        f"{path}:{lineno}: only triangular faces are supported"
                    )
                idx = []
                for p in parts[1:]:
                    tok = p.split("/")[0]
                    try:
                        i = int(tok)
                    except ValueError as exc:
                        raise MeshFormatError(f"{path}:{lineno}: {exc}") from exc
                    if i == 0:
                        raise MeshFormatError(
                            f"{path}:{lineno}: OBJ indices are 1-based"
                        )
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                faces.append(idx)
                labels.append(current)
            elif tag in ("o", "g"):
                current = parts[1] if len(parts) > 1 else DEFAULT_LABEL
            # vn/vt/usemtl/mtllib/s are ignored
    return TriangleMesh(
        np.array(vertices, dtype=np.float64).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        np.array(labels, dtype=object),
    )


def _save_obj(mesh, path):
    with open(path, "w") as fh:
        fh.write("# meshflow OBJ export\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        current = None
        for face, label in zip(mesh.faces, mesh.face_labels):
            if label != current:
                fh.write(f"o {label}\n")
                current = label
            fh.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")


# -- binary PLY -------------------------------------------------------


def _load_ply(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise MeshFormatError(f"{path}: not a PLY file (bad magic {magic!r})")
        fmt = None
        elements = []  # (name, count, [(prop_name, dtype, is_list, count_dtype)])
        while True:
            line = fh.readline()
            if not line:
                raise MeshFormatError(f"{path}: unexpected EOF in header")
            tokens = line.decode("ascii", errors="replace").split()
            if not tokens:
                continue
            if tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if not elements:
                    raise MeshFormatError(f"{path}: property before element")
                if tokens[1] == "list":
                    elements[-1][2].append(
                        (tokens[4], _PLY_DTYPES[tokens[3]], True, _PLY_DTYPES[tokens[2]])
                    )
                else:
                    elements[-1][2].append((tokens[2], _PLY_DTYPES[tokens[1]], False, None))
            elif tokens[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise MeshFormatError(
                f"{path}: only binary_little_endian PLY is supported, got {fmt}"
            )
        data = fh.read()

    offset = 0
    vertices = None
    faces = None
    for name, count, props in elements:
        if name == "vertex":
            if [p[0] for p in props[:3]] != ["x", "y", "z"] or any(
                p[2] for p in props
            ):
                raise MeshFormatError(f"{path}: unsupported vertex layout")
            dt = np.dtype([(p[0], "<" + p[1]) for p in props])
            end = offset + dt.itemsize * count
            rec = np.frombuffer(data[offset:end], dtype=dt)
            if len(rec) != count:
                raise MeshFormatError(f"{path}: truncated vertex data at byte {offset}")
            vertices = np.stack(
                [rec["x"], rec["y"], rec["z"]], axis=1
            ).astype(np.float64)
            offset = end
        elif name == "face":
            (pname, idt, is_list, cdt) = props[0]
            if not is_list or len(props) != 1:
                raise MeshFormatError(f"{path}: unsupported face layout")
            csize = np.dtype(cdt).itemsize
            isize = np.dtype(idt).itemsize
            faces = np.empty((count, 3), dtype=np.int64)
            for i in range(count):
                if offset + csize > len(data):
                    raise MeshFormatError(f"{path}: truncated face data at byte {offset}")
                n = int(np.frombuffer(data, dtype="<" + cdt, count=1, offset=offset)[0])
                offset += csize
                if n != 3:
                    raise MeshFormatError(
                        f"{path}: face {i} has {n} vertices; only triangles supported"
                    )
                faces[i] = np.frombuffer(data, dtype="<" + idt, count=3, offset=offset)
                offset += 3 * isize
        else:
            raise MeshFormatError(f"{path}: unsupported element {name!r}")
    if vertices is None or faces is None:
        raise MeshFormatError(f"{path}: missing vertex or face element")

    labels = _load_label_sidecar(path, len(faces))
    return TriangleMesh(vertices, faces, labels)


def _save_ply(mesh, path):
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {mesh.n_vertices}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        f"element face {mesh.n_faces}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f8").tobytes())
        for face in mesh.faces:
            fh.write(struct.pack("<B3i", 3, *face))
    _save_label_sidecar(mesh, path)


# -- label sidecar ----------------------------------------------------


def _save_label_sidecar(mesh, path):
    labels = mesh.face_labels
    if (labels == DEFAULT_LABEL).all():
        return
    ranges = {}
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            ranges.setdefault(str(labels[start]), []).append([start, i])
            start = i
    with open(sidecar_path(path), "w") as fh:
        json.dump(ranges, fh, indent=2)


def _load_label_sidecar(path, n_faces):
    sc = sidecar_path(path)
    if not sc.exists():
        return None
    with open(sc) as fh:
        ranges = json.load(fh)
    labels = np.full(n_faces, DEFAULT_LABEL, dtype=object)
    for name, spans in ranges.items():
        for start, stop in spans:
            if not (0 <= start <= stop <= n_faces):
                raise ValidationError(
                    f"{sc}: range [{start}, {stop}) out of bounds for {n_faces} faces"
                )
            labels[start:stop] = name
    return labels
