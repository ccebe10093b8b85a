"""Why the volume term exists: a thin shell fit with and without it.

A concentric two-surface shell is pulled toward a single sphere. Without
the volume term both surfaces chase the sphere and the wall thins; the
divergence-based penalty makes that compression expensive and keeps the
wall open. Scaled down from the acceptance-gate configuration so it runs
in about two minutes.
"""

import numpy as np

from meshflow.fit import FitConfig, fit_flow, fit_linear
from meshflow.integrate import IntegrationConfig
from meshflow.losses import LossWeights
from meshflow.mesh import LinearTransform, TriangleMesh, apply_linear_transform
from meshflow.primitives import concentric_shell, icosphere
from meshflow.quality import detect_self_intersections, shell_thickness

CENTER = (0.5, 0.5, 0.5)


def split_surfaces(mesh, n_outer):
    def compact(faces):
        vids = np.unique(faces)
        remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
        remap[vids] = np.arange(len(vids))
        return TriangleMesh(mesh.vertices[vids], remap[faces])

    return compact(mesh.faces[n_outer:]), compact(mesh.faces[:n_outer])


def run(volume_weight):
    template = concentric_shell(0.24, 0.25, CENTER, 3, label="shell")
    target = apply_linear_transform(
        icosphere(0.28, CENTER, 3, label="shell"),
        LinearTransform(rotation=(0.3, 0.2, 0.1)),
    )
    cfg = FitConfig(
        weights=LossWeights(volume=volume_weight),
        field_dims=(48, 48, 48),
        lr_flow=0.05,
        max_iters_flow=60,
        integration=IntegrationConfig(n_steps=30, dt=0.1),
    )
    lin = fit_linear(template, target, cfg)
    res = fit_flow(template, target, lin, cfg)
    deformed = template.with_vertices(res.trace.final_positions)
    inner, outer = split_surfaces(deformed, template.n_faces // 2)
    tmin, tmean = shell_thickness(inner, outer)
    sif = detect_self_intersections(deformed)
    print(f"  volume weight {volume_weight}: wall thickness "
          f"min {tmin:.4f} mean {tmean:.4f} (template 0.0100), "
          f"self-intersecting faces {len(sif.sif_faces)}")


def main():
    print("fitting with the standard volume weight")
    run(LossWeights().volume)
    print("fitting with the volume term disabled")
    run(0.0)


if __name__ == "__main__":
    main()
