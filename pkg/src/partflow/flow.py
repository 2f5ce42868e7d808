"""Flow module: refined matching probabilities plus pairwise displacements
in, dense deformation flow on the first shape out.

The (N, N, 4) stack of probabilities and displacements runs through a
PairNet: a PointNetC pools each row over the second shape into a code,
and a PointNet++S over the first shape's geometry decodes codes into
per-point 3D flow. The soft-argmax decoding of the matching matrix is
kept as a diagnostic baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T

PAIR_CODE_DIM = 256  # row code width at reference scale


@dataclass
class FlowField:
    vectors: T.Tensor  # (N, 3)

    def numpy(self):
        return np.asarray(self.vectors.data, dtype=np.float64)


@dataclass(frozen=True)
class FlowSpecs:
    pair_c: nn.PointNetCSpec
    pair_pp: nn.PointNetPPSpec


def build_specs(n_points, width_scale=1.0):
    w = lambda *widths: nn.scale_widths(widths, width_scale)
    c = lambda n: nn.scale_count(n, n_points)
    g = lambda cap: nn.scale_count(cap, n_points, minimum=4)
    pair_c = nn.PointNetCSpec("flow/pair_c", widths=w(32, 64, 128, PAIR_CODE_DIM))
    pair_pp = nn.PointNetPPSpec("flow/pair_pp", (
        nn.SGStage(c(256), 0.2, g(32), w(64, 64, 128)),
        nn.SGStage(c(128), 0.4, g(32), w(128, 128, 256)),
        nn.SGStage(1, None, None, w(256, 512, 1024)),
        nn.IPStage(w(256, 256)),
        nn.IPStage(w(256, 128)),
        nn.IPStage(w(128, 128, 64)),
    ), out_dim=3)
    return FlowSpecs(pair_c=pair_c, pair_pp=pair_pp)


def init_params(store, specs: FlowSpecs, rng):
    nn.init_pairnet(store, specs.pair_c, specs.pair_pp, 4, rng)


def displacement_matrix(positions_p, positions_q):
    """(N, N, 3) matrix of x_j^(q) - x_i^(p)."""
    p = np.asarray(positions_p, dtype=np.float64)
    q = np.asarray(positions_q, dtype=np.float64)
    return q[None, :, :] - p[:, None, :]


def flow_forward(store, specs: FlowSpecs, refined, disp, positions_p, fps_seed=0):
    """Predict the deformation flow field on shape P."""
    refined = T.astensor(refined)
    n = refined.shape[0]
    if refined.data.ndim != 2 or refined.shape[1] != disp.shape[1] or disp.shape[:2] != (n, disp.shape[1]):
        raise T.ShapeError(f"refined {refined.shape} and displacements {np.shape(disp)} disagree")
    stack = T.concat([T.reshape(refined, (n, disp.shape[1], 1)),
                      T.Tensor(np.asarray(disp, dtype=np.float32))], axis=-1)
    vectors = nn.pairnet(store, specs.pair_c, specs.pair_pp, stack,
                         positions_p, fps_seed=fps_seed)
    return FlowField(vectors)


def soft_argmax_flow(refined, positions_p, positions_q):
    """Baseline decoding: matching point = row-weighted average of Q,
    flow = matching point minus the P point."""
    m = np.asarray(refined, dtype=np.float64)
    q = np.asarray(positions_q, dtype=np.float64)
    p = np.asarray(positions_p, dtype=np.float64)
    weights = m / np.maximum(m.sum(axis=1, keepdims=True), 1e-12)
    return weights @ q - p


def write_flow(path, positions, flow):
    """Rows of "x y z fx fy fz" for visualization."""
    positions = np.asarray(positions)
    flow = np.asarray(flow)
    with open(path, "w") as fh:
        for p, f in zip(positions, flow):
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {f[0]:.9g} {f[1]:.9g} {f[2]:.9g}\n")
