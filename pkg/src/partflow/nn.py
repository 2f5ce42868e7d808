"""Point-set network blocks: PointNetC, PointNetS, PointNet++S, PairNet.

PointNetC maps a set to one vector (shared MLP then max pooling), and
accepts a leading batch axis so the same parameters can score many sets
at once. PointNetS returns per-point features with global context.
PointNet++S stacks sample/group stages and interpolation stages; a stage
with n=1 pools globally. PairNet runs a PointNetC along the second axis
of a pairwise matrix, then a PointNet++S over the first axis.

Hidden widths come from block specs; `scale_widths` shrinks them
uniformly for desk-scale runs, and SG sample counts / group caps shrink
with the point count relative to the reference resolution of 512.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from . import geom
from . import tensor as T

REFERENCE_POINTS = 512

_ACTIVATIONS = ("linear", "sigmoid", "relu")


class ParamStore(dict):
    """Maps layer names to weight/bias tensors."""

    def add_linear(self, prefix, fan_in, fan_out, rng):
        if f"{prefix}/w" in self:
            raise ValueError(f"duplicate parameter {prefix!r}")
        limit = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)
        # small positive bias keeps narrow relu layers from dying early
        b = np.full(fan_out, 0.01, dtype=np.float32)
        self[f"{prefix}/w"] = T.Tensor(w, requires_grad=True, name=f"{prefix}/w")
        self[f"{prefix}/b"] = T.Tensor(b, requires_grad=True, name=f"{prefix}/b")

    def linear(self, prefix):
        try:
            return self[f"{prefix}/w"], self[f"{prefix}/b"]
        except KeyError:
            raise KeyError(f"parameter {prefix!r} not built in this store") from None

    def grads(self):
        return {k: v.grad for k, v in self.items()}

    def zero_grad(self):
        for v in self.values():
            v.grad = None


def scale_widths(widths, scale):
    return tuple(max(1, round(w * scale)) for w in widths)


def scale_count(n, n_points, minimum=1):
    if n == 1:
        return 1
    return max(minimum, round(n * n_points / REFERENCE_POINTS))


# -- specs ---------------------------------------------------------------------

@dataclass(frozen=True)
class SGStage:
    n: int
    radius: Optional[float]
    cap: Optional[int]
    widths: Tuple[int, ...]

    def __post_init__(self):
        # radii live as float32 so checkpoint round trips are exact
        if self.radius is not None:
            object.__setattr__(self, "radius", float(np.float32(self.radius)))


@dataclass(frozen=True)
class IPStage:
    widths: Tuple[int, ...]


@dataclass(frozen=True)
class PointNetCSpec:
    name: str
    widths: Tuple[int, ...]
    post_widths: Tuple[int, ...] = ()
    out_dim: Optional[int] = None
    out_activation: str = "linear"


@dataclass(frozen=True)
class PointNetSSpec:
    name: str
    agg_widths: Tuple[int, ...]
    post_widths: Tuple[int, ...]
    out_dim: Optional[int] = None
    out_activation: str = "linear"


@dataclass(frozen=True)
class PointNetPPSpec:
    name: str
    stages: Tuple[Union[SGStage, IPStage], ...]
    out_dim: Optional[int] = None
    out_activation: str = "linear"

    def __post_init__(self):
        seen_ip = False
        n_sg = n_ip = 0
        for st in self.stages:
            if isinstance(st, SGStage):
                if seen_ip:
                    raise ValueError("SG stages must precede IP stages")
                n_sg += 1
            else:
                seen_ip = True
                n_ip += 1
        # IP stages, when present, must walk all the way back up
        if n_ip not in (0, n_sg):
            raise ValueError("IP stages must restore the original point count "
                             f"(got {n_sg} SG vs {n_ip} IP)")


# -- shared MLP ----------------------------------------------------------------

def _apply_activation(x, kind):
    if kind == "linear":
        return x
    if kind == "sigmoid":
        return T.sigmoid(x)
    if kind == "relu":
        return T.relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def init_mlp(store, prefix, in_dim, widths, rng, out_dim=None):
    dim = in_dim
    for i, w in enumerate(widths):
        store.add_linear(f"{prefix}/l{i}", dim, w, rng)
        dim = w
    if out_dim is not None:
        store.add_linear(f"{prefix}/out", dim, out_dim, rng)
        dim = out_dim
    return dim


def mlp(store, prefix, x, widths, out_dim=None, out_activation="linear"):
    h = x
    for i in range(len(widths)):
        w, b = store.linear(f"{prefix}/l{i}")
        h = T.relu(T.add(T.matmul(h, w), b))
    if out_dim is not None:
        w, b = store.linear(f"{prefix}/out")
        h = _apply_activation(T.add(T.matmul(h, w), b), out_activation)
    return h


# -- PointNetC -------------------------------------------------------------------

def init_pointnet_c(store, spec: PointNetCSpec, in_dim, rng):
    dim = init_mlp(store, f"{spec.name}/pre", in_dim, spec.widths, rng)
    if spec.post_widths or spec.out_dim is not None:
        dim = init_mlp(store, f"{spec.name}/post", dim, spec.post_widths, rng,
                       out_dim=spec.out_dim)
    return dim


def pointnet_c(store, spec: PointNetCSpec, x):
    """Set to vector; input (N, F) or batched (B, N, F)."""
    x = T.astensor(x)
    if x.data.ndim not in (2, 3):
        raise T.ShapeError(f"pointnet_c expects (N, F) or (B, N, F), got {x.shape}")
    squeeze = x.data.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    h = mlp(store, f"{spec.name}/pre", x, spec.widths)
    pooled = T.reduce_max(h, axis=1)
    if spec.post_widths or spec.out_dim is not None:
        pooled = mlp(store, f"{spec.name}/post", pooled, spec.post_widths,
                     out_dim=spec.out_dim, out_activation=spec.out_activation)
    if squeeze:
        pooled = T.reshape(pooled, pooled.shape[1:])
    return pooled


# -- PointNetS -------------------------------------------------------------------

def init_pointnet_s(store, spec: PointNetSSpec, in_dim, rng):
    agg_dim = init_mlp(store, f"{spec.name}/agg", in_dim, spec.agg_widths, rng)
    return init_mlp(store, f"{spec.name}/post", 2 * agg_dim, spec.post_widths, rng,
                    out_dim=spec.out_dim)


def pointnet_s(store, spec: PointNetSSpec, x):
    """Per-point features with global context; (N, F) or (B, N, F) input."""
    x = T.astensor(x)
    ndim = x.data.ndim
    if ndim not in (2, 3):
        raise T.ShapeError(f"pointnet_s expects (N, F) or (B, N, F), got {x.shape}")
    local = mlp(store, f"{spec.name}/agg", x, spec.agg_widths)
    pooled = T.reduce_max(local, axis=ndim - 2)
    wide = T.broadcast_to(T.reshape(pooled, pooled.shape[:-1] + (1, pooled.shape[-1])),
                          local.shape)
    both = T.concat([local, wide], axis=-1)
    return mlp(store, f"{spec.name}/post", both, spec.post_widths,
               out_dim=spec.out_dim, out_activation=spec.out_activation)


# -- PointNet++S -----------------------------------------------------------------

def _interp_weights(fine_pos, coarse_pos, k=3, eps=1e-8):
    """Inverse-distance weights over the k nearest coarse points."""
    k = min(k, coarse_pos.shape[0])
    d = np.linalg.norm(fine_pos[:, None, :] - coarse_pos[None, :, :], axis=2)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    nd = np.take_along_axis(d, idx, axis=1)
    w = 1.0 / (nd + eps)
    w = w / w.sum(axis=1, keepdims=True)
    return idx, w.astype(np.float32)


def _stage_dims(spec: PointNetPPSpec, in_dim):
    """Feature widths entering each stage, mirroring the forward pass."""
    sg = [st for st in spec.stages if isinstance(st, SGStage)]
    ip = [st for st in spec.stages if isinstance(st, IPStage)]
    dims = [in_dim]
    for st in sg:
        dims.append(st.widths[-1])
    ins = []
    for i, st in enumerate(sg):
        ins.append(("sg", i, dims[i] + 3))
    cur = dims[-1]
    for i, st in enumerate(ip):
        skip = dims[len(sg) - 1 - i]
        ins.append(("ip", i, cur + skip))
        cur = st.widths[-1]
    return ins, cur


def init_pointnetpp_s(store, spec: PointNetPPSpec, in_dim, rng):
    ins, out = _stage_dims(spec, in_dim)
    sg = [st for st in spec.stages if isinstance(st, SGStage)]
    ip = [st for st in spec.stages if isinstance(st, IPStage)]
    for kind, i, dim in ins:
        st = sg[i] if kind == "sg" else ip[i]
        init_mlp(store, f"{spec.name}/{kind}{i}", dim, st.widths, rng)
    if spec.out_dim is not None:
        store.add_linear(f"{spec.name}/head", out, spec.out_dim, rng)
    return spec.out_dim if spec.out_dim is not None else out


def pointnetpp_s(store, spec: PointNetPPSpec, positions, features, fps_seed=0):
    """Hierarchical per-point features; returns (N, F') for N input points.

    `positions` is a constant (N, 3) array; `features` is an (N, F) tensor
    or None when only geometry feeds the first stage.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if features is not None:
        features = T.astensor(features)
        if features.shape[0] != n:
            raise T.ShapeError(f"features ({features.shape[0]}) and positions ({n}) disagree")
    sg_stages = [st for st in spec.stages if isinstance(st, SGStage)]
    ip_stages = [st for st in spec.stages if isinstance(st, IPStage)]
    levels = [(positions, features)]
    for i, st in enumerate(sg_stages):
        cur_pos, cur_feat = levels[-1]
        if st.n > cur_pos.shape[0]:
            raise T.ShapeError(f"SG stage needs {st.n} centers but level has "
                               f"{cur_pos.shape[0]} points")
        if st.n == 1:
            centers = cur_pos.mean(axis=0, keepdims=True)
            rel = (cur_pos - centers).astype(np.float32)[None, :, :]
            if cur_feat is None:
                grouped = T.Tensor(rel)
            else:
                grouped = T.concat([T.reshape(cur_feat, (1,) + cur_feat.shape), T.Tensor(rel)], axis=-1)
        else:
            idx = geom.farthest_point_sample(cur_pos, st.n,
                                             seed_index=fps_seed if i == 0 else 0)
            centers = cur_pos[idx]
            groups = geom.ball_query(cur_pos, centers, st.radius, st.cap)
            # relative coordinates scaled to the ball radius, so group inputs
            # are unit-ish regardless of the stage scale
            rel = ((cur_pos[groups] - centers[:, None, :]) / st.radius).astype(np.float32)
            if cur_feat is None:
                grouped = T.Tensor(rel)
            else:
                flat = T.gather(cur_feat, groups.reshape(-1), axis=0)
                grouped = T.concat([
                    T.reshape(flat, (st.n, st.cap, cur_feat.shape[-1])),
                    T.Tensor(rel)], axis=-1)
        h = mlp(store, f"{spec.name}/sg{i}", grouped, st.widths)
        pooled = T.reduce_max(h, axis=1)
        levels.append((centers, pooled))
    for i, st in enumerate(ip_stages):
        coarse_pos, coarse_feat = levels.pop()
        fine_pos, fine_feat = levels[-1]
        idx, w = _interp_weights(fine_pos, coarse_pos)
        parts = []
        for k in range(idx.shape[1]):
            g = T.gather(coarse_feat, idx[:, k], axis=0)
            parts.append(T.mul(g, w[:, k:k + 1]))
        interp = parts[0]
        for p in parts[1:]:
            interp = T.add(interp, p)
        merged = interp if fine_feat is None else T.concat([interp, fine_feat], axis=-1)
        out = mlp(store, f"{spec.name}/ip{i}", merged, st.widths)
        levels[-1] = (fine_pos, out)
    _, final = levels[-1]
    if spec.out_dim is not None:
        w, b = store.linear(f"{spec.name}/head")
        final = _apply_activation(T.add(T.matmul(final, w), b), spec.out_activation)
    return final


# -- PairNet ---------------------------------------------------------------------

def init_pairnet(store, spec_c: PointNetCSpec, spec_pp: PointNetPPSpec, in_dim, rng):
    code_dim = init_pointnet_c(store, spec_c, in_dim, rng)
    return init_pointnetpp_s(store, spec_pp, code_dim, rng)


def pairnet(store, spec_c: PointNetCSpec, spec_pp: PointNetPPSpec,
            pair_matrix, positions, fps_seed=0):
    """Aggregate an (N, M, C) pairwise matrix along M, then run the
    hierarchical net over the N rows located at `positions`."""
    pair_matrix = T.astensor(pair_matrix)
    if pair_matrix.data.ndim != 3:
        raise T.ShapeError(f"pair matrix must be (N, M, C), got {pair_matrix.shape}")
    codes = pointnet_c(store, spec_c, pair_matrix)
    return pointnetpp_s(store, spec_pp, positions, codes, fps_seed=fps_seed)


# -- spec serialization ------------------------------------------------------------

def spec_to_vector(spec):
    """Numeric encoding of a block spec (variant goes into the entry name)."""
    act = _ACTIVATIONS.index
    if isinstance(spec, PointNetCSpec):
        vec = [len(spec.widths), *spec.widths, len(spec.post_widths), *spec.post_widths,
               -1 if spec.out_dim is None else spec.out_dim, act(spec.out_activation)]
        return "pointnetc", np.array(vec, dtype=np.float32)
    if isinstance(spec, PointNetSSpec):
        vec = [len(spec.agg_widths), *spec.agg_widths, len(spec.post_widths), *spec.post_widths,
               -1 if spec.out_dim is None else spec.out_dim, act(spec.out_activation)]
        return "pointnets", np.array(vec, dtype=np.float32)
    if isinstance(spec, PointNetPPSpec):
        vec = [len(spec.stages)]
        for st in spec.stages:
            if isinstance(st, SGStage):
                vec += [0, st.n, -1.0 if st.radius is None else st.radius,
                        -1 if st.cap is None else st.cap, len(st.widths), *st.widths]
            else:
                vec += [1, len(st.widths), *st.widths]
        vec += [-1 if spec.out_dim is None else spec.out_dim, act(spec.out_activation)]
        return "pointnetpps", np.array(vec, dtype=np.float32)
    raise TypeError(f"not a block spec: {spec!r}")


def spec_from_vector(name, variant, vec):
    vals = [float(v) for v in vec]
    act = _ACTIVATIONS

    def take(k):
        nonlocal vals
        out, vals = vals[:k], vals[k:]
        return out

    if variant == "pointnetc":
        (nw,) = take(1)
        widths = tuple(int(v) for v in take(int(nw)))
        (np_,) = take(1)
        post = tuple(int(v) for v in take(int(np_)))
        out_dim, a = take(2)
        return PointNetCSpec(name, widths, post,
                             None if out_dim < 0 else int(out_dim), act[int(a)])
    if variant == "pointnets":
        (nw,) = take(1)
        agg = tuple(int(v) for v in take(int(nw)))
        (np_,) = take(1)
        post = tuple(int(v) for v in take(int(np_)))
        out_dim, a = take(2)
        return PointNetSSpec(name, agg, post,
                             None if out_dim < 0 else int(out_dim), act[int(a)])
    if variant == "pointnetpps":
        (ns,) = take(1)
        stages = []
        for _ in range(int(ns)):
            (kind,) = take(1)
            if int(kind) == 0:
                n, radius, cap, nw = take(4)
                widths = tuple(int(v) for v in take(int(nw)))
                stages.append(SGStage(int(n), None if radius < 0 else radius,
                                      None if cap < 0 else int(cap), widths))
            else:
                (nw,) = take(1)
                stages.append(IPStage(tuple(int(v) for v in take(int(nw)))))
        out_dim, a = take(2)
        return PointNetPPSpec(name, tuple(stages),
                              None if out_dim < 0 else int(out_dim), act[int(a)])
    raise ValueError(f"unknown block variant {variant!r}")
