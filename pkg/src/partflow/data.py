"""Procedural articulated shape pairs with exact ground truth.

Templates are small kinematic trees of box/cylinder surface patches with
revolute or prismatic joints anchored on the contact regions. A pair
sample draws two articulation states, applies them to one shared set of
material surface points, perturbs the second shape's global pose, and
normalizes. Both clouds are scaled by the same factor (the first shape's
bounding-box diagonal) so every per-part map between them stays exactly
rigid; each cloud is then centered on its own bounding box. The first
shape's box has diagonal exactly 1, the second is close to 1.

Partial pairs cull the second shape with a z-buffer virtual scan; points
whose partner did not survive form the unmatched set, and visible filler
points from a denser pool pad the scan back to the target size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .geom import (PointCloud, RigidMotion, farthest_point_sample,
                   normalization_params, rot_exp)

DEAD_ZONE_REVOLUTE = math.radians(10.0)
PRISMATIC_RANGE = (0.1, 0.4)  # fraction of part length along the slide axis
INTERPENETRATION_LIMIT = 0.02


class GenerationError(RuntimeError):
    pass


# -- surface primitives ---------------------------------------------------------

@dataclass
class BoxPatch:
    half: np.ndarray
    pose_r: np.ndarray = field(default_factory=lambda: np.eye(3))
    pose_t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.half = np.asarray(self.half, dtype=np.float64)
        self.pose_r = np.asarray(self.pose_r, dtype=np.float64)
        self.pose_t = np.asarray(self.pose_t, dtype=np.float64)

    def area(self):
        a, b, c = self.half
        return 8.0 * (a * b + b * c + a * c)

    def sample_surface(self, rng, n):
        a, b, c = self.half
        face_areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b]) * 4.0
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        u = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        for axis in range(3):
            lo, hi = 2 * axis, 2 * axis + 1
            others = [i for i in range(3) if i != axis]
            for sign, f in ((1.0, lo), (-1.0, hi)):
                m = faces == f
                pts[m, axis] = sign * self.half[axis]
                pts[m, others[0]] = u[m, 0] * self.half[others[0]]
                pts[m, others[1]] = u[m, 1] * self.half[others[1]]
        return pts @ self.pose_r.T + self.pose_t

    def contains(self, points, shrink=0.9):
        local = (np.asarray(points) - self.pose_t) @ self.pose_r
        return (np.abs(local) <= self.half * shrink).all(axis=1)


@dataclass
class CylinderPatch:
    radius: float
    half_height: float
    pose_r: np.ndarray = field(default_factory=lambda: np.eye(3))
    pose_t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.pose_r = np.asarray(self.pose_r, dtype=np.float64)
        self.pose_t = np.asarray(self.pose_t, dtype=np.float64)

    def area(self):
        return 2 * math.pi * self.radius * (2 * self.half_height) \
            + 2 * math.pi * self.radius ** 2

    def sample_surface(self, rng, n):
        lateral = 2 * math.pi * self.radius * 2 * self.half_height
        cap = math.pi * self.radius ** 2
        which = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
        theta = rng.uniform(0, 2 * math.pi, size=n)
        pts = np.empty((n, 3))
        lat = which == 0
        pts[lat, 0] = self.radius * np.cos(theta[lat])
        pts[lat, 1] = self.radius * np.sin(theta[lat])
        pts[lat, 2] = rng.uniform(-self.half_height, self.half_height, size=lat.sum())
        for sign, sel in ((1.0, which == 1), (-1.0, which == 2)):
            r = self.radius * np.sqrt(rng.uniform(size=sel.sum()))
            pts[sel, 0] = r * np.cos(theta[sel])
            pts[sel, 1] = r * np.sin(theta[sel])
            pts[sel, 2] = sign * self.half_height
        return pts @ self.pose_r.T + self.pose_t

    def contains(self, points, shrink=0.9):
        local = (np.asarray(points) - self.pose_t) @ self.pose_r
        rho = np.hypot(local[:, 0], local[:, 1])
        return (rho <= self.radius * shrink) & (np.abs(local[:, 2]) <= self.half_height * shrink)


# -- joints and templates ----------------------------------------------------------

@dataclass(frozen=True)
class JointSpec:
    kind: str                 # "revolute" or "prismatic"
    axis: tuple
    anchor: tuple
    lo: float
    hi: float
    dead: float
    child: int
    parent: int = 0

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=np.float64)
        if abs(np.linalg.norm(a) - 1.0) > 1e-6:
            raise ValueError("joint axis must be a unit vector")
        if self.kind not in ("revolute", "prismatic"):
            raise ValueError(f"unknown joint kind {self.kind!r}")
        usable = (self.hi > self.dead) or (self.lo < -self.dead)
        if not usable:
            raise ValueError("joint range is entirely inside the dead zone")

    def motion(self, value):
        axis = np.asarray(self.axis)
        anchor = np.asarray(self.anchor)
        if self.kind == "prismatic":
            return RigidMotion(np.eye(3), axis * value)
        r = rot_exp(axis * value)
        return RigidMotion(r, anchor - r @ anchor)

    def sample(self, rng):
        for _ in range(64):
            v = rng.uniform(self.lo, self.hi)
            if abs(v) >= self.dead:
                return float(v)
        # range guarantees a usable side; fall back to its midpoint
        side = (self.dead + self.hi) / 2 if self.hi > self.dead else (self.lo - self.dead) / 2
        return float(side)


@dataclass
class ArticulatedTemplate:
    name: str
    parts: List
    joints: List[JointSpec]
    root: int = 0

    def __post_init__(self):
        if not 2 <= len(self.parts) <= 4:
            raise ValueError("templates carry 2 to 4 parts")
        children = {j.child for j in self.joints}
        if self.root in children or len(children) != len(self.joints):
            raise ValueError("joint graph must be a tree rooted at the root part")

    @property
    def kind(self):
        return "translation" if any(j.kind == "prismatic" for j in self.joints) else "rotation"

    def adjacent(self, i, j):
        return any({jt.parent, jt.child} == {i, j} for jt in self.joints)

    def part_transforms(self, params: Dict[int, float]) -> List[RigidMotion]:
        """World motion of every part for the given joint values."""
        motions = {self.root: RigidMotion()}
        pending = list(self.joints)
        while pending:
            progressed = False
            for jt in list(pending):
                if jt.parent in motions:
                    motions[jt.child] = motions[jt.parent].compose(jt.motion(params[jt.child]))
                    pending.remove(jt)
                    progressed = True
            if not progressed:
                raise ValueError("joint tree is disconnected")
        return [motions[i] for i in range(len(self.parts))]


def build_templates() -> Dict[str, ArticulatedTemplate]:
    """The desk-scale template library. Geometry is deliberately asymmetric
    so global context can disambiguate otherwise congruent local patches."""
    templates = {}

    base = BoxPatch(half=(0.50, 0.35, 0.04), pose_t=(0.0, 0.0, 0.04))
    lid = BoxPatch(half=(0.38, 0.025, 0.30), pose_t=(0.10, 0.35 - 0.025, 0.08 + 0.30))
    templates["hinge"] = ArticulatedTemplate("hinge", [base, lid], [
        JointSpec("revolute", (1.0, 0.0, 0.0), (0.10, 0.325, 0.08),
                  -math.radians(80), math.radians(80), DEAD_ZONE_REVOLUTE, child=1),
    ])

    shell = BoxPatch(half=(0.40, 0.35, 0.30), pose_t=(0.0, 0.0, 0.30))
    drawer_len = 2 * 0.32
    drawer = BoxPatch(half=(0.30, 0.32, 0.12), pose_t=(0.06, -0.38, 0.18))
    # anchor on the shell's front plane where it meets the drawer's top face
    templates["drawer"] = ArticulatedTemplate("drawer", [shell, drawer], [
        JointSpec("prismatic", (0.0, -1.0, 0.0), (0.06, -0.35, 0.30),
                  PRISMATIC_RANGE[0] * drawer_len, PRISMATIC_RANGE[1] * drawer_len,
                  0.0, child=1),
    ])

    r0 = rot_exp(np.array([0.0, 0.0, math.radians(25)]))
    r1 = rot_exp(np.array([0.0, 0.0, -math.radians(20)]))
    blade0 = BoxPatch(half=(0.45, 0.055, 0.02), pose_r=r0, pose_t=r0 @ (0.18, 0.0, 0.0))
    blade1 = BoxPatch(half=(0.38, 0.045, 0.02), pose_r=r1,
                      pose_t=r1 @ (0.15, 0.0, 0.0) + (0.0, 0.0, 0.042))
    templates["scissors"] = ArticulatedTemplate("scissors", [blade0, blade1], [
        JointSpec("revolute", (0.0, 0.0, 1.0), (0.0, 0.0, 0.021),
                  -math.radians(45), math.radians(45), DEAD_ZONE_REVOLUTE, child=1),
    ])

    chain_base = BoxPatch(half=(0.40, 0.30, 0.06), pose_t=(0.0, 0.0, 0.06))
    arm1 = CylinderPatch(radius=0.055, half_height=0.28, pose_t=(0.10, -0.22, 0.40))
    arm2 = CylinderPatch(radius=0.04, half_height=0.20, pose_t=(0.10, -0.22, 0.88))
    templates["chain"] = ArticulatedTemplate("chain", [chain_base, arm1, arm2], [
        JointSpec("revolute", (1.0, 0.0, 0.0), (0.10, -0.22, 0.12),
                  -math.radians(60), math.radians(60), DEAD_ZONE_REVOLUTE,
                  child=1, parent=0),
        JointSpec("revolute", (1.0, 0.0, 0.0), (0.10, -0.22, 0.68),
                  -math.radians(70), math.radians(70), DEAD_ZONE_REVOLUTE,
                  child=2, parent=1),
    ])
    return templates


# -- virtual scan -------------------------------------------------------------------

def zbuffer_visible(points, viewpoint, image=64):
    """Boolean visibility under a z-buffer from the viewpoint: the nearest
    point in each pixel of an image-plane grid survives."""
    points = np.asarray(points, dtype=np.float64)
    viewpoint = np.asarray(viewpoint, dtype=np.float64)
    lo, hi = points.min(axis=0), points.max(axis=0)
    if np.all(viewpoint >= lo) and np.all(viewpoint <= hi):
        raise ValueError("viewpoint lies inside the shape's bounding box")
    fwd = points.mean(axis=0) - viewpoint
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    up2 = np.cross(right, fwd)
    d = points - viewpoint
    z = d @ fwd
    if (z <= 0).any():
        raise ValueError("points behind the viewpoint")
    px = (d @ right) / z
    py = (d @ up2) / z
    eps = 1e-9
    ix = np.clip(((px - px.min()) / max(np.ptp(px), eps) * (image - 1)).round().astype(int), 0, image - 1)
    iy = np.clip(((py - py.min()) / max(np.ptp(py), eps) * (image - 1)).round().astype(int), 0, image - 1)
    cell = ix * image + iy
    order = np.lexsort((np.arange(len(points)), z))
    visible = np.zeros(len(points), dtype=bool)
    seen = set()
    for i in order:
        c = int(cell[i])
        if c not in seen:
            seen.add(c)
            visible[i] = True
    return visible


def virtual_scan(pc: PointCloud, viewpoint, n_points, image=64):
    """Cull a dense sample by visibility and resample the survivors to
    `n_points` by FPS. Returns (partial cloud, per-input survival flags)."""
    if len(pc) < 4 * n_points:
        raise ValueError(f"virtual scan needs a dense sample (>= {4 * n_points} points)")
    flags = zbuffer_visible(pc.positions, viewpoint, image=image)
    idx = np.nonzero(flags)[0]
    if idx.size < n_points:
        raise GenerationError("too few visible points to resample")
    keep = idx[farthest_point_sample(pc.positions[idx], n_points)]
    labels = None if pc.labels is None else pc.labels[keep]
    return PointCloud(pc.positions[keep], labels), flags


# -- pair generation ------------------------------------------------------------------

@dataclass(frozen=True)
class GenOptions:
    n_points: int = 128
    partial: bool = False
    dense_factor: int = 8
    max_pose_angle: float = math.radians(30)
    full_so3: bool = False
    scan_image: int = 64
    max_retries: int = 8


@dataclass
class PairSample:
    p: PointCloud
    q: PointCloud
    flow: np.ndarray           # (N, 3) on P
    pairs: np.ndarray          # (M, 2) of (P index, Q index)
    unmatched: np.ndarray      # indices into P with no partner on Q
    motions: List[RigidMotion]  # per part id, P frame -> Q frame
    template: str
    kind: str                  # articulation kind for the dataset ratio
    seed: Tuple[int, int]      # (root seed, pair index)
    params_a: Dict[int, float] = field(default_factory=dict)
    params_b: Dict[int, float] = field(default_factory=dict)
    options: "GenOptions" = None

    @property
    def n_parts(self):
        return len(self.motions)


def _allocate_counts(areas, total):
    areas = np.asarray(areas, dtype=np.float64)
    raw = areas / areas.sum() * total
    counts = np.floor(raw).astype(int)
    remainder = raw - counts
    for i in np.argsort(-remainder)[: total - counts.sum()]:
        counts[i] += 1
    return counts


def _sample_material(template, rng, n):
    """n surface points in the template's rest frame with part labels."""
    counts = _allocate_counts([p.area() for p in template.parts], n)
    pts, labels = [], []
    for part_id, (patch, c) in enumerate(zip(template.parts, counts)):
        pts.append(patch.sample_surface(rng, c))
        labels.append(np.full(c, part_id, dtype=np.int64))
    return np.concatenate(pts), np.concatenate(labels)


def _apply_parts(transforms, points, labels):
    out = np.empty_like(points)
    for part_id, motion in enumerate(transforms):
        sel = labels == part_id
        out[sel] = motion.apply(points[sel])
    return out


def _interpenetration(template, transforms, points, labels):
    """Fraction of points sitting inside a non-adjacent part's volume."""
    worst = 0.0
    n_parts = len(template.parts)
    for i in range(n_parts):
        sel = labels == i
        if not sel.any():
            continue
        pts = points[sel]
        for j in range(n_parts):
            if i == j or template.adjacent(i, j):
                continue
            inv = transforms[j].inverse()
            frac = float(template.parts[j].contains(inv.apply(pts)).mean())
            worst = max(worst, frac)
    return worst


def _random_rotation(rng, max_angle, full_so3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, math.pi if full_so3 else max_angle)
    return rot_exp(axis * angle)


def assemble_pair(template, material, labels, params_a, params_b, global_rot,
                  permutation, seed=(0, 0), partial_ctx=None):
    """Deterministic pair construction from explicit randomness.

    `partial_ctx`, when given, is (visible flags over material points,
    filler positions, filler labels) describing the virtual-scan result.
    """
    t_a = template.part_transforms(params_a)
    t_b = template.part_transforms(params_b)
    raw_a = _apply_parts(t_a, material, labels)
    raw_b = _apply_parts(t_b, material, labels)
    center_b_raw = raw_b.mean(axis=0)
    spin = RigidMotion(global_rot, center_b_raw - global_rot @ center_b_raw)
    raw_b = spin.apply(raw_b)

    c_a, diag = normalization_params(raw_a)
    scale = 1.0 / diag
    p_pos = (raw_a - c_a) * scale

    if partial_ctx is None:
        visible = np.ones(len(material), dtype=bool)
        filler_pos = np.zeros((0, 3))
        filler_labels = np.zeros(0, dtype=np.int64)
    else:
        visible, filler_pos, filler_labels = partial_ctx
        filler_pos = spin.apply(filler_pos) if len(filler_pos) else filler_pos

    vis_idx = np.nonzero(visible)[0]
    q_raw = np.concatenate([raw_b[vis_idx], filler_pos])
    q_labels_raw = np.concatenate([labels[vis_idx], filler_labels])
    c_b, _ = normalization_params(q_raw)
    q_pos_all = (q_raw - c_b) * scale
    if permutation is None:
        permutation = np.arange(len(q_raw))
    q_pos = q_pos_all[permutation]
    q_labels = q_labels_raw[permutation]

    # per-part motion in normalized coordinates: the shared scale keeps it rigid
    motions = []
    for part_id in range(len(template.parts)):
        c = spin.compose(t_b[part_id]).compose(t_a[part_id].inverse())
        motions.append(RigidMotion(c.rotation,
                                   scale * (c.rotation @ c_a + c.translation - c_b)))

    flow = np.empty_like(p_pos)
    for part_id, motion in enumerate(motions):
        sel = labels == part_id
        flow[sel] = motion.apply(p_pos[sel]) - p_pos[sel]

    inv_perm = np.argsort(permutation)
    pairs = np.stack([vis_idx, inv_perm[np.arange(vis_idx.size)]], axis=1)
    unmatched = np.nonzero(~visible)[0]

    sample = PairSample(
        p=PointCloud(p_pos, labels.copy()),
        q=PointCloud(q_pos, q_labels),
        flow=flow, pairs=pairs, unmatched=unmatched, motions=motions,
        template=template.name, kind=template.kind, seed=seed,
        params_a=dict(params_a), params_b=dict(params_b),
    )
    check_consistency(sample)
    return sample


def check_consistency(sample: PairSample, tol=1e-5):
    """Generation-time invariants: pairs agree with flow, and part motions
    reproduce partners exactly."""
    p, q = sample.p.positions, sample.q.positions
    if sample.pairs.size:
        src = sample.pairs[:, 0]
        dst = sample.pairs[:, 1]
        err = np.abs(q[dst] - (p[src] + sample.flow[src])).max()
        if err > tol:
            raise GenerationError(f"pair/flow inconsistency: {err:.2e}")
        labels = sample.p.labels
        for part_id, motion in enumerate(sample.motions):
            sel = labels[src] == part_id
            if not sel.any():
                continue
            err = np.abs(motion.apply(p[src[sel]]) - q[dst[sel]]).max()
            if err > tol:
                raise GenerationError(f"motion inconsistency on part {part_id}: {err:.2e}")
    both = np.concatenate([sample.pairs[:, 0], sample.unmatched])
    if np.unique(both).size != len(sample.p):
        raise GenerationError("matched and unmatched sets do not partition P")


def sample_pair(template: ArticulatedTemplate, rng, options: GenOptions = GenOptions(),
                seed=(0, 0)) -> PairSample:
    """Draw one training/eval pair from a template."""
    n = options.n_points
    for _ in range(options.max_retries):
        dense_n = options.dense_factor * n
        material_dense, labels_dense = _sample_material(template, rng, dense_n)
        params_a = {j.child: j.sample(rng) for j in template.joints}
        params_b = {j.child: j.sample(rng) for j in template.joints}
        t_a = template.part_transforms(params_a)
        t_b = template.part_transforms(params_b)
        bad = max(_interpenetration(template, t_a, _apply_parts(t_a, material_dense, labels_dense), labels_dense),
                  _interpenetration(template, t_b, _apply_parts(t_b, material_dense, labels_dense), labels_dense))
        if bad > INTERPENETRATION_LIMIT:
            continue
        sel = farthest_point_sample(_apply_parts(t_a, material_dense, labels_dense), n)
        material = material_dense[sel]
        labels = labels_dense[sel]
        global_rot = _random_rotation(rng, options.max_pose_angle, options.full_so3)

        partial_ctx = None
        if options.partial:
            raw_b_dense = _apply_parts(t_b, material_dense, labels_dense)
            _, diag_b = normalization_params(raw_b_dense)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            viewpoint = raw_b_dense.mean(axis=0) + direction * 2.5 * diag_b
            vis_dense = zbuffer_visible(raw_b_dense, viewpoint, image=options.scan_image)
            visible = vis_dense[sel]
            if visible.sum() < max(8, n // 4):
                continue
            pool = np.setdiff1d(np.nonzero(vis_dense)[0], sel)
            need = n - int(visible.sum())
            if need > pool.size:
                continue
            if need > 0:
                pick = pool[farthest_point_sample(raw_b_dense[pool], need)]
            else:
                pick = np.zeros(0, dtype=np.int64)
            partial_ctx = (visible, raw_b_dense[pick], labels_dense[pick])
        permutation = rng.permutation(n)
        sample = assemble_pair(template, material, labels, params_a, params_b,
                               global_rot, permutation, seed=seed,
                               partial_ctx=partial_ctx)
        sample.options = options
        return sample
    raise GenerationError(f"could not draw a valid articulation for {template.name!r}")


def _content_rng(seed, index):
    # separate streams for template selection and pair content, so a pair
    # can be replayed from its manifest without the selection draws
    return np.random.default_rng(np.random.SeedSequence([seed, index, 1]))


def generate_dataset(template_names, n_pairs, seed, options: GenOptions = GenOptions(),
                     library=None) -> List[PairSample]:
    """Deterministic dataset: each pair derives its own rng from
    (seed, index). Prismatic-kind templates are drawn with probability
    1/4, realizing the 1:3 translation:rotation ratio."""
    library = library or build_templates()
    chosen = [library[name] for name in template_names]
    prismatic = [t for t in chosen if t.kind == "translation"]
    revolute = [t for t in chosen if t.kind == "rotation"]
    samples = []
    for i in range(n_pairs):
        select = np.random.default_rng(np.random.SeedSequence([seed, i, 0]))
        if prismatic and revolute:
            group = prismatic if select.uniform() < 0.25 else revolute
        else:
            group = chosen
        template = group[select.integers(len(group))]
        samples.append(sample_pair(template, _content_rng(seed, i), options,
                                   seed=(seed, i)))
    return samples


# -- dataset I/O -----------------------------------------------------------------------

def _write_kv(path, mapping):
    with open(path, "w") as fh:
        for k, v in mapping.items():
            fh.write(f"{k} = {v}\n")


def _read_kv(path):
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _fmt_rows(rows):
    return "\n".join(" ".join(f"{v:.9g}" for v in row) for row in rows) + "\n"


def _parse_rows(path, width):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} fields, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return np.array(rows).reshape(-1, width)


def write_dataset(samples, path):
    """One directory per pair plus a replayable manifest."""
    from .geom import write_xyz
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    _write_kv(root / "dataset.txt", {
        "count": len(samples),
        "root_seed": samples[0].seed[0] if samples else 0,
    })
    for i, s in enumerate(samples):
        d = root / f"pair_{i:04d}"
        d.mkdir(exist_ok=True)
        write_xyz(d / "p.xyz", s.p)
        write_xyz(d / "q.xyz", s.q)
        (d / "flow.txt").write_text(_fmt_rows(s.flow))
        (d / "pairs.txt").write_text(
            "\n".join(f"{a} {b}" for a, b in s.pairs) + ("\n" if len(s.pairs) else ""))
        (d / "unmatched.txt").write_text(
            "\n".join(str(v) for v in s.unmatched) + ("\n" if len(s.unmatched) else ""))
        rows = [list(m.rotation.reshape(-1)) + list(m.translation) for m in s.motions]
        (d / "motions.txt").write_text(_fmt_rows(rows))
        opts = s.options or GenOptions(n_points=len(s.p))
        manifest = {
            "template": s.template,
            "kind": s.kind,
            "root_seed": s.seed[0],
            "index": s.seed[1],
            "n_points": opts.n_points,
            "partial": int(opts.partial),
            "dense_factor": opts.dense_factor,
            "max_pose_angle": repr(opts.max_pose_angle),
            "full_so3": int(opts.full_so3),
            "scan_image": opts.scan_image,
        }
        for k, v in sorted(s.params_a.items()):
            manifest[f"param_a_{k}"] = repr(v)
        for k, v in sorted(s.params_b.items()):
            manifest[f"param_b_{k}"] = repr(v)
        _write_kv(d / "manifest.txt", manifest)


def read_dataset(path) -> List[PairSample]:
    from .geom import read_xyz
    root = Path(path)
    meta = _read_kv(root / "dataset.txt")
    count = int(meta["count"])
    samples = []
    for i in range(count):
        d = root / f"pair_{i:04d}"
        try:
            p = read_xyz(d / "p.xyz")
            q = read_xyz(d / "q.xyz")
            flow = _parse_rows(d / "flow.txt", 3)
            pair_rows = _parse_rows(d / "pairs.txt", 2) if (d / "pairs.txt").read_text().strip() else np.zeros((0, 2))
            unmatched_text = (d / "unmatched.txt").read_text().split()
            motions_rows = _parse_rows(d / "motions.txt", 12)
            manifest = _read_kv(d / "manifest.txt")
        except (OSError, ValueError) as exc:
            raise ValueError(f"pair_{i:04d}: {exc}") from None
        motions = [RigidMotion(row[:9].reshape(3, 3), row[9:]) for row in motions_rows]
        params_a = {int(k[len("param_a_"):]): float(v) for k, v in manifest.items()
                    if k.startswith("param_a_")}
        params_b = {int(k[len("param_b_"):]): float(v) for k, v in manifest.items()
                    if k.startswith("param_b_")}
        samples.append(PairSample(
            p=p, q=q, flow=flow,
            pairs=pair_rows.astype(np.int64),
            unmatched=np.array([int(v) for v in unmatched_text], dtype=np.int64),
            motions=motions, template=manifest["template"], kind=manifest["kind"],
            seed=(int(manifest["root_seed"]), int(manifest["index"])),
            params_a=params_a, params_b=params_b,
        ))
    return samples


def replay_sample(manifest_path, library=None) -> PairSample:
    """Regenerate the exact sample a pair manifest describes."""
    manifest = _read_kv(manifest_path)
    library = library or build_templates()
    seed = int(manifest["root_seed"])
    index = int(manifest["index"])
    options = GenOptions(
        n_points=int(manifest["n_points"]),
        partial=bool(int(manifest["partial"])),
        dense_factor=int(manifest["dense_factor"]),
        max_pose_angle=float(manifest["max_pose_angle"]),
        full_so3=bool(int(manifest["full_so3"])),
        scan_image=int(manifest["scan_image"]),
    )
    return sample_pair(library[manifest["template"]], _content_rng(seed, index),
                       options, seed=(seed, index))
