"""Procedural point-cloud benchmark: 8 shape families, deterministic corruption
(noise / spherical-cap occlusion / clutter), farthest-point patchification,
few-shot episodes, and tiny binary + ASCII interchange formats.

Every sample is a pure function of (DatasetSpec, index): the per-sample Rng is
derived by splitting the DatasetSpec seed, and each pipeline stage (shape, rotation,
noise, occlusion, clutter, resampling) owns its own child stream so that
toggling one stage never perturbs another.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .tensor import Rng

FAMILIES = (
    "sphere",
    "box",
    "cylinder",
    "cone",
    "torus",
    "plane_cluster",
    "capsule",
    "ellipsoid",
)

ROTATIONS = ("none", "z", "so3")

# per-sample stream indices, one per pipeline stage
_S_SHAPE, _S_ROTATE, _S_NOISE, _S_OCCLUDE, _S_CLUTTER, _S_RESAMPLE = range(6)

_SNAP = 1e-12  # normalize() treats transforms this close to identity as exact


@dataclass
class PointCloud:
    points: np.ndarray  # (P, 3) float64
    label: int = -1
    sample_id: int = -1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DataError(f"point cloud must be (P, 3), got {self.points.shape}")
        if len(self.points) == 0:
            raise DataError("empty point cloud")


@dataclass(frozen=True)
class DatasetSpec:
    points: int = 512
    noise_sigma: float = 0.0
    occlusion: float = 0.0
    clutter: float = 0.0
    rotation: str = "z"
    seed: int = 0
    size: int = 320
    index_offset: int = 0
    families: tuple = FAMILIES

    def __post_init__(self):
        if self.points < 2:
            raise DataError("points per cloud must be >= 2")
        for name, v in (("noise_sigma", self.noise_sigma), ("occlusion", self.occlusion),
                        ("clutter", self.clutter)):
            if not 0.0 <= v < 1.0:
                raise DataError(f"{name} must lie in [0, 1), got {v}")
        if self.rotation not in ROTATIONS:
            raise DataError(f"rotation must be one of {ROTATIONS}, got {self.rotation!r}")
        if self.size < 0:
            raise DataError("split size must be >= 0")
        unknown = set(self.families) - set(FAMILIES)
        if unknown or not self.families:
            raise DataError(f"unknown shape families: {sorted(unknown)}")


class Dataset:
    """In-memory split: clouds plus a label vector."""

    def __init__(self, clouds):
        self.clouds = list(clouds)
        self.labels = np.array([c.label for c in self.clouds], dtype=np.int64)

    def __len__(self):
        return len(self.clouds)

    def class_indices(self):
        out = {}
        for i, lbl in enumerate(self.labels):
            out.setdefault(int(lbl), []).append(i)
        return out


# ----------------------------------------------------------------- normalization

def normalize(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale the farthest point to radius 1.

    Sub-_SNAP corrections are skipped so that re-normalizing an already
    normalized cloud is a bit-exact no-op.
    """
    points = np.asarray(points, dtype=np.float64)
    c = points.mean(axis=0)
    if np.max(np.abs(c)) <= _SNAP * max(1.0, np.max(np.abs(points))):
        c = np.zeros(3)
    shifted = points - c
    r = np.max(np.sqrt((shifted * shifted).sum(axis=1)))
    if r == 0.0:
        raise DataError("cannot normalize a zero-extent cloud")
    if abs(r - 1.0) <= _SNAP:
        r = 1.0
    return shifted / r


# ----------------------------------------------------------------- shape samplers

def _unit_directions(rng: Rng, n: int) -> np.ndarray:
    v = rng.normal((n, 3))
    norms = np.sqrt((v * v).sum(axis=1, keepdims=True))
    norms[norms == 0.0] = 1.0
    return v / norms


def _weighted(rng: Rng, weights, n: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    edges = np.cumsum(w / w.sum())
    return np.searchsorted(edges, rng.uniform(0.0, 1.0, (n,)), side="right").clip(0, len(w) - 1)


def _sphere(rng, n):
    # antipodal pairs: the centroid is exactly zero, so after normalization
    # every point sits at radius 1
    half = (n + 1) // 2
    v = _unit_directions(rng, half)
    return np.concatenate([v, -v], axis=0)[:n]


def _box(rng, n):
    ext = rng.uniform(0.4, 1.0, (3,))
    face_axis = np.array([0, 0, 1, 1, 2, 2])
    areas = [ext[1] * ext[2], ext[1] * ext[2], ext[0] * ext[2],
             ext[0] * ext[2], ext[0] * ext[1], ext[0] * ext[1]]
    faces = _weighted(rng, areas, n)
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    pts = np.empty((n, 3))
    for i in range(n):
        axis = face_axis[faces[i]]
        sign = 1.0 if faces[i] % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[i, axis] = sign * ext[axis]
        pts[i, others[0]] = uv[i, 0] * ext[others[0]]
        pts[i, others[1]] = uv[i, 1] * ext[others[1]]
    return pts


def _cylinder(rng, n):
    r = float(rng.uniform(0.3, 0.6))
    h = float(rng.uniform(0.6, 1.0))
    lateral = 2.0 * np.pi * r * 2.0 * h
    cap = np.pi * r * r
    part = _weighted(rng, [lateral, cap, cap], n)
    theta = rng.uniform(0.0, 2.0 * np.pi, (n,))
    u = rng.uniform(0.0, 1.0, (n,))
    pts = np.empty((n, 3))
    for i in range(n):
        if part[i] == 0:
            pts[i] = [r * np.cos(theta[i]), r * np.sin(theta[i]), (2.0 * u[i] - 1.0) * h]
        else:
            rr = r * np.sqrt(u[i])
            z = h if part[i] == 1 else -h
            pts[i] = [rr * np.cos(theta[i]), rr * np.sin(theta[i]), z]
    return pts


def _cone(rng, n):
    r = float(rng.uniform(0.4, 0.8))
    h = float(rng.uniform(0.8, 1.6))
    slant = np.sqrt(r * r + h * h)
    part = _weighted(rng, [np.pi * r * slant, np.pi * r * r], n)
    theta = rng.uniform(0.0, 2.0 * np.pi, (n,))
    u = rng.uniform(0.0, 1.0, (n,))
    pts = np.empty((n, 3))
    for i in range(n):
        if part[i] == 0:  # lateral surface, area-uniform in distance from apex
            t = np.sqrt(u[i])
            pts[i] = [t * r * np.cos(theta[i]), t * r * np.sin(theta[i]), h * (1.0 - t)]
        else:
            rr = r * np.sqrt(u[i])
            pts[i] = [rr * np.cos(theta[i]), rr * np.sin(theta[i]), 0.0]
    return pts


def _torus(rng, n):
    major = 0.7
    minor = float(rng.uniform(0.2, 0.3))
    pts = np.empty((n, 3))
    got = 0
    while got < n:
        m = 2 * (n - got) + 8
        theta = rng.uniform(0.0, 2.0 * np.pi, (m,))
        accept = rng.uniform(0.0, 1.0, (m,)) <= (major + minor * np.cos(theta)) / (major + minor)
        theta = theta[accept][: n - got]
        phi = rng.uniform(0.0, 2.0 * np.pi, (len(theta),))
        ring = major + minor * np.cos(theta)
        pts[got:got + len(theta), 0] = ring * np.cos(phi)
        pts[got:got + len(theta), 1] = ring * np.sin(phi)
        pts[got:got + len(theta), 2] = minor * np.sin(theta)
        got += len(theta)
    return pts


def _plane_cluster(rng, n):
    planes = 3
    counts = [n // planes] * planes
    counts[0] += n - sum(counts)
    chunks = []
    for p in range(planes):
        center = rng.normal((3,), scale=0.35)
        basis = _random_rotation(rng)
        ext = rng.uniform(0.3, 0.8, (2,))
        uv = rng.uniform(-1.0, 1.0, (counts[p], 2)) * ext
        local = np.concatenate([uv, np.zeros((counts[p], 1))], axis=1)
        chunks.append(local @ basis.T + center)
    return np.concatenate(chunks, axis=0)


def _capsule(rng, n):
    r = float(rng.uniform(0.25, 0.45))
    h = float(rng.uniform(0.5, 0.9))
    lateral = 2.0 * np.pi * r * 2.0 * h
    hemi = 2.0 * np.pi * r * r
    part = _weighted(rng, [lateral, hemi, hemi], n)
    theta = rng.uniform(0.0, 2.0 * np.pi, (n,))
    u = rng.uniform(0.0, 1.0, (n,))
    dirs = _unit_directions(rng, n)
    pts = np.empty((n, 3))
    for i in range(n):
        if part[i] == 0:
            pts[i] = [r * np.cos(theta[i]), r * np.sin(theta[i]), (2.0 * u[i] - 1.0) * h]
        else:
            d = dirs[i].copy()
            d[2] = abs(d[2]) if part[i] == 1 else -abs(d[2])
            cap = h if part[i] == 1 else -h
            pts[i] = r * d + np.array([0.0, 0.0, cap])
    return pts


def _ellipsoid(rng, n):
    axes = np.array([1.0, float(rng.uniform(0.55, 0.75)), float(rng.uniform(0.3, 0.5))])
    return _unit_directions(rng, n) * axes


_SAMPLERS = {
    "sphere": _sphere,
    "box": _box,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "plane_cluster": _plane_cluster,
    "capsule": _capsule,
    "ellipsoid": _ellipsoid,
}


# ----------------------------------------------------------------- rotations

def _random_rotation(rng: Rng) -> np.ndarray:
    """Uniform SO(3) rotation from a normalized random quaternion."""
    q = rng.normal((4,))
    q /= np.sqrt((q * q).sum())
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _rotation_z(rng: Rng) -> np.ndarray:
    a = float(rng.uniform(0.0, 2.0 * np.pi))
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _apply_rotation(points, policy, rng):
    if policy == "none":
        return points
    rot = _rotation_z(rng) if policy == "z" else _random_rotation(rng)
    return points @ rot.T


# ----------------------------------------------------------------- corruption

def occlude_cap(points: np.ndarray, fraction: float, rng: Rng):
    """Remove the ``fraction`` of points deepest inside a random spherical cap.

    Returns (survivors, removed_mask, cap_direction).  Ties on the cap boundary
    resolve toward the lowest index.
    """
    if not 0.0 < fraction < 1.0:
        raise DataError(f"occlusion fraction must lie in (0, 1), got {fraction}")
    direction = _unit_directions(rng, 1)[0]
    dots = points @ direction
    m = int(np.ceil(fraction * len(points)))
    order = np.argsort(-dots, kind="stable")
    mask = np.zeros(len(points), dtype=bool)
    mask[order[:m]] = True
    return points[~mask], mask, direction


def _resample_to(points: np.ndarray, n: int, rng: Rng, jitter: float = 0.01) -> np.ndarray:
    """Pad back to ``n`` points by duplicating survivors with small jitter."""
    deficit = n - len(points)
    if deficit <= 0:
        return points[:n]
    picks = rng.choice(len(points), size=deficit, replace=True)
    dup = points[picks] + rng.normal((deficit, 3), scale=jitter)
    return np.concatenate([points, dup], axis=0)


def _uniform_ball(rng: Rng, n: int) -> np.ndarray:
    dirs = _unit_directions(rng, n)
    radii = rng.uniform(0.0, 1.0, (n,)) ** (1.0 / 3.0)
    return dirs * radii[:, None]


# ----------------------------------------------------------------- generation

def generate(spec: DatasetSpec, index: int) -> PointCloud:
    """Deterministically build sample ``index`` of the split described by spec."""
    if not 0 <= index < spec.size:
        raise DataError(f"index {index} out of range for split of size {spec.size}")
    label = index % len(spec.families)
    rng = Rng(spec.seed).split(spec.index_offset + index)

    n_clutter = int(round(spec.clutter * spec.points))
    n_object = spec.points - n_clutter
    pts = _SAMPLERS[spec.families[label]](rng.split(_S_SHAPE), n_object)
    pts = _apply_rotation(pts, spec.rotation, rng.split(_S_ROTATE))
    # canonicalize scale first so sigma/occlusion/clutter mean the same thing
    # for every family, then corrupt, then re-normalize
    pts = normalize(pts)
    if spec.noise_sigma > 0.0:
        pts = pts + rng.split(_S_NOISE).normal(pts.shape, scale=spec.noise_sigma)
    if spec.occlusion > 0.0:
        survivors, _, _ = occlude_cap(pts, spec.occlusion, rng.split(_S_OCCLUDE))
        pts = _resample_to(survivors, n_object, rng.split(_S_RESAMPLE))
    if n_clutter > 0:
        centroid = pts.mean(axis=0)
        radius = np.max(np.sqrt(((pts - centroid) ** 2).sum(axis=1)))
        ball = _uniform_ball(rng.split(_S_CLUTTER), n_clutter)
        pts = np.concatenate([pts, centroid + ball * 1.25 * radius], axis=0)
    return PointCloud(normalize(pts), label=label, sample_id=spec.index_offset + index)


def build_dataset(spec: DatasetSpec) -> Dataset:
    return Dataset(generate(spec, i) for i in range(spec.size))


# ----------------------------------------------------------------- patchification

def fps(points: np.ndarray, n: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; ties pick the lowest index."""
    count = len(points)
    if not 1 <= n <= count:
        raise DataError(f"fps asked for {n} of {count} points")
    if not 0 <= seed_index < count:
        raise DataError(f"fps seed index {seed_index} out of range")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = seed_index
    d2 = ((points - points[seed_index]) ** 2).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        cand = ((points - points[nxt]) ** 2).sum(axis=1)
        d2 = np.minimum(d2, cand)
    return chosen


def knn_group(points: np.ndarray, center_indices: np.ndarray, k: int):
    """k nearest neighbours of each center, coordinates made center-relative."""
    if not 1 <= k <= len(points):
        raise DataError(f"knn_group asked for k={k} of {len(points)} points")
    centers = points[center_indices]
    diff = centers[:, None, :] - points[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    neighbours = np.argsort(d2, axis=1, kind="stable")[:, :k]
    groups = points[neighbours] - centers[:, None, :]
    return groups, centers


def patchify(points: np.ndarray, n_patches: int, patch_size: int):
    centers_idx = fps(points, n_patches)
    return knn_group(points, centers_idx, patch_size)


# ----------------------------------------------------------------- augmentation

AUGMENTS = ("none", "scale-translate", "rotate")


def augment(points: np.ndarray, policy: str, rng: Rng) -> np.ndarray:
    if policy == "none":
        return np.array(points, copy=True)
    if policy == "scale-translate":
        s = float(rng.uniform(2.0 / 3.0, 3.0 / 2.0))
        t = rng.uniform(-0.2, 0.2, (3,))
        return points * s + t
    if policy == "rotate":
        return points @ _random_rotation(rng).T
    raise DataError(f"unknown augmentation policy {policy!r}")


# ----------------------------------------------------------------- few-shot

@dataclass
class FewShotEpisode:
    classes: list            # original labels, episode label = position
    support: list = field(default_factory=list)   # list[PointCloud]
    support_labels: np.ndarray = None
    query: list = field(default_factory=list)
    query_labels: np.ndarray = None


def sample_episode(dataset: Dataset, n_way: int, m_shot: int, rng: Rng,
                   query_per_class: int = 20) -> FewShotEpisode:
    by_class = dataset.class_indices()
    eligible = sorted(c for c, idx in by_class.items() if len(idx) >= m_shot + query_per_class)
    if len(eligible) < n_way:
        raise DataError(
            f"need {n_way} classes with >= {m_shot + query_per_class} samples, have {len(eligible)}"
        )
    picked = [eligible[i] for i in sorted(rng.choice(len(eligible), n_way, replace=False))]
    support, squery, slab, qlab = [], [], [], []
    for episode_label, cls in enumerate(picked):
        pool = by_class[cls]
        perm = rng.permutation(len(pool))
        take = [pool[j] for j in perm[: m_shot + query_per_class]]
        for i in take[:m_shot]:
            support.append(dataset.clouds[i])
            slab.append(episode_label)
        for i in take[m_shot:]:
            squery.append(dataset.clouds[i])
            qlab.append(episode_label)
    return FewShotEpisode(
        classes=picked,
        support=support,
        support_labels=np.array(slab, dtype=np.int64),
        query=squery,
        query_labels=np.array(qlab, dtype=np.int64),
    )


# ----------------------------------------------------------------- interchange

_PCB_MAGIC = b"PCB1"


def write_pcb(path, cloud: PointCloud) -> None:
    if not 0 <= cloud.label < 65536:
        raise DataError(f"pcb label must fit u16, got {cloud.label}")
    with open(path, "wb") as f:
        f.write(_PCB_MAGIC)
        f.write(struct.pack("<I", len(cloud.points)))
        f.write(cloud.points.astype("<f4").tobytes())
        f.write(struct.pack("<H", cloud.label))


def read_pcb(path) -> PointCloud:
    blob = Path(path).read_bytes()
    if blob[:4] != _PCB_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header")
    (count,) = struct.unpack("<I", blob[4:8])
    expected = 8 + count * 12 + 2
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    pts = np.frombuffer(blob, dtype="<f4", count=count * 3, offset=8).reshape(count, 3)
    (label,) = struct.unpack("<H", blob[8 + count * 12:])
    return PointCloud(pts.astype(np.float64), label=int(label))


def read_xyz_ascii(path) -> PointCloud:
    pts = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 'x y z', got {line!r}")
            try:
                pts.append([float(v) for v in parts])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric coordinate in {line!r}")
    if not pts:
        raise FormatError(f"{path}: no points found")
    return PointCloud(np.array(pts, dtype=np.float64))


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for relpath, label in entries:
            f.write(f"{relpath} {label}\n")


def load_manifest(manifest_path) -> Dataset:
    root = Path(manifest_path).parent
    clouds = []
    with open(manifest_path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                relpath, label = line.rsplit(" ", 1)
                cloud = read_pcb(root / relpath)
                cloud.label = int(label)
            except (ValueError, FormatError) as e:
                raise FormatError(f"{manifest_path}:{lineno}: {e}")
            clouds.append(cloud)
    if not clouds:
        raise DataError(f"{manifest_path}: empty manifest")
    return Dataset(clouds)
