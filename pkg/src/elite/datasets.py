"""KITTI-format readers/writers and a deterministic synthetic scene generator."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError, GenerationError
from .geometry import CameraModel

IGNORE = 0xFFFF  # semantic id for "no label"
INVALID = 0  # instance id for "no instance"


@dataclass
class LabelImage:
    semantic: np.ndarray  # H x W int64
    instance: np.ndarray  # H x W int64

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.int64)
        self.instance = np.asarray(self.instance, dtype=np.int64)
        if self.semantic.shape != self.instance.shape or self.semantic.ndim != 2:
            raise ContractError("semantic and instance images must share a 2-D shape")

    @property
    def height(self):
        return self.semantic.shape[0]

    @property
    def width(self):
        return self.semantic.shape[1]

    @classmethod
    def empty(cls, height, width):
        return cls(np.full((height, width), IGNORE), np.full((height, width), INVALID))

    def labeled(self):
        return self.semantic != IGNORE

    def labeled_count(self) -> int:
        return int(self.labeled().sum())


@dataclass(frozen=True)
class Rect:
    """Inclusive pixel rectangle painted with one instance."""

    x0: int
    y0: int
    x1: int
    y1: int
    semantic: int
    instance: int
    depth: float


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3 uint8
    cloud: np.ndarray  # N x 4 float64
    point_semantic: np.ndarray
    point_instance: np.ndarray
    cam: CameraModel
    class_count: int
    rects: tuple = ()
    background_depth: float | None = None

    def __post_init__(self):
        n = len(self.cloud)
        if len(self.point_semantic) != n or len(self.point_instance) != n:
            raise ContractError("one label per point required")
        sem = np.asarray(self.point_semantic)
        if np.any((sem >= self.class_count) & (sem != IGNORE)):
            raise ContractError("point class id out of range")


# --------------------------------------------------------------------------
# KITTI / SemanticKITTI files


def read_kitti_points(path) -> np.ndarray:
    if os.path.getsize(path) % 16:
        raise FormatError(f"{path}: size is not a multiple of 16 bytes")
    return np.fromfile(path, dtype="<f4").reshape(-1, 4).astype(np.float64)


def write_kitti_points(path, cloud) -> None:
    np.asarray(cloud, dtype="<f4").reshape(-1, 4).tofile(path)


def encode_label_words(semantic, instance) -> np.ndarray:
    semantic = np.asarray(semantic, dtype=np.int64)
    instance = np.asarray(instance, dtype=np.int64)
    if np.any((semantic < 0) | (semantic > 0xFFFF) | (instance < 0) | (instance > 0xFFFF)):
        raise ContractError("label ids must fit in 16 bits")
    return ((instance << 16) | semantic).astype("<u4")


def decode_label_words(words):
    words = np.asarray(words, dtype=np.uint32).astype(np.int64)
    return words & 0xFFFF, words >> 16


def read_kitti_labels(path):
    if os.path.getsize(path) % 4:
        raise FormatError(f"{path}: size is not a multiple of 4 bytes")
    return decode_label_words(np.fromfile(path, dtype="<u4"))


def write_kitti_labels(path, semantic, instance) -> None:
    encode_label_words(semantic, instance).reshape(-1).tofile(path)


def write_label_image(path, labels: LabelImage) -> None:
    write_kitti_labels(path, labels.semantic.reshape(-1), labels.instance.reshape(-1))


def read_label_image(path, height, width) -> LabelImage:
    sem, inst = read_kitti_labels(path)
    if sem.size != height * width:
        raise FormatError(f"{path}: expected {height * width} label words, found {sem.size}")
    return LabelImage(sem.reshape(height, width), inst.reshape(height, width))


def _parse_calib(path):
    entries = {}
    with open(path) as fh:
        for line in fh:
            if ":" not in line:
                continue
            key, rest = line.split(":", 1)
            try:
                entries[key.strip()] = np.array([float(t) for t in rest.split()])
            except ValueError as exc:
                raise FormatError(f"{path}: bad numbers for {key.strip()}") from exc
    return entries


def read_calib(path, width: int, height: int) -> CameraModel:
    """Reduce KITTI ``P2`` / ``Tr`` to a pinhole model with a folded-in offset."""
    entries = _parse_calib(path)
    for key in ("P2", "Tr"):
        if key not in entries:
            raise FormatError(f"{path}: missing {key}")
        if entries[key].size != 12:
            raise FormatError(f"{path}: {key} needs 12 values")
    p2 = entries["P2"].reshape(3, 4)
    tr = np.vstack([entries["Tr"].reshape(3, 4), [0.0, 0.0, 0.0, 1.0]])
    offset = np.eye(4)
    offset[:3, 3] = np.linalg.solve(p2[:, :3], p2[:, 3])
    return CameraModel(
        fx=float(p2[0, 0]),
        fy=float(p2[1, 1]),
        cx=float(p2[0, 2]),
        cy=float(p2[1, 2]),
        width=int(width),
        height=int(height),
        extrinsic=offset @ tr,
    )


def write_calib(path, cam: CameraModel) -> None:
    p2 = np.array([[cam.fx, 0.0, cam.cx, 0.0], [0.0, cam.fy, cam.cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    with open(path, "w") as fh:
        fh.write("P2: " + " ".join(repr(float(x)) for x in p2.ravel()) + "\n")
        fh.write("Tr: " + " ".join(repr(float(x)) for x in cam.extrinsic[:3].ravel()) + "\n")


# --------------------------------------------------------------------------
# PPM


def label_palette(n: int) -> np.ndarray:
    """Fixed visualisation colours for class ids 0..n-1."""
    rng = np.random.default_rng(12345)
    pal = rng.integers(40, 256, size=(max(n, 1), 3)).astype(np.uint8)
    return pal[:n]


def colorize(labels, class_count: int | None = None) -> np.ndarray:
    sem = labels.semantic if isinstance(labels, LabelImage) else np.asarray(labels, dtype=np.int64)
    valid = sem != IGNORE
    if class_count is None:
        class_count = int(sem[valid].max()) + 1 if valid.any() else 1
    pal = label_palette(class_count)
    out = np.zeros(sem.shape + (3,), dtype=np.uint8)
    out[valid] = pal[sem[valid] % len(pal)]
    return out


def write_ppm(image, path, class_count: int | None = None) -> None:
    """Binary P6. Label images are colourised; ignored pixels are black."""
    if isinstance(image, LabelImage) or np.asarray(image).ndim == 2:
        image = colorize(image, class_count)
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError(f"{path}: only 8-bit P6 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3).copy()


# --------------------------------------------------------------------------
# synthetic scenes

# LiDAR (x forward, y left, z up) to camera (x right, y down, z forward).
_LIDAR_TO_CAM = np.array(
    [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, -0.08], [1.0, 0.0, 0.0, -0.27], [0.0, 0.0, 0.0, 1.0]]
)


@dataclass(frozen=True)
class SynthParams:
    width: int = 128
    height: int = 96
    class_count: int = 4
    instances: int = 4
    points_per_class: int = 8
    sparsity: float = 0.05
    intensity_noise: float = 0.15
    max_retries: int = 500

    def __post_init__(self):
        if self.class_count < 2:
            raise ContractError("class_count must be at least 2")
        if self.class_count > 64:
            raise ContractError("class_count above 64 has no separable flat palette")
        if not 0 < self.sparsity <= 1:
            raise ContractError("sparsity must be in (0, 1]")
        if self.instances < 0 or self.points_per_class < 0:
            raise ContractError("counts must be non-negative")


def class_colors(class_count: int) -> np.ndarray:
    """Flat colours on a 64-unit lattice; any two differ by >= 64 in some channel."""
    levels = np.array([16, 80, 144, 208])
    lattice = np.array([[levels[i // 16], levels[(i // 4) % 4], levels[i % 4]] for i in range(64)])
    picks = [(21 + 37 * c) % 64 for c in range(class_count)]
    return lattice[picks].astype(np.uint8)


def _place_rects(rng, p: SynthParams):
    placed = []
    for k in range(p.instances):
        cls = 1 + k % (p.class_count - 1)
        for _ in range(p.max_retries):
            h = int(rng.integers(max(2, p.height // 8), max(3, p.height // 3) + 1))
            w = int(rng.integers(max(2, p.width // 8), max(3, p.width // 3) + 1))
            y0 = int(rng.integers(0, p.height - h + 1))
            x0 = int(rng.integers(0, p.width - w + 1))
            x1, y1 = x0 + w - 1, y0 + h - 1
            # one-pixel gap so rectangles never touch, even diagonally
            if all(x0 > r[2] + 1 or x1 < r[0] - 1 or y0 > r[3] + 1 or y1 < r[1] - 1 for r in placed):
                placed.append((x0, y0, x1, y1, cls, k + 1))
                break
        else:
            raise GenerationError(f"could not place rectangle {k} without overlap")
    return placed


def synth_scene(seed: int, params: SynthParams | None = None) -> Scene:
    p = params or SynthParams()
    rng = np.random.default_rng(seed)
    H, W, C = p.height, p.width, p.class_count
    colors = class_colors(C)

    sem_img = np.zeros((H, W), dtype=np.int64)
    inst_img = np.full((H, W), INVALID, dtype=np.int64)
    raw = _place_rects(rng, p)
    depth_order = rng.permutation(len(raw))
    rects = []
    for (x0, y0, x1, y1, cls, inst), d in zip(raw, depth_order):
        sem_img[y0 : y1 + 1, x0 : x1 + 1] = cls
        inst_img[y0 : y1 + 1, x0 : x1 + 1] = inst
        rects.append(Rect(x0, y0, x1, y1, cls, inst, 4.0 + 0.5 * float(d)))
    background_depth = 4.0 + 0.5 * len(raw) + 1.0
    image = colors[sem_img]

    depth_img = np.full((H, W), background_depth)
    for r in rects:
        depth_img[r.y0 : r.y1 + 1, r.x0 : r.x1 + 1] = r.depth

    n_target = int(round(p.sparsity * H * W))
    flat_sem = sem_img.ravel()
    chosen = []
    taken = np.zeros(H * W, dtype=bool)
    for c in range(C):
        pool = np.flatnonzero(flat_sem == c)
        k = min(p.points_per_class, len(pool))
        if k:
            pick = rng.choice(pool, size=k, replace=False)
            taken[pick] = True
            chosen.append(pick)
    rest = max(0, n_target - int(taken.sum()))
    if rest:
        pool = np.flatnonzero(~taken)
        chosen.append(rng.choice(pool, size=min(rest, len(pool)), replace=False))
    pix = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    rows, cols = np.divmod(pix, W)

    cam = CameraModel(fx=float(W), fy=float(W), cx=W / 2.0, cy=H / 2.0, width=W, height=H, extrinsic=_LIDAR_TO_CAM)
    jitter = rng.uniform(-0.3, 0.3, size=(len(pix), 2))
    xyz_cam = cam.unproject(cols + jitter[:, 0], rows + jitter[:, 1], depth_img[rows, cols])
    xyz = cam.to_lidar(xyz_cam)
    sem = sem_img[rows, cols]
    inst = inst_img[rows, cols]
    intensity = 0.2 + 0.6 * sem / (C - 1) + p.intensity_noise * rng.standard_normal(len(pix))
    # float32-representable so the velodyne .bin round trip is exact
    cloud = np.column_stack([xyz, np.clip(intensity, 0.0, 1.0)]).astype(np.float32).astype(np.float64)
    return Scene(image, cloud, sem, inst, cam, C, tuple(rects), background_depth)


def dense_labels(scene: Scene) -> LabelImage:
    """Per-pixel ground truth rasterised from the generator's rectangles."""
    H, W = scene.image.shape[:2]
    sem = np.zeros((H, W), dtype=np.int64)
    inst = np.full((H, W), INVALID, dtype=np.int64)
    for r in scene.rects:
        sem[r.y0 : r.y1 + 1, r.x0 : r.x1 + 1] = r.semantic
        inst[r.y0 : r.y1 + 1, r.x0 : r.x1 + 1] = r.instance
    return LabelImage(sem, inst)


# --------------------------------------------------------------------------
# scene directories: velodyne.bin, labels.label, image.ppm, calib.txt, meta.json


def write_scene_dir(path, scene: Scene) -> None:
    os.makedirs(path, exist_ok=True)
    write_kitti_points(os.path.join(path, "velodyne.bin"), scene.cloud)
    write_kitti_labels(os.path.join(path, "labels.label"), scene.point_semantic, scene.point_instance)
    write_ppm(scene.image, os.path.join(path, "image.ppm"))
    write_calib(os.path.join(path, "calib.txt"), scene.cam)
    meta = {
        "class_count": scene.class_count,
        "background_depth": scene.background_depth,
        "rects": [[r.x0, r.y0, r.x1, r.y1, r.semantic, r.instance, r.depth] for r in scene.rects],
    }
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def read_scene_dir(path) -> Scene:
    with open(os.path.join(path, "meta.json")) as fh:
        meta = json.load(fh)
    image = read_ppm(os.path.join(path, "image.ppm"))
    H, W = image.shape[:2]
    cloud = read_kitti_points(os.path.join(path, "velodyne.bin"))
    sem, inst = read_kitti_labels(os.path.join(path, "labels.label"))
    cam = read_calib(os.path.join(path, "calib.txt"), W, H)
    rects = tuple(Rect(int(a), int(b), int(c), int(d), int(s), int(i), float(z)) for a, b, c, d, s, i, z in meta["rects"])
    return Scene(image, cloud, sem, inst, cam, int(meta["class_count"]), rects, meta["background_depth"])


def subsample_point_labels(semantic, instance, fraction: float, rng):
    """Keep each point label with probability ``fraction``; the rest become ignore."""
    if not 0 < fraction <= 1:
        raise ContractError("label fraction must be in (0, 1]")
    semantic = np.asarray(semantic, dtype=np.int64)
    instance = np.asarray(instance, dtype=np.int64)
    if fraction == 1:
        return semantic.copy(), instance.copy()
    keep = rng.random(len(semantic)) < fraction
    return np.where(keep, semantic, IGNORE), np.where(keep, instance, INVALID)
