"""Sparse label projection and two-stage promptable-segmenter pseudo-labelling.

Stage 1 turns a sparse label image into point prompts plus low-resolution
hint masks. Stage 2 runs a segmenter on every prompt, filters the candidate
masks by stability, suppresses duplicates with box NMS, labels each surviving
mask by majority vote over the sparse labels it covers, and paints the masks in
ascending order of predicted IoU.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import kernels
from .datasets import IGNORE, INVALID, LabelImage, Scene
from .errors import ContractError
from .geometry import project_points

PseudoLabel = LabelImage


@dataclass(frozen=True)
class PLGParams:
    lr_size: tuple | None = None  # None: a quarter of the image side lengths
    theta_h: float = 16.0
    theta_l: float = 1.0
    theta_stability: float = 0.9
    theta_box_nms: float = 0.7
    tau: float = 0.0
    delta: float = 1.0

    def __post_init__(self):
        if not self.theta_h > self.theta_l > 0:
            raise ContractError("need theta_h > theta_l > 0")
        if not 0 < self.theta_stability <= 1:
            raise ContractError("theta_stability must be in (0, 1]")
        if not 0 < self.theta_box_nms <= 1:
            raise ContractError("theta_box_nms must be in (0, 1]")
        if not self.delta > 0:
            raise ContractError("delta must be positive")
        if self.lr_size is not None:
            object.__setattr__(self, "lr_size", tuple(int(s) for s in self.lr_size))

    def resolve_lr_size(self, height, width):
        if self.lr_size is None:
            return max(1, height // 4), max(1, width // 4)
        return self.lr_size


@dataclass
class PromptSet:
    P: np.ndarray  # K x 2 low-res (row, col)
    M: np.ndarray  # K x H_lr x W_lr

    def __len__(self):
        return len(self.P)


@dataclass
class MaskCandidate:
    mask: np.ndarray
    iou_prediction: float
    stability: float
    box: tuple
    semantic: int = IGNORE
    instance: int = INVALID


class SegmenterPort(Protocol):
    def segment(self, image: np.ndarray, prompt: tuple, low_res_mask: np.ndarray) -> Sequence[tuple]:
        """Return exactly three ``(mask_logits, iou_prediction)`` pairs."""


# --------------------------------------------------------------------------
# stage 0: point-to-pixel ground truth


def ppc_gtg(scene: Scene) -> LabelImage:
    """Rasterise point labels at their projected pixels; nearest point wins."""
    H, W = scene.image.shape[:2]
    corr = project_points(scene.cloud, scene.cam)
    out = LabelImage.empty(H, W)
    winner = kernels.zbuffer(corr.u, corr.v, corr.depth, W, H)
    hit = winner >= 0
    pts = corr.point_index[winner[hit]]
    out.semantic[hit] = np.asarray(scene.point_semantic, dtype=np.int64)[pts]
    out.instance[hit] = np.asarray(scene.point_instance, dtype=np.int64)[pts]
    return out


# --------------------------------------------------------------------------
# stage 1


def lr_to_full(index, full: int, low: int):
    """Full-resolution index of the centre of a low-resolution cell."""
    return np.floor((np.asarray(index) + 0.5) * full / low).astype(np.int64)


def full_to_lr(index, full: int, low: int):
    return np.floor(np.asarray(index) * low / full).astype(np.int64)


def downsample_labels(labels: LabelImage, lr_size) -> LabelImage:
    H_lr, W_lr = lr_size
    if H_lr > labels.height or W_lr > labels.width or H_lr < 1 or W_lr < 1:
        raise ContractError(f"low-res size {lr_size} must lie within the image size")
    rows = lr_to_full(np.arange(H_lr), labels.height, H_lr)
    cols = lr_to_full(np.arange(W_lr), labels.width, W_lr)
    return LabelImage(labels.semantic[np.ix_(rows, cols)], labels.instance[np.ix_(rows, cols)])


def build_prompts(sem_lr, inst_lr, params: PLGParams) -> PromptSet:
    sem_lr = np.asarray(sem_lr, dtype=np.int64)
    inst_lr = np.asarray(inst_lr, dtype=np.int64)
    if sem_lr.shape != inst_lr.shape:
        raise ContractError("semantic and instance grids differ in shape")
    P = np.argwhere(sem_lr != IGNORE)
    K = len(P)
    M = np.zeros((K,) + sem_lr.shape)
    if K == 0:
        return PromptSet(P.astype(np.int64), M)
    sp = sem_lr[P[:, 0], P[:, 1]]
    ip = inst_lr[P[:, 0], P[:, 1]]
    # row i holds the hint values prompt i assigns to every prompt pixel
    vals = np.where(sp[None, :] != sp[:, None], -params.theta_h, 0.0)
    valid = (ip != INVALID)[:, None]
    vals = np.where(valid & (ip[None, :] == ip[:, None]), params.theta_h, vals)
    vals = np.where(~valid & (sp[None, :] == sp[:, None]), params.theta_l, vals)
    M[:, P[:, 0], P[:, 1]] = vals
    return PromptSet(P.astype(np.int64), M)


# --------------------------------------------------------------------------
# stage 2 pieces


def stability_score(logits, tau: float = 0.0, delta: float = 1.0) -> float:
    if not delta > 0:
        raise ContractError("stability offset must be positive")
    logits = np.asarray(logits)
    high = int((logits > tau + delta).sum())
    low = int((logits > tau - delta).sum())
    return 1.0 if low == 0 else high / low


def mask_to_box(mask) -> tuple:
    """Tight inclusive ``(x0, y0, x1, y1)`` of a boolean H x W mask."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ContractError("mask_to_box on an empty mask")
    return (int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def box_nms(candidates: Sequence[MaskCandidate], theta_box_nms: float) -> list:
    """Greedy suppression by descending predicted IoU; survivors keep input order."""
    if not candidates:
        return []
    boxes = np.array([c.box for c in candidates], dtype=np.int64)
    scores = np.array([c.iou_prediction for c in candidates], dtype=np.float64)
    order = np.argsort(-scores, kind="stable").astype(np.int64)
    keep = kernels.greedy_nms(boxes, order, float(theta_box_nms))
    return [c for c, k in zip(candidates, keep) if k]


def _mode(values) -> int:
    return int(np.argmax(np.bincount(values)))


def assign_majority_labels(mask, sem, inst) -> tuple:
    mask = np.asarray(mask, dtype=bool)
    sem = np.asarray(sem)[mask]
    inst = np.asarray(inst)[mask]
    seen = sem != IGNORE
    if not seen.any():
        return IGNORE, INVALID
    return _mode(sem[seen]), _mode(inst[seen])


def overlay_masks(kept: Sequence[MaskCandidate], height: int, width: int) -> PseudoLabel:
    out = LabelImage.empty(height, width)
    order = sorted(range(len(kept)), key=lambda i: kept[i].iou_prediction)
    for i in order:
        c = kept[i]
        out.semantic[c.mask] = c.semantic
        out.instance[c.mask] = c.instance
    return out


def _threads(threads):
    if threads is None:
        threads = int(os.environ.get("ELITE_THREADS", "1") or 1)
    return max(1, threads)


def generate_pseudo_labels(
    scene: Scene, sparse: LabelImage, segmenter: SegmenterPort, params: PLGParams | None = None, threads=None
) -> PseudoLabel:
    params = params or PLGParams()
    image = scene.image if isinstance(scene, Scene) else np.asarray(scene)
    H, W = image.shape[:2]
    if (sparse.height, sparse.width) != (H, W):
        raise ContractError("sparse labels do not match the image size")
    H_lr, W_lr = params.resolve_lr_size(H, W)
    low = downsample_labels(sparse, (H_lr, W_lr))
    prompts = build_prompts(low.semantic, low.instance, params)
    if len(prompts) == 0:
        return LabelImage.empty(H, W)

    full_rows = lr_to_full(prompts.P[:, 0], H, H_lr)
    full_cols = lr_to_full(prompts.P[:, 1], W, W_lr)

    def run(i):
        out = list(segmenter.segment(image, (int(full_rows[i]), int(full_cols[i])), prompts.M[i]))
        if len(out) != 3:
            raise ContractError(f"segmenter returned {len(out)} candidates, expected 3")
        return out

    workers = _threads(threads)
    if workers == 1:
        results = [run(i) for i in range(len(prompts))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(prompts))))

    data = []
    for outputs in results:
        for logits, iou_pred in outputs:
            logits = np.asarray(logits, dtype=np.float64)
            stab = stability_score(logits, params.tau, params.delta)
            if not stab > params.theta_stability:
                continue
            mask = logits > params.tau
            if not mask.any():
                continue
            data.append(MaskCandidate(mask, float(iou_pred), stab, mask_to_box(mask)))

    kept = box_nms(data, params.theta_box_nms)
    for c in kept:
        c.semantic, c.instance = assign_majority_labels(c.mask, sparse.semantic, sparse.instance)
    return overlay_masks(kept, H, W)


# --------------------------------------------------------------------------
# deterministic stand-in segmenter


def upsample_nearest(low, height, width):
    low = np.asarray(low)
    rows = full_to_lr(np.arange(height), height, low.shape[0])
    cols = full_to_lr(np.arange(width), width, low.shape[1])
    return low[np.ix_(rows, cols)]


def toy_segment(image, prompt, low_res_mask) -> list:
    """Three colour-bucket masks around ``prompt`` (row, col) with hint-based scores."""
    image = np.asarray(image)
    H, W = image.shape[:2]
    r, c = prompt
    if not (0 <= r < H and 0 <= c < W):
        raise ContractError(f"prompt {prompt} outside the {H}x{W} image")
    q = (image // 32).astype(np.int64)
    code = q[..., 0] * 64 + q[..., 1] * 8 + q[..., 2]
    first = kernels.flood_fill(code, int(r), int(c))
    near = (np.abs(q - q[r, c]) < 2).all(axis=-1)
    second = kernels.dilate4(first) & near
    third = code == code[r, c]

    hint = upsample_nearest(low_res_mask, H, W)
    pos = hint > 0
    neutral = hint == 0
    out = []
    for m in (first, second, third):
        area = m.sum()
        score = ((m & pos).sum() + 0.5 * (m & neutral).sum()) / area
        out.append((np.where(m, 2.0, -2.0), float(score)))
    return out


class ToySegmenter:
    """Port adapter around :func:`toy_segment` that counts its calls."""

    def __init__(self):
        self.calls = 0

    def segment(self, image, prompt, low_res_mask):
        self.calls += 1
        return toy_segment(image, prompt, low_res_mask)
