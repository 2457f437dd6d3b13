"""Toy teacher/student encoders, their per-stage decoders, and the losses.

The student is a stack of voxel-pooled linear stages over the point cloud.
The teacher embeds image patches with a frozen layer, runs frozen linear
stages that carry low-rank adapters, and decodes every stage with its own
upscaling layer and classifier.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .datasets import IGNORE
from .errors import ContractError, DimensionError
from .geometry import VoxelPartition, stage_edges, voxelize
from .peft import AdaLoraAdapter, LoraAdapter

PROB_FLOOR = 1e-12


@dataclass
class StageOutputs:
    features: ad.Node
    scores: ad.Node


def _he(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


# --------------------------------------------------------------------------
# losses


def _empty_loss():
    out = ad.const([[0.0]])
    out.empty = True
    return out


def loss_wce(scores: ad.Node, labels, class_weights) -> ad.Node:
    """Weighted cross-entropy on probabilities; ignored rows drop out."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != scores.shape[0]:
        raise DimensionError("one label per score row required")
    rows = np.flatnonzero(labels != IGNORE)
    if rows.size == 0:
        return _empty_loss()
    y = labels[rows]
    w = np.asarray(class_weights, dtype=np.float64)[y]
    p = scores.value[rows, y]
    n = rows.size
    value = -(w * np.log(np.maximum(p, PROB_FLOOR))).sum() / n

    def bw(g):
        grad = np.zeros_like(scores.value)
        grad[rows, y] = np.where(p > PROB_FLOOR, -w / (n * np.maximum(p, PROB_FLOOR)), 0.0)
        ad._acc(scores, g[0, 0] * grad)

    return ad._make(np.array([[value]]), (scores,), "loss_wce", bw)


def lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Jaccard-loss increments along a descending error ordering."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def loss_lovasz(scores: ad.Node, labels) -> ad.Node:
    """Lovasz-softmax averaged over the classes present in ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != scores.shape[0]:
        raise DimensionError("one label per score row required")
    rows = np.flatnonzero(labels != IGNORE)
    if rows.size == 0:
        return _empty_loss()
    y = labels[rows]
    p = scores.value[rows]
    present = np.unique(y)
    grad_local = np.zeros_like(p)
    total = 0.0
    for c in present:
        fg = (y == c).astype(np.float64)
        err = np.abs(fg - p[:, c])
        order = np.argsort(-err, kind="stable")
        g = lovasz_grad(fg[order])
        total += float(err[order] @ g)
        grad_local[order, c] += g * np.where(fg[order] > 0, -1.0, 1.0)
    k = len(present)
    value = total / k

    def bw(gr):
        grad = np.zeros_like(scores.value)
        grad[rows] = grad_local / k
        ad._acc(scores, gr[0, 0] * grad)

    return ad._make(np.array([[value]]), (scores,), "loss_lovasz", bw)


def loss_kl(teacher_scores, student_scores: ad.Node) -> ad.Node:
    """Mean over rows of KL(teacher || student); the teacher side is a constant."""
    T = teacher_scores.value if isinstance(teacher_scores, ad.Node) else np.asarray(teacher_scores, dtype=np.float64)
    T = T.reshape(-1, student_scores.shape[1]) if T.size else np.zeros((0, student_scores.shape[1]))
    if T.shape[0] != student_scores.shape[0]:
        raise ContractError(f"teacher has {T.shape[0]} rows, student {student_scores.shape[0]}")
    n = T.shape[0]
    if n == 0:
        return _empty_loss()
    S = student_scores.value
    terms = np.where(T > 0, T * (np.log(np.maximum(T, PROB_FLOOR)) - np.log(np.maximum(S, PROB_FLOOR))), 0.0)
    value = terms.sum() / n

    def bw(g):
        grad = np.where(S > PROB_FLOOR, -T / (n * np.maximum(S, PROB_FLOOR)), 0.0)
        ad._acc(student_scores, g[0, 0] * grad)

    return ad._make(np.array([[value]]), (student_scores,), "loss_kl", bw)


def loss_seg(scores: ad.Node, labels, class_weights) -> ad.Node:
    return ad.add(loss_wce(scores, labels, class_weights), loss_lovasz(scores, labels))


# --------------------------------------------------------------------------
# student


@dataclass
class StudentInputs:
    features: np.ndarray  # N x 4, standardised per scene
    partitions: list  # one VoxelPartition per stage

    def __len__(self):
        return len(self.features)


def normalize_points(cloud) -> np.ndarray:
    cloud = np.asarray(cloud, dtype=np.float64)
    std = cloud.std(axis=0)
    return (cloud - cloud.mean(axis=0)) / np.where(std > 1e-6, std, 1.0)


def student_inputs(cloud, edges) -> StudentInputs:
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 4) if np.size(cloud) else np.zeros((0, 4))
    if len(cloud) == 0:
        raise ContractError("the student needs at least one point")
    return StudentInputs(normalize_points(cloud), [voxelize(cloud, e) for e in edges])


class StudentNet:
    def __init__(self, classes: int, stages: int = 4, hidden: int = 64, base_edge: float = 0.2, in_dim: int = 4, rng=None):
        if stages < 1:
            raise ContractError("at least one stage required")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.classes, self.stages, self.hidden, self.in_dim = classes, stages, hidden, in_dim
        self.edges = stage_edges(base_edge, stages)
        self.stage_w, self.stage_b, self.head_w, self.head_b = [], [], [], []
        for l in range(stages):
            fan_in = in_dim if l == 0 else hidden
            self.stage_w.append(ad.param(_he(rng, fan_in, hidden)))
            self.stage_b.append(ad.param(np.zeros((1, hidden))))
            self.head_w.append(ad.param(rng.standard_normal((hidden, classes)) * np.sqrt(1.0 / hidden)))
            self.head_b.append(ad.param(np.zeros((1, classes))))
        self.final_w = ad.param(rng.standard_normal((stages * hidden, classes)) * np.sqrt(1.0 / (stages * hidden)))
        self.final_b = ad.param(np.zeros((1, classes)))

    def parameters(self):
        out = []
        for l in range(self.stages):
            out += [self.stage_w[l], self.stage_b[l], self.head_w[l], self.head_b[l]]
        return out + [self.final_w, self.final_b]

    def frozen(self):
        return []

    def inputs(self, cloud) -> StudentInputs:
        return student_inputs(cloud, self.edges)

    def encode(self, inputs: StudentInputs):
        x = ad.const(inputs.features)
        feats = []
        for l in range(self.stages):
            part: VoxelPartition = inputs.partitions[l]
            pooled = ad.group_mean_rows(x, part.assignment, part.voxel_count)
            hidden = ad.relu(ad.add_bias(ad.matmul(pooled, self.stage_w[l]), self.stage_b[l]))
            x = ad.gather_rows(hidden, part.assignment)
            feats.append(x)
        return feats

    def final_logits(self, feats) -> ad.Node:
        return ad.add_bias(ad.matmul(ad.concat_cols(feats), self.final_w), self.final_b)

    def forward(self, inputs: StudentInputs):
        feats = self.encode(inputs)
        outs = [
            StageOutputs(f, ad.softmax_rows(ad.add_bias(ad.matmul(f, self.head_w[l]), self.head_b[l])))
            for l, f in enumerate(feats)
        ]
        return outs, ad.softmax_rows(self.final_logits(feats))


def student_forward(student: StudentNet, cloud_or_inputs):
    inputs = cloud_or_inputs if isinstance(cloud_or_inputs, StudentInputs) else student.inputs(cloud_or_inputs)
    return student.forward(inputs)


# --------------------------------------------------------------------------
# teacher


@dataclass
class PatchGrid:
    grid: int
    height: int
    width: int

    @property
    def cell(self):
        return self.height // self.grid, self.width // self.grid

    def patch_of(self, rows, cols):
        ch, cw = self.cell
        return (np.asarray(rows) // ch) * self.grid + np.asarray(cols) // cw


def patch_features(image, grid: int) -> tuple:
    """Mean RGB and cell centre per cell, both mapped to [-1, 1], plus the grid geometry."""
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    if H % grid or W % grid:
        raise ContractError(f"image {H}x{W} is not divisible into a {grid}x{grid} grid")
    ch, cw = H // grid, W // grid
    rgb = image.reshape(grid, ch, grid, cw, 3).mean(axis=(1, 3)).reshape(-1, 3) / 255.0
    gy, gx = np.divmod(np.arange(grid * grid), grid)
    centre = np.column_stack([(gy + 0.5) * ch / H, (gx + 0.5) * cw / W])
    # centred inputs keep the frozen random embedding well conditioned
    return np.column_stack([rgb, centre]) * 2.0 - 1.0, PatchGrid(grid, H, W)


class TeacherNet:
    """Frozen patch encoder with adapted stages and trainable decoders."""

    def __init__(
        self,
        classes: int,
        stages: int = 4,
        hidden: int = 64,
        grid: int = 16,
        adapter: str = "adalora",
        rank: int = 8,
        base_rng=None,
        rng=None,
    ):
        if stages < 1:
            raise ContractError("at least one stage required")
        base_rng = base_rng if base_rng is not None else np.random.default_rng(1)
        rng = rng if rng is not None else np.random.default_rng(2)
        self.classes, self.stages, self.hidden, self.grid = classes, stages, hidden, grid
        self.adapter_kind = adapter
        self.embed_w = base_rng.standard_normal((hidden, 5)) * np.sqrt(2.0 / 5)
        self.embed_b = base_rng.uniform(-0.5, 0.5, size=(1, hidden))
        self.adapters = []
        for _ in range(stages):
            W0 = base_rng.standard_normal((hidden, hidden)) * np.sqrt(2.0 / hidden)
            if adapter == "lora":
                self.adapters.append(LoraAdapter(W0, rank, rng=rng))
            elif adapter == "adalora":
                self.adapters.append(AdaLoraAdapter(W0, rank, rng=rng))
            else:
                raise ContractError(f"unknown adapter kind {adapter!r}")
        half = hidden // 2
        self.up_w = [ad.param(_he(rng, hidden, half)) for _ in range(stages)]
        self.up_b = [ad.param(np.zeros((1, half))) for _ in range(stages)]
        self.cls_w = [ad.param(rng.standard_normal((half, classes)) * np.sqrt(1.0 / half)) for _ in range(stages)]
        self.cls_b = [ad.param(np.zeros((1, classes))) for _ in range(stages)]
        self.final_w = ad.param(rng.standard_normal((stages * hidden, classes)) * np.sqrt(1.0 / (stages * hidden)))
        self.final_b = ad.param(np.zeros((1, classes)))
        self.calls = 0
        self.decoder_calls = 0

    def adapter_parameters(self):
        return [p for a in self.adapters for p in a.parameters()]

    def decoder_parameters(self):
        out = []
        for l in range(self.stages):
            out += [self.up_w[l], self.up_b[l], self.cls_w[l], self.cls_b[l]]
        return out + [self.final_w, self.final_b]

    def parameters(self):
        return self.adapter_parameters() + self.decoder_parameters()

    def frozen(self):
        return [self.embed_w, self.embed_b] + [a.W0 for a in self.adapters]

    def forward(self, feats0) -> list:
        """Per-stage patch features (G^2 x h)."""
        self.calls += 1
        x = ad.relu(ad.add_bias(ad.matmul(ad.const(feats0), ad.const(self.embed_w.T)), ad.const(self.embed_b)))
        out = []
        for a in self.adapters:
            x = ad.relu(a.forward(x))
            out.append(x)
        return out

    def decode(self, l: int, features: ad.Node) -> ad.Node:
        """Class probabilities per patch for stage ``l``.

        Upsampling to pixels is nearest-neighbour, so every pixel of a cell
        carries its patch's row; callers gather with :meth:`PatchGrid.patch_of`.
        """
        self.decoder_calls += 1
        up = ad.relu(ad.add_bias(ad.matmul(features, self.up_w[l]), self.up_b[l]))
        return ad.softmax_rows(ad.add_bias(ad.matmul(up, self.cls_w[l]), self.cls_b[l]))

    def decode_final(self, feats) -> ad.Node:
        self.decoder_calls += 1
        return ad.softmax_rows(ad.add_bias(ad.matmul(ad.concat_cols(feats), self.final_w), self.final_b))


def teacher_forward(teacher: TeacherNet, image) -> list:
    feats0, _ = patch_features(image, teacher.grid)
    feats = teacher.forward(feats0)
    return [StageOutputs(f, teacher.decode(l, f)) for l, f in enumerate(feats)]


def patch_decode(teacher: TeacherNet, l: int, features: ad.Node, grid: PatchGrid, correspondences) -> ad.Node:
    """Stage-``l`` probabilities at each corresponded pixel, one row per point."""
    scores = teacher.decode(l, features)
    return ad.gather_rows(scores, grid.patch_of(correspondences.v, correspondences.u))
