"""Multi-stage patch-to-point distillation: loss assembly, training, inference."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .datasets import IGNORE, LabelImage, Scene
from .errors import ContractError, FormatError, NumericError
from .geometry import PixelCorrespondences, project_points
from .labelgen import ppc_gtg
from .metrics import ConfusionMatrix
from .nets import (
    StageOutputs,
    StudentInputs,
    StudentNet,
    TeacherNet,
    loss_kl,
    loss_seg,
    patch_features,
)
from .peft import (
    AdaLoraAdapter,
    orth_reg,
    read_adapter,
    read_matrix,
    reallocate_budget,
    write_adapter,
    write_matrix,
)


@dataclass(frozen=True)
class TrainConfig:
    stages: int = 4
    hidden: int = 64
    base_edge: float = 0.2
    grid: int = 16
    learning_rate: float = 0.05
    epochs: int = 50
    batch: int = 4
    lambda_kd: float = 1.0
    lambda_orth: float = 0.1
    seed: int = 0
    adapter: str = "adalora"
    rank: int = 8
    adalora_budget: int | None = None  # None: half of all adapter ranks
    realloc_every: int = 10
    kd_mode: str = "multi"  # "multi": every stage, "single": last stage only
    class_weights: str | tuple = "auto"

    def __post_init__(self):
        if self.stages < 1:
            raise ContractError("stages must be at least 1")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.epochs < 0 or self.batch < 1:
            raise ContractError("epochs must be >= 0 and batch >= 1")
        if self.kd_mode not in ("multi", "single"):
            raise ContractError("kd_mode must be 'multi' or 'single'")
        if self.realloc_every < 1:
            raise ContractError("realloc_every must be at least 1")

    def kd_stages(self):
        return list(range(self.stages)) if self.kd_mode == "multi" else [self.stages - 1]

    def budget(self):
        if self.adalora_budget is not None:
            return self.adalora_budget
        return (self.rank * self.stages) // 2


@dataclass
class LossBreakdown:
    teacher_stage: list
    student_stage: list
    teacher_final: float
    student_final: float
    kd: float
    orth: float
    total: float
    lambda_kd: float = 1.0
    lambda_orth: float = 0.1

    @property
    def segmentation_terms(self):
        return self.teacher_stage + self.student_stage + [self.teacher_final, self.student_final]

    def resum(self) -> float:
        L = len(self.student_stage)
        stage = sum(self.teacher_stage) + sum(self.student_stage)
        return (
            self.student_final
            + self.teacher_final
            + stage / L
            + self.lambda_kd * self.kd
            + self.lambda_orth * self.orth
        )

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# per-scene tensors that never change during training


@dataclass
class PreparedScene:
    student: StudentInputs
    point_labels: np.ndarray
    corr: PixelCorrespondences
    corr_patch: np.ndarray  # patch id of each corresponded pixel
    patch_feats: np.ndarray
    sup_patch: np.ndarray  # patch id of every teacher-supervised pixel
    sup_labels: np.ndarray


def prepare_scene(scene: Scene, student: StudentNet, teacher: TeacherNet, image_labels: LabelImage | None = None, point_labels=None, dense=False) -> PreparedScene:
    """Precompute inputs and supervision.

    ``image_labels`` defaults to the point-to-pixel sparse labels. With
    ``dense=True`` every labelled pixel supervises the teacher; otherwise only
    pixels with a corresponding point do.
    """
    if point_labels is None:
        point_labels = scene.point_semantic
    point_labels = np.asarray(point_labels, dtype=np.int64)
    if image_labels is None:
        shown = Scene(scene.image, scene.cloud, point_labels, scene.point_instance, scene.cam, scene.class_count)
        image_labels = ppc_gtg(shown)
    feats0, grid = patch_features(scene.image, teacher.grid)
    corr = project_points(scene.cloud, scene.cam)
    if dense:
        rows, cols = np.nonzero(image_labels.labeled())
    else:
        rows, cols = corr.v, corr.u
    return PreparedScene(
        student=student.inputs(scene.cloud),
        point_labels=point_labels,
        corr=corr,
        corr_patch=grid.patch_of(corr.v, corr.u),
        patch_feats=feats0,
        sup_patch=grid.patch_of(rows, cols),
        sup_labels=image_labels.semantic[rows, cols],
    )


def class_weights_from_labels(label_arrays, classes: int) -> np.ndarray:
    """``1 / sqrt(count + 1)`` per class, rescaled to mean 1."""
    counts = np.zeros(classes)
    for labels in label_arrays:
        labels = np.asarray(labels)
        labels = labels[labels != IGNORE]
        counts += np.bincount(labels, minlength=classes)[:classes]
    w = 1.0 / np.sqrt(counts + 1.0)
    return w / w.mean()


# --------------------------------------------------------------------------
# losses


def ppmskd_loss(teacher_scores: Sequence, student_scores: Sequence, correspondences, stages=None) -> ad.Node:
    """Sum over stages of KL(teacher || student) on the corresponded points.

    ``teacher_scores[l]`` holds one row per correspondence; ``student_scores[l]``
    one row per point and is restricted with ``correspondences.point_index``.
    """
    if len(teacher_scores) != len(student_scores):
        raise ContractError("teacher and student stage counts differ")
    stages = range(len(student_scores)) if stages is None else stages
    idx = correspondences.point_index if hasattr(correspondences, "point_index") else np.asarray(correspondences)
    terms = [loss_kl(teacher_scores[l], ad.gather_rows(student_scores[l], idx)) for l in stages]
    return ad.add_scalars(terms) if terms else ad.const([[0.0]])


def total_loss(prep: PreparedScene, student: StudentNet, teacher: TeacherNet, config: TrainConfig, class_weights):
    """Assemble every term for one scene; returns ``(root node, named terms)``."""
    L = config.stages
    s_outs, s_final = student.forward(prep.student)
    t_feats = teacher.forward(prep.patch_feats)
    t_scores = [teacher.decode(l, f) for l, f in enumerate(t_feats)]
    t_final = teacher.decode_final(t_feats)

    def teacher_seg(patch_scores):
        return loss_seg(ad.gather_rows(patch_scores, prep.sup_patch), prep.sup_labels, class_weights)

    t_stage = [teacher_seg(s) for s in t_scores]
    s_stage = [loss_seg(o.scores, prep.point_labels, class_weights) for o in s_outs]
    t_fin = teacher_seg(t_final)
    s_fin = loss_seg(s_final, prep.point_labels, class_weights)

    kd_teacher = [s.value[prep.corr_patch] for s in t_scores]
    kd = ppmskd_loss(kd_teacher, [o.scores for o in s_outs], prep.corr, config.kd_stages())

    orths = [orth_reg(a) for a in teacher.adapters if isinstance(a, AdaLoraAdapter)]
    orth = ad.add_scalars(orths) if orths else ad.const([[0.0]])

    nodes = [s_fin, t_fin] + t_stage + s_stage + [kd, orth]
    weights = [1.0, 1.0] + [1.0 / L] * (2 * L) + [config.lambda_kd, config.lambda_orth]
    root = ad.add_scalars(nodes, weights)
    terms = {
        "student_final": s_fin,
        "teacher_final": t_fin,
        "teacher_stage": t_stage,
        "student_stage": s_stage,
        "kd": kd,
        "orth": orth,
    }
    return root, terms


def _breakdown(terms_list, totals, config: TrainConfig) -> LossBreakdown:
    n = len(terms_list)

    def avg(get):
        return sum(get(t) for t in terms_list) / n

    L = config.stages
    return LossBreakdown(
        teacher_stage=[avg(lambda t: t["teacher_stage"][l].item()) for l in range(L)],
        student_stage=[avg(lambda t: t["student_stage"][l].item()) for l in range(L)],
        teacher_final=avg(lambda t: t["teacher_final"].item()),
        student_final=avg(lambda t: t["student_final"].item()),
        kd=avg(lambda t: t["kd"].item()),
        orth=avg(lambda t: t["orth"].item()),
        total=sum(totals) / n,
        lambda_kd=config.lambda_kd,
        lambda_orth=config.lambda_orth,
    )


def _check_finite(terms, step):
    for name, node in terms.items():
        nodes = node if isinstance(node, list) else [node]
        for i, n in enumerate(nodes):
            if not np.isfinite(n.value).all():
                label = f"{name}[{i}]" if isinstance(node, list) else name
                raise NumericError(f"non-finite loss term {label!r} at step {step}")


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    student: StudentNet
    teacher: TeacherNet
    history: list = field(default_factory=list)
    class_weights: np.ndarray | None = None


def build_models(config: TrainConfig, classes: int):
    student = StudentNet(
        classes, config.stages, config.hidden, config.base_edge, rng=np.random.default_rng([config.seed, 1])
    )
    teacher = TeacherNet(
        classes,
        config.stages,
        config.hidden,
        config.grid,
        config.adapter,
        config.rank,
        base_rng=np.random.default_rng([config.seed, 2]),
        rng=np.random.default_rng([config.seed, 3]),
    )
    return student, teacher


def train(
    config: TrainConfig,
    scenes: Sequence[Scene],
    image_labels: Sequence[LabelImage] | None = None,
    point_labels: Sequence | None = None,
    dense: bool = False,
    models=None,
) -> TrainResult:
    """Plain gradient descent over the student, teacher adapters and decoders."""
    if not scenes:
        raise ContractError("need at least one scene")
    classes = scenes[0].class_count
    student, teacher = models if models is not None else build_models(config, classes)
    if point_labels is None:
        point_labels = [s.point_semantic for s in scenes]
    if image_labels is None:
        image_labels = [None] * len(scenes)
    preps = [
        prepare_scene(s, student, teacher, il, pl, dense=dense)
        for s, il, pl in zip(scenes, image_labels, point_labels)
    ]
    if config.class_weights == "auto":
        weights = class_weights_from_labels(point_labels, classes)
    else:
        weights = np.asarray(config.class_weights, dtype=np.float64)
        if weights.shape != (classes,) or np.any(weights <= 0):
            raise ContractError("class_weights must be one positive value per class")

    params = student.parameters() + teacher.parameters()
    batches = [preps[i : i + config.batch] for i in range(0, len(preps), config.batch)]
    result = TrainResult(student, teacher, class_weights=weights)
    step = 0
    for _ in range(config.epochs):
        for batch in batches:
            roots, terms_list = [], []
            for prep in batch:
                root, terms = total_loss(prep, student, teacher, config, weights)
                _check_finite(terms, step)
                roots.append(root)
                terms_list.append(terms)
            batch_root = ad.add_scalars(roots, [1.0 / len(roots)] * len(roots))
            if not np.isfinite(batch_root.value).all():
                raise NumericError(f"non-finite total loss at step {step}")
            ad.backward(batch_root)
            for a in teacher.adapters:
                a.after_backward()
            for p in params:
                p.value -= config.learning_rate * p.grad
            result.history.append(_breakdown(terms_list, [r.item() for r in roots], config))
            step += 1
            if config.adapter == "adalora" and step % config.realloc_every == 0:
                reallocate_budget(teacher.adapters, config.budget())
    return result


# --------------------------------------------------------------------------
# inference and evaluation


def infer_student(student: StudentNet, cloud) -> np.ndarray:
    """Per-point class ids from the student alone."""
    feats = student.encode(student.inputs(cloud))
    return np.argmax(student.final_logits(feats).value, axis=1)


def evaluate(student: StudentNet, scenes: Sequence[Scene]) -> dict:
    cm = ConfusionMatrix(student.classes)
    for s in scenes:
        cm.update(s.point_semantic, infer_student(student, s.cloud))
    return cm.report()


def count_params(component) -> tuple:
    """``(trainable, frozen)`` scalar counts from the component's containers."""
    trainable = sum(int(p.value.size) for p in component.parameters())
    frozen = sum(int(np.size(w)) for w in component.frozen())
    return trainable, frozen


# --------------------------------------------------------------------------
# checkpoints: magic, JSON header, then (d1, d2, r) + float64 records

MAGIC = b"ELTCKPT1"


def save_checkpoint(path, result: TrainResult, config: TrainConfig) -> None:
    student, teacher = result.student, result.teacher
    meta = {
        "config": asdict(config),
        "classes": student.classes,
        "class_weights": [float(w) for w in result.class_weights],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in student.parameters():
            write_matrix(fh, p.value)
        for p in teacher.decoder_parameters():
            write_matrix(fh, p.value)
        for a in teacher.adapters:
            write_adapter(fh, a)


def load_checkpoint(path) -> tuple:
    """Returns ``(config, TrainResult)``; frozen teacher weights are rebuilt from the seed."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise FormatError(f"{path}: not a checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(n).decode("utf-8"))
        cfg = dict(meta["config"])
        if isinstance(cfg.get("class_weights"), list):
            cfg["class_weights"] = tuple(cfg["class_weights"])
        config = TrainConfig(**cfg)
        student, teacher = build_models(config, meta["classes"])
        for p in student.parameters():
            p.value[...] = read_matrix(fh)
        for p in teacher.decoder_parameters():
            p.value[...] = read_matrix(fh)
        teacher.adapters = [read_adapter(fh, a.W0, config.adapter) for a in teacher.adapters]
    return config, TrainResult(student, teacher, class_weights=np.array(meta["class_weights"]))
