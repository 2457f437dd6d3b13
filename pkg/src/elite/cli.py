"""``elite <command> --config run.json [--set key=value ...]``

Commands share one JSON config. Relative paths resolve against the config
file's directory. Exit status: 0 success, 1 invalid configuration, 2 runtime
failure. Diagnostics are one line on stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import datasets as ds
from . import distill, labelgen
from .errors import ContractError, FormatError

COMMANDS = ("synth", "project", "plg", "train", "eval", "render")


class ConfigError(Exception):
    """Invalid configuration; the message names the offending field."""


# --------------------------------------------------------------------------
# schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SynthSection(_Strict):
    train_scenes: int = Field(4, ge=1, le=500)
    eval_scenes: int = Field(4, ge=1, le=500)
    width: int = Field(128, ge=8)
    height: int = Field(96, ge=8)
    class_count: int = Field(4, ge=2, le=64)
    instances: int = Field(4, ge=0)
    points_per_class: int = Field(8, ge=0)
    sparsity: float = Field(0.05, gt=0, le=1)
    intensity_noise: float = Field(0.15, ge=0)
    max_retries: int = Field(500, ge=1)


class ProjectSection(_Strict):
    label_fraction: float = Field(1.0, gt=0, le=1)


class PLGSection(_Strict):
    lr_size: Optional[tuple[int, int]] = None
    theta_h: float = Field(16.0, gt=0)
    theta_l: float = Field(1.0, gt=0)
    theta_stability: float = Field(0.9, gt=0, le=1)
    theta_box_nms: float = Field(0.7, gt=0, le=1)
    tau: float = 0.0
    delta: float = Field(1.0, gt=0)

    @field_validator("lr_size")
    @classmethod
    def _positive(cls, v):
        if v is not None and min(v) < 1:
            raise ValueError("both sides must be at least 1")
        return v


class TrainSection(_Strict):
    stages: int = Field(4, ge=1)
    hidden: int = Field(64, ge=2)
    base_edge: float = Field(0.2, gt=0)
    grid: int = Field(16, ge=1)
    learning_rate: float = Field(0.05, gt=0)
    epochs: int = Field(50, ge=0)
    batch: int = Field(4, ge=1)
    lambda_kd: float = Field(1.0, ge=0)
    lambda_orth: float = Field(0.1, ge=0)
    adapter: Literal["lora", "adalora"] = "adalora"
    rank: int = Field(8, ge=1)
    adalora_budget: Optional[int] = Field(None, ge=0)
    realloc_every: int = Field(10, ge=1)
    kd_mode: Literal["multi", "single"] = "multi"
    class_weights: Union[Literal["auto"], list[float]] = "auto"
    teacher_labels: Literal["pseudo", "sparse"] = "pseudo"


class PathsSection(_Strict):
    scene_dir: str = "scenes"
    label_dir: str = "labels"
    checkpoint: str = "model/checkpoint.bin"
    report: str = "model/report.json"
    render_dir: str = "render"


class RunConfig(_Strict):
    seed: int = Field(0, ge=0)
    synth: SynthSection = SynthSection()
    project: ProjectSection = ProjectSection()
    plg: PLGSection = PLGSection()
    train: TrainSection = TrainSection()
    paths: PathsSection = PathsSection()

    def synth_params(self) -> ds.SynthParams:
        return ds.SynthParams(**self.synth.model_dump(exclude={"train_scenes", "eval_scenes"}))

    def plg_params(self) -> labelgen.PLGParams:
        return labelgen.PLGParams(**self.plg.model_dump())

    def train_config(self) -> distill.TrainConfig:
        kw = self.train.model_dump(exclude={"teacher_labels"})
        if isinstance(kw["class_weights"], list):
            kw["class_weights"] = tuple(kw["class_weights"])
        return distill.TrainConfig(seed=self.seed, **kw)


def _set_dotted(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"field '{key}': '{p}' is not a section")
        node = nxt
    node[parts[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str, overrides=()) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path}: top level must be an object")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, text = item.split("=", 1)
        _set_dotted(doc, key.strip(), _parse_value(text))
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = ".".join(str(p) for p in err["loc"])
        raise ConfigError(f"field '{field}': {err['msg']}") from exc
    # cross-field rules live in the library dataclasses
    for section, build in (("synth", cfg.synth_params), ("plg", cfg.plg_params), ("train", cfg.train_config)):
        try:
            build()
        except ContractError as exc:
            raise ConfigError(f"section '{section}': {exc}") from exc
    return cfg


def thread_count() -> int:
    raw = os.environ.get("ELITE_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"ELITE_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"ELITE_THREADS must be a positive integer, got {raw!r}")
    return n


# --------------------------------------------------------------------------
# layout helpers


class Layout:
    def __init__(self, cfg: RunConfig, base: str):
        def resolve(p):
            return p if os.path.isabs(p) else os.path.join(base, p)

        self.cfg = cfg
        self.scene_dir = resolve(cfg.paths.scene_dir)
        self.label_dir = resolve(cfg.paths.label_dir)
        self.checkpoint = resolve(cfg.paths.checkpoint)
        self.report = resolve(cfg.paths.report)
        self.render_dir = resolve(cfg.paths.render_dir)

    def count(self, split):
        return self.cfg.synth.train_scenes if split == "train" else self.cfg.synth.eval_scenes

    def scene_seed(self, split, i):
        return 1000 * self.cfg.seed + (0 if split == "train" else 500) + i

    def scene_path(self, split, i):
        return os.path.join(self.scene_dir, split, f"{i:06d}")

    def label_path(self, split, i, name):
        return os.path.join(self.label_dir, split, f"{i:06d}", name)

    def scenes(self, split):
        return [ds.read_scene_dir(self.scene_path(split, i)) for i in range(self.count(split))]


def _dump_json(path, obj) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _read_sparse(lay: Layout, i: int, scene: ds.Scene) -> ds.LabelImage:
    H, W = scene.image.shape[:2]
    return ds.read_label_image(lay.label_path("train", i, "sparse.label"), H, W)


# --------------------------------------------------------------------------
# commands


def cmd_synth(lay: Layout) -> str:
    params = lay.cfg.synth_params()
    total = 0
    for split in ("train", "eval"):
        for i in range(lay.count(split)):
            scene = ds.synth_scene(lay.scene_seed(split, i), params)
            ds.write_scene_dir(lay.scene_path(split, i), scene)
            total += 1
    return f"synth: wrote {total} scenes under {lay.scene_dir}"


def cmd_project(lay: Layout) -> str:
    fraction = lay.cfg.project.label_fraction
    rng = np.random.default_rng([lay.cfg.seed, 4])
    kept = pixels = 0
    for i, scene in enumerate(lay.scenes("train")):
        sem, inst = ds.subsample_point_labels(scene.point_semantic, scene.point_instance, fraction, rng)
        shown = ds.Scene(scene.image, scene.cloud, sem, inst, scene.cam, scene.class_count)
        sparse = labelgen.ppc_gtg(shown)
        out = lay.label_path("train", i, "points.label")
        os.makedirs(os.path.dirname(out), exist_ok=True)
        ds.write_kitti_labels(out, sem, inst)
        ds.write_label_image(lay.label_path("train", i, "sparse.label"), sparse)
        kept += int((sem != ds.IGNORE).sum())
        pixels += sparse.labeled_count()
    return f"project: {kept} labelled points, {pixels} sparse pixels"


def cmd_plg(lay: Layout) -> str:
    params = lay.cfg.plg_params()
    threads = thread_count()
    summary = {}
    tot_sparse = tot_pseudo = 0
    for i, scene in enumerate(lay.scenes("train")):
        sparse = _read_sparse(lay, i, scene)
        pseudo = labelgen.generate_pseudo_labels(scene, sparse, labelgen.ToySegmenter(), params, threads=threads)
        ds.write_label_image(lay.label_path("train", i, "pseudo.label"), pseudo)
        summary[f"{i:06d}"] = {"sparse_pixels": sparse.labeled_count(), "pseudo_pixels": pseudo.labeled_count()}
        tot_sparse += sparse.labeled_count()
        tot_pseudo += pseudo.labeled_count()
    ratio = tot_pseudo / tot_sparse if tot_sparse else 0.0
    _dump_json(os.path.join(lay.label_dir, "plg_report.json"), {"scenes": summary, "ratio": ratio})
    return f"plg: {tot_sparse} sparse -> {tot_pseudo} pseudo pixels ({ratio:.2f}x)"


def _training_inputs(lay: Layout, scenes):
    points, images = [], []
    use_pseudo = lay.cfg.train.teacher_labels == "pseudo"
    for i, scene in enumerate(scenes):
        path = lay.label_path("train", i, "points.label")
        if os.path.exists(path):
            sem, _ = ds.read_kitti_labels(path)
            if len(sem) != len(scene.cloud):
                raise FormatError(f"{path}: {len(sem)} labels for {len(scene.cloud)} points")
            points.append(sem)
        else:
            points.append(scene.point_semantic)
        if use_pseudo:
            H, W = scene.image.shape[:2]
            images.append(ds.read_label_image(lay.label_path("train", i, "pseudo.label"), H, W))
        elif os.path.exists(lay.label_path("train", i, "sparse.label")):
            images.append(_read_sparse(lay, i, scene))
        else:
            images.append(None)
    return points, images, use_pseudo


def _eval_report(student, scenes) -> dict:
    return distill.evaluate(student, scenes)


def cmd_train(lay: Layout) -> str:
    config = lay.cfg.train_config()
    scenes = lay.scenes("train")
    points, images, dense = _training_inputs(lay, scenes)
    result = distill.train(config, scenes, image_labels=images, point_labels=points, dense=dense)
    os.makedirs(os.path.dirname(lay.checkpoint) or ".", exist_ok=True)
    distill.save_checkpoint(lay.checkpoint, result, config)
    with open(lay.checkpoint + ".history.jsonl", "w") as fh:
        for step, h in enumerate(result.history):
            fh.write(json.dumps({"step": step, **h.to_dict()}, sort_keys=True) + "\n")
    report = _eval_report(result.student, lay.scenes("eval"))
    _dump_json(lay.checkpoint + ".eval.json", report)
    final = result.history[-1].total if result.history else float("nan")
    return f"train: {len(result.history)} steps, final loss {final:.6f}, eval mIoU {report['miou']:.6f}"


def cmd_eval(lay: Layout) -> str:
    _, result = distill.load_checkpoint(lay.checkpoint)
    report = _eval_report(result.student, lay.scenes("eval"))
    _dump_json(lay.report, report)
    return f"eval: mIoU {report['miou']:.6f} over {report['samples']} points"


def cmd_render(lay: Layout) -> str:
    written = 0
    out = os.path.join(lay.render_dir, "train")
    os.makedirs(out, exist_ok=True)
    for i, scene in enumerate(lay.scenes("train")):
        C = scene.class_count
        stem = os.path.join(out, f"{i:06d}")
        ds.write_ppm(scene.image, stem + "_image.ppm")
        ds.write_ppm(ds.dense_labels(scene), stem + "_truth.ppm", C)
        for name in ("sparse", "pseudo"):
            path = lay.label_path("train", i, f"{name}.label")
            if os.path.exists(path):
                H, W = scene.image.shape[:2]
                ds.write_ppm(ds.read_label_image(path, H, W), f"{stem}_{name}.ppm", C)
                written += 1
        written += 2
    if os.path.exists(lay.checkpoint):
        _, result = distill.load_checkpoint(lay.checkpoint)
        out = os.path.join(lay.render_dir, "eval")
        os.makedirs(out, exist_ok=True)
        for i, scene in enumerate(lay.scenes("eval")):
            pred = distill.infer_student(result.student, scene.cloud)
            shown = ds.Scene(scene.image, scene.cloud, pred, np.zeros_like(pred), scene.cam, scene.class_count)
            stem = os.path.join(out, f"{i:06d}")
            ds.write_ppm(labelgen.ppc_gtg(shown), stem + "_pred.ppm", scene.class_count)
            ds.write_ppm(labelgen.ppc_gtg(scene), stem + "_points.ppm", scene.class_count)
            written += 2
    return f"render: wrote {written} images under {lay.render_dir}"


HANDLERS = {
    "synth": cmd_synth,
    "project": cmd_project,
    "plg": cmd_plg,
    "train": cmd_train,
    "eval": cmd_eval,
    "render": cmd_render,
}


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad invocation counts as invalid configuration
        print(f"elite: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parser():
    p = _Parser(prog="elite", description="sparse-to-dense labelling and distillation pipeline")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted config key, e.g. plg.theta_stability=0.8")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        thread_count()
    except ConfigError as exc:
        print(f"elite: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"elite: cannot read config: {exc}", file=sys.stderr)
        return 2
    lay = Layout(cfg, os.path.dirname(os.path.abspath(args.config)))
    try:
        message = HANDLERS[args.command](lay)
    except ConfigError as exc:
        print(f"elite: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        text = " ".join(str(exc).split())
        print(f"elite {args.command}: {type(exc).__name__}: {text}", file=sys.stderr)
        return 2
    print(message)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
