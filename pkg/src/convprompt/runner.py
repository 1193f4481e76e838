"""Run orchestration: single experiments, parameter sweeps, gradient suite."""

from __future__ import annotations

import json
import os

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from .autodiff import Tensor, finite_diff_check
from .backbone import BackboneConfig, FrozenBackbone
from .config import ExperimentConfig
from .prompts import DirectPrefixEngine, PromptConfig, PromptEngine
from .trainer import (AccuracyMatrix, ContinualTrainer, TrainConfig,
                      average_accuracy, forgetting)

SWEEPABLE = ("lambda", "l_p", "k", "j_max", "prompted_layers")


def build_trainer(cfg: ExperimentConfig):
    backbone = FrozenBackbone(cfg.backbone)
    mode = cfg.train.baseline_mode
    if mode == "convprompt":
        engine = PromptEngine(cfg.backbone, cfg.prompt)
    elif mode == "se_only":
        engine = DirectPrefixEngine(cfg.backbone, cfg.prompt)
    else:
        engine = None
    return ContinualTrainer(backbone, engine, cfg.similarity, cfg.train)


def run(cfg: ExperimentConfig, progress=None):
    """Train all tasks in order, evaluating the full matrix after each one."""
    stream = data_mod.generate_stream(cfg.stream)
    stream.validate_disjoint()
    trainer = build_trainer(cfg)
    matrix = AccuracyMatrix(cfg.stream.num_tasks)
    per_task = []
    for task in stream.tasks:
        report = trainer.train_task(task)
        trainer.evaluate(stream.tasks, matrix)
        per_task.append(report)
        if progress is not None:
            progress(report, matrix)
    upto = cfg.stream.num_tasks
    before = trainer.backbone.forward_passes
    trainer.predict(stream.tasks[0].test_x[0])
    passes = trainer.backbone.forward_passes - before

    total_params = trainer.backbone.parameter_count()
    if trainer.engine is not None:
        trainable, frozen, _ = trainer.engine.trainable_parameter_count(
            classifier=trainer.classifier.parameter_count())
        total_params += trainable + frozen
    else:
        trainable = per_task[-1].trainable_params
        total_params = trainable  # seq_ft trains the whole model

    record = {
        "config": cfg.snapshot(),
        "per_task": [
            {"t": r.t, "J_t": r.j_t, "sim_t": r.sim_t,
             "trainable_params": r.trainable_params}
            for r in per_task
        ],
        "S": [[None if np.isnan(matrix.s[t, u]) else matrix.s[t, u]
               for u in range(1, upto + 1)] for t in range(1, upto + 1)],
        "A_T": average_accuracy(matrix, upto),
        "F_T": forgetting(matrix, upto),
        "forward_passes_per_inference": passes,
        "trainable_params_final": trainable,
        "total_params": total_params,
        "backbone_params": trainer.backbone.parameter_count(),
    }
    return record, trainer, matrix


def save_record(record, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_record(path):
    with open(path) as fh:
        return json.load(fh)


def sweep(cfg: ExperimentConfig, param, values, progress=None):
    """Independent runs per value over a shared stream seed."""
    if param not in SWEEPABLE:
        raise ValueError(f"cannot sweep {param!r}; choose one of {SWEEPABLE}")
    records = []
    for value in values:
        if param == "lambda":
            varied = cfg.with_overrides(train={"lam": float(value)})
        elif param == "prompted_layers":
            layers = list(value) if isinstance(value, (list, tuple)) else [
                int(x) for x in str(value).split("+")]
            varied = cfg.with_overrides(prompt={"prompted_layers": layers})
        else:
            varied = cfg.with_overrides(
                prompt={param: int(value)},
                **({"similarity": {"j_max": int(value)}} if param == "j_max" else {}))
        record, _, _ = run(varied, progress=progress)
        record["sweep"] = {"param": param, "value": value}
        records.append(record)
    return records


# -- finite-difference suite ---------------------------------------------------

def tiny_experiment():
    """Smallest end-to-end model that still exercises every parameter group."""
    bc = BackboneConfig(image_size=16, patch_size=8, channels=1, d=8, heads=2,
                        layers=2, ffn_hidden=16, seed=11)
    pc = PromptConfig(l_p=2, k=2, prompted_layers=(0,), j_max=2, seed=12)
    return bc, pc


def gradcheck_suite(corrupt=False):
    """Finite-difference check of every trainable group through a full forward.

    Returns (report, group_errors dict). ``corrupt`` deliberately breaks one
    backward closure as a negative control.
    """
    bc, pc = tiny_experiment()
    # with a much smaller init std the prefix-key gradients sit at the
    # central-difference roundoff floor and relative error is unmeasurable
    backbone = FrozenBackbone(bc)
    engine = PromptEngine(bc, pc)
    engine.begin_task(1, 2)
    rng = np.random.default_rng(13)
    images = [rng.normal(size=(bc.channels, bc.image_size, bc.image_size))
              for _ in range(2)]
    w_cls = Tensor(rng.normal(0.0, 0.5, size=(bc.d, 2)), requires_grad=True)
    b_cls = Tensor(np.zeros(2), requires_grad=True)
    labels = np.array([1, 0])

    params = {name: t for name, t in engine.shared_tensors()}
    for name, t in engine.groups[0].tensors():
        params[name] = t
    params["classifier.w"] = w_cls
    params["classifier.b"] = b_cls

    provider = engine.make_provider()

    def objective():
        engine.begin_step()
        rows = [backbone.forward(img, provider)[0].reshape(1, -1)
                for img in images]
        logits = ad.matmul(ad.concat(rows, axis=0), w_cls) + b_cls
        loss = ad.cross_entropy(logits, labels)
        if corrupt:
            loss = _corrupted(loss)
        return loss

    report = finite_diff_check(objective, params)
    groups = {}
    for name, err in report.per_parameter_errors:
        key = name.split(".")[0]
        groups[key] = max(groups.get(key, 0.0), err)
    return report, groups


def _corrupted(x):
    """Identity forward with a wrong backward; negative-control fixture."""

    def backward(g):
        x._accumulate(g * 3.0)

    return ad._make(x.data.copy(), (x,), backward)
