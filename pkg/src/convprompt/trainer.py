"""Class-incremental training loop, optimizer, and continual metrics.

Per task: budget generators from task similarity, snapshot the shared
parameters, allocate a fresh generator group, grow the classifier, then
minimize classification loss plus (after the first task) the weighted L1
drift of the shared parameters from the snapshot. Previous groups and the
backbone stay untouched; evaluation predicts over all seen classes with
no task oracle.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import similarity as sim
from .autodiff import Tensor
from .prompts import DirectPrefixEngine, PromptEngine

MASK_VALUE = -1e9


@dataclass
class TrainConfig:
    lam: float = 0.1
    epochs: int = 8
    batch_size: int = 16
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    baseline_mode: str = "convprompt"  # convprompt | seq_ft | se_only

    def __post_init__(self):
        if not 0.0 <= self.lam:
            raise ValueError("lambda must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.baseline_mode not in ("convprompt", "seq_ft", "se_only"):
            raise ValueError(f"unknown baseline mode {self.baseline_mode!r}")


class Adam(object):
    """Adaptive-moment optimizer over named trainable tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if not np.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient in {name}")
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * p.grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * p.grad ** 2
            mhat = self.m[name] / (1 - self.beta1 ** self.t)
            vhat = self.v[name] / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class ClassifierHead:
    """Growing affine map d -> C_total; per-task weight blocks, never frozen."""

    def __init__(self, d, seed=0):
        self.d = d
        self.rng = np.random.default_rng(seed)
        self.blocks = []     # (task_id, W Tensor d x C_t, b Tensor C_t)
        self.class_ids = []  # column -> global class id

    def add_task(self, task_id, class_ids):
        clash = set(class_ids) & set(self.class_ids)
        if clash:
            raise ValueError(f"class ids already seen: {sorted(clash)}")
        c = len(class_ids)
        w = Tensor(self.rng.normal(0.0, 0.02, size=(self.d, c)), requires_grad=True)
        b = Tensor(np.zeros(c), requires_grad=True)
        self.blocks.append((task_id, w, b))
        self.class_ids.extend(class_ids)

    def column_of(self, class_id):
        return self.class_ids.index(class_id)

    def logits(self, features):
        """features: B x d tensor -> B x C_total logits."""
        parts = [ad.add(ad.matmul(features, w), b) for _, w, b in self.blocks]
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)

    def params(self):
        out = {}
        for task_id, w, b in self.blocks:
            out[f"classifier.t{task_id}.w"] = w
            out[f"classifier.t{task_id}.b"] = b
        return out

    def parameter_count(self):
        return sum(w.size + b.size for _, w, b in self.blocks)


@dataclass
class TaskReport:
    t: int
    j_t: int
    sim_t: float | None
    trainable_params: int
    frozen_prompt_params: int
    final_loss: float


class AccuracyMatrix:
    """S[t][T']: accuracy of task t's test set after training through T'."""

    def __init__(self, num_tasks):
        self.s = np.full((num_tasks + 1, num_tasks + 1), np.nan)  # 1-based

    def set(self, t, upto, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("accuracy outside [0, 1]")
        self.s[t, upto] = value

    def get(self, t, upto):
        return float(self.s[t, upto])

    def column(self, upto):
        return self.s[1:upto + 1, upto]


def average_accuracy(matrix: AccuracyMatrix, upto):
    col = matrix.column(upto)
    if np.isnan(col).any():
        raise ValueError(f"accuracy column {upto} incomplete")
    return float(np.mean(col))


def forgetting(matrix: AccuracyMatrix, upto):
    """Mean over earlier tasks of (peak accuracy before T) minus final accuracy."""
    if upto < 2:
        return None
    drops = []
    for t in range(1, upto):
        past = matrix.s[t, t:upto]
        if np.isnan(past).any() or np.isnan(matrix.s[t, upto]):
            raise ValueError("accuracy matrix incomplete for forgetting")
        drops.append(float(np.max(past) - matrix.s[t, upto]))
    return float(np.mean(drops))


class ContinualTrainer:
    """Owns the model pieces and runs tasks strictly in order."""

    def __init__(self, backbone, engine, sim_config: sim.SimilarityConfig,
                 train_config: TrainConfig, embedder=None):
        self.backbone = backbone
        self.engine = engine
        self.sim_config = sim_config
        self.config = train_config
        self.embedder = embedder or sim.TextEmbedder(sim_config)
        self.pool = sim.AttributePool()
        self.label_pool = []        # class-label embeddings of seen tasks
        self.image_mean_pool = []   # per-class mean CLS features of seen tasks
        self.classifier = ClassifierHead(backbone.config.d, seed=train_config.seed)
        self.tasks_done = 0
        self._current_class_ids = None
        self.rng = np.random.default_rng(train_config.seed)
        mode = train_config.baseline_mode
        if mode == "seq_ft":
            backbone.set_trainable(True)
        else:
            backbone.set_trainable(False)

    # -- similarity plumbing -------------------------------------------------

    def _attribute_records(self, task):
        records = []
        for name in task.class_names:
            for text in task.attributes.get(name, []):
                records.append(sim.AttributeRecord(
                    task_id=task.task_id, class_name=name, attribute_text=text,
                    embedding=self.embedder.embed(text)))
        return records

    def _class_feature_means(self, task):
        means = []
        with ad.no_grad():
            for cid in task.class_ids:
                feats = [self.backbone.forward(x)[0].data
                         for x in task.train_x[task.train_y == cid]]
                means.append(np.mean(feats, axis=0))
        return means

    def _budget(self, task):
        """Compute (sim_t, J_t) and stage the pool update for after budgeting."""
        mode = self.sim_config.mode
        if mode == "attribute":
            records = self._attribute_records(task)
            s = sim.task_similarity(task.task_id, records, self.pool)
            update = lambda: self.pool.add(records)
        elif mode == "class_label":
            s = sim.class_label_similarity(
                task.task_id, task.class_names, self.label_pool, self.embedder)
            update = lambda: self.label_pool.extend(
                self.embedder.embed(n) for n in task.class_names)
        else:
            means = self._class_feature_means(task)
            s = sim.image_task_similarity(task.task_id, means, self.image_mean_pool)
            update = lambda: self.image_mean_pool.extend(means)
        j_t = sim.num_generators(s, self.sim_config.j_max)
        return s, j_t, update

    # -- training ------------------------------------------------------------

    def _trainable_params(self):
        params = dict(self.classifier.params())
        if self.config.baseline_mode == "seq_ft":
            params.update(self.backbone.trainable_params())
        if self.engine is not None:
            for name, t in self.engine.shared_tensors():
                params[name] = t
            if isinstance(self.engine, PromptEngine):
                for g in self.engine.groups:
                    if not g.frozen:
                        for name, t in g.tensors():
                            params[name] = t
        return params

    def _forward_features(self, images, provider):
        rows = []
        for img in images:
            cls, _ = self.backbone.forward(img, provider)
            rows.append(cls.reshape(1, -1))
        return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)

    def batch_loss(self, images, labels, provider, snapshot, t):
        """(total, classification, regularization) loss tensors for one batch."""
        features = self._forward_features(images, provider)
        logits = self.classifier.logits(features)
        cols = [self.classifier.column_of(c) for c in labels]
        # cross-task logits are masked out during training only
        active = self._current_class_ids or set(self.classifier.class_ids)
        mask = np.array([0.0 if cid in active else MASK_VALUE
                         for cid in self.classifier.class_ids])
        masked = ad.add(logits, Tensor(mask))
        ce = ad.cross_entropy(masked, cols)
        reg = Tensor(0.0)
        if self.engine is not None and snapshot is not None:
            reg = self.engine.regularization_loss(snapshot)
        if t > 1 and self.engine is not None and snapshot is not None:
            total = ad.add(ce, ad.mul(reg, self.config.lam))
        else:
            total = ce
        return total, ce, reg

    def train_task(self, task):
        if task.task_id != self.tasks_done + 1:
            raise ValueError(
                f"tasks must be trained in order; expected {self.tasks_done + 1}")
        t = task.task_id
        mode = self.config.baseline_mode

        sim_t, j_t, pool_update = (None, self.sim_config.j_max, None)
        if mode == "convprompt":
            sim_t, j_t, pool_update = self._budget(task)

        snapshot = self.engine.snapshot_shared() if self.engine is not None else None
        if isinstance(self.engine, PromptEngine):
            self.engine.begin_task(t, j_t)
        self.classifier.add_task(t, task.class_ids)
        self._current_class_ids = set(task.class_ids)

        params = self._trainable_params()
        opt = Adam(params, lr=self.config.lr, beta1=self.config.beta1,
                   beta2=self.config.beta2, eps=self.config.eps)
        provider = self.engine.make_provider() if self.engine is not None else None
        n = len(task.train_y)
        final_loss = 0.0
        for _ in range(self.config.epochs):
            order = self.rng.permutation(n)
            for start in range(0, n, self.config.batch_size):
                idx = order[start:start + self.config.batch_size]
                if self.engine is not None:
                    self.engine.begin_step()
                opt.zero_grad()
                total, _, _ = self.batch_loss(
                    task.train_x[idx], task.train_y[idx], provider, snapshot, t)
                total.backward()
                opt.step()
                final_loss = total.item()
        if self.engine is not None:
            self.engine.begin_step()
        snapshot = None  # discarded after the task
        if pool_update is not None:
            pool_update()
        self.tasks_done += 1
        self._current_class_ids = None

        if self.engine is not None:
            trainable, frozen, _ = self.engine.trainable_parameter_count(
                classifier=self.classifier.parameter_count())
        else:
            trainable = self.classifier.parameter_count() + sum(
                p.size for p in self.backbone.trainable_params().values())
            frozen = 0
        return TaskReport(t=t, j_t=j_t if mode == "convprompt" else 0,
                          sim_t=sim_t, trainable_params=trainable,
                          frozen_prompt_params=frozen, final_loss=final_loss)

    # -- evaluation ----------------------------------------------------------

    def predict(self, image, provider=None):
        if provider is None and self.engine is not None:
            provider = self.engine.make_provider()
        with ad.no_grad():
            cls, _ = self.backbone.forward(image, provider)
            logits = self.classifier.logits(cls.reshape(1, -1)).data[0]
        # ties break toward the lowest column, i.e. the earliest-seen class
        return self.classifier.class_ids[int(np.argmax(logits))]

    def accuracy(self, images, labels):
        provider = self.engine.make_provider() if self.engine is not None else None
        if self.engine is not None:
            self.engine.begin_step()
        threads = int(os.environ.get("CONVPROMPT_THREADS", "1"))
        if threads > 1:
            with ad.no_grad():
                if self.engine is not None:
                    # warm shared caches before fanning out
                    for layer in getattr(self.engine.config, "prompted_layers", ()):
                        if getattr(self.engine, "groups", None):
                            self.engine._component_matrices(layer)
                            self.engine._key_matrix(layer)
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    preds = list(pool.map(
                        lambda img: self.predict(img, provider), images))
        else:
            preds = [self.predict(img, provider) for img in images]
        return float(np.mean(np.asarray(preds) == np.asarray(labels)))

    def evaluate(self, tasks, matrix: AccuracyMatrix):
        """Fill column tasks_done of the accuracy matrix over all seen tasks."""
        upto = self.tasks_done
        for task in tasks[:upto]:
            matrix.set(task.task_id, upto, self.accuracy(task.test_x, task.test_y))
        return matrix.column(upto)
