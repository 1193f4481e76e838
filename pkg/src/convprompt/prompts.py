"""Convolutional prompt generation and similarity-weighted assembly.

Task-shared embedding matrices are convolved with per-task generator
kernels to produce prompt components; a shared two-layer projection of
the running CLS embedding is matched against learnable prompt keys, and
the resulting cosine scores mix the components into the final per-head
key/value prefixes. Generators and keys of finished tasks are frozen;
the shared embeddings and projection network keep learning.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import serialize
from .autodiff import Tensor
from .backbone import BackboneConfig, PrefixSet


@dataclass
class PromptConfig:
    l_p: int = 4
    k: int = 3
    prompted_layers: tuple = (0, 1, 2)
    j_max: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.l_p < 1 or self.k < 1:
            raise ValueError("l_p and k must be positive")
        if self.j_max < 1:
            raise ValueError("j_max must be >= 1")
        self.prompted_layers = tuple(self.prompted_layers)


class GeneratorGroup:
    """One task's generators and prompt keys; frozen once the task ends."""

    def __init__(self, task_id, j, kernels, keys):
        self.task_id = task_id
        self.j = j
        self.kernels = kernels   # (layer, head, kv) -> [Tensor k x k] * j
        self.keys = keys         # layer -> [Tensor d_pi] * j
        self.frozen = False

    def freeze(self):
        self.frozen = True
        for ks in self.kernels.values():
            for t in ks:
                t.requires_grad = False
        for ks in self.keys.values():
            for t in ks:
                t.requires_grad = False

    def tensors(self):
        for key, ks in sorted(self.kernels.items()):
            for i, t in enumerate(ks):
                yield (f"group{self.task_id}.G.{key[0]}.{key[1]}.{key[2]}.{i}", t)
        for layer, ks in sorted(self.keys.items()):
            for i, t in enumerate(ks):
                yield (f"group{self.task_id}.pi.{layer}.{i}", t)

    def checksum(self):
        h = hashlib.sha256()
        for name, t in self.tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class PromptEngine:
    """Owns shared embeddings, generator groups, keys, and the projection net."""

    def __init__(self, backbone_config: BackboneConfig, config: PromptConfig):
        bc, pc = backbone_config, config
        if bc.d % 4 != 0:
            raise ValueError("embedding dim must be divisible by 4 for the projection net")
        if any(l < 0 or l >= bc.layers for l in pc.prompted_layers):
            raise ValueError("prompted layer index out of range")
        self.bc = bc
        self.config = pc
        self.d_pi = bc.d // 4
        self.rng = np.random.default_rng(pc.seed)
        self.groups: list[GeneratorGroup] = []
        self.degenerate_weight_events = 0
        self._cache = {}

        se_shape = (pc.l_p + pc.k - 1, bc.d_h + pc.k - 1)
        self.shared = {}
        for layer in pc.prompted_layers:
            for h in range(bc.heads):
                for kv in ("K", "V"):
                    self.shared[(layer, h, kv)] = _uniform(
                        self.rng, bc.d_h + pc.k - 1, se_shape)
        half = bc.d // 2
        self.pn = {
            "w1": _uniform(self.rng, bc.d, (bc.d, half)),
            "b1": _uniform(self.rng, bc.d, (half,)),
            "w2": _uniform(self.rng, half, (half, self.d_pi)),
            "b2": _uniform(self.rng, half, (self.d_pi,)),
        }

    # -- bookkeeping ---------------------------------------------------------

    @property
    def num_tasks(self):
        return len(self.groups)

    @property
    def total_components(self):
        return sum(g.j for g in self.groups)

    def begin_task(self, t, j_t):
        """Freeze existing groups and allocate a fresh trainable group."""
        if t != len(self.groups) + 1:
            raise ValueError(f"tasks must arrive in order; expected {len(self.groups) + 1}, got {t}")
        if j_t < 1:
            raise ValueError("each task needs at least one generator")
        for g in self.groups:
            g.freeze()
        pc, bc = self.config, self.bc
        kernels = {}
        for layer in pc.prompted_layers:
            for h in range(bc.heads):
                for kv in ("K", "V"):
                    kernels[(layer, h, kv)] = [
                        _uniform(self.rng, pc.k * pc.k, (pc.k, pc.k))
                        for _ in range(j_t)
                    ]
        keys = {}
        for layer in pc.prompted_layers:
            vecs = []
            for _ in range(j_t):
                v = self.rng.normal(size=self.d_pi)
                v /= np.linalg.norm(v)
                vecs.append(Tensor(v, requires_grad=True))
            keys[layer] = vecs
        self.groups.append(GeneratorGroup(t, j_t, kernels, keys))
        self._cache.clear()

    def begin_step(self):
        """Invalidate per-step component caches (call after each optimizer step)."""
        self._cache.clear()

    # -- prompt pipeline -----------------------------------------------------

    def generate_components(self, layer):
        """Convolve shared embeddings with every group's kernels.

        Returns (head, kv) -> list of l_p x d_h component tensors in group
        allocation order.
        """
        if not self.groups:
            raise RuntimeError("no generator groups allocated")
        comps = {}
        for h in range(self.bc.heads):
            for kv in ("K", "V"):
                se = self.shared[(layer, h, kv)]
                comps[(h, kv)] = [
                    ad.conv2d_valid(se, kern)
                    for g in self.groups
                    for kern in g.kernels[(layer, h, kv)]
                ]
        return comps

    def _component_matrices(self, layer):
        """Cached (head, kv) -> M x (l_p*d_h) stacked component matrix."""
        key = ("comp", layer)
        if key not in self._cache:
            comps = self.generate_components(layer)
            flat = {
                hk: ad.concat([c.reshape(1, -1) for c in cs], axis=0)
                for hk, cs in comps.items()
            }
            self._cache[key] = flat
        return self._cache[key]

    def _key_matrix(self, layer):
        key = ("keys", layer)
        if key not in self._cache:
            rows = [k.reshape(1, -1) for g in self.groups for k in g.keys[layer]]
            self._cache[key] = ad.concat(rows, axis=0)
        return self._cache[key]

    def project(self, cls):
        """Two-layer ReLU projection of a CLS embedding into key space."""
        h = ad.relu(ad.add(ad.matmul(cls.reshape(1, -1), self.pn["w1"]), self.pn["b1"]))
        return ad.add(ad.matmul(h, self.pn["w2"]), self.pn["b2"]).reshape(-1)

    def compute_weights(self, cls, layer):
        """Cosine scores between the projected CLS and this layer's prompt keys.

        Returns a 1 x M tensor; scores are shared by all heads of the layer.
        """
        q = self.project(cls)
        keys = self._key_matrix(layer)
        if float(np.linalg.norm(q.data)) == 0.0 or np.any(
                np.linalg.norm(keys.data, axis=1) == 0.0):
            self.degenerate_weight_events += 1
            return Tensor(np.zeros((1, keys.shape[0])))
        dots = ad.matmul(keys, q.reshape(-1, 1))
        key_norms = ad.sqrt(ad.tsum(ad.mul(keys, keys), axis=1, keepdims=True))
        q_norm = ad.sqrt(ad.tsum(ad.mul(q, q)))
        return ad.div(ad.div(dots, key_norms), q_norm).reshape(1, -1)

    def assemble_prompts(self, layer, s):
        """Mix components with score vector s (1 x M) into a PrefixSet entry."""
        comps = self._component_matrices(layer)
        if s.shape[-1] != self.total_components:
            raise ad.ShapeError(
                f"score length {s.shape[-1]} != component count {self.total_components}")
        lp, dh = self.config.l_p, self.bc.d_h
        kp, vp = [], []
        for h in range(self.bc.heads):
            kp.append(ad.matmul(s.reshape(1, -1), comps[(h, "K")]).reshape(lp, dh))
            vp.append(ad.matmul(s.reshape(1, -1), comps[(h, "V")]).reshape(lp, dh))
        return PrefixSet(kp, vp)

    def make_provider(self):
        """Prompt provider callback for the backbone's single forward pass."""
        prompted = set(self.config.prompted_layers)

        def provider(layer, cls):
            if layer not in prompted or not self.groups:
                return None
            s = self.compute_weights(cls, layer)
            return self.assemble_prompts(layer, s)

        return provider

    # -- shared-parameter snapshot and regularization ------------------------

    def shared_tensors(self):
        for key, t in sorted(self.shared.items()):
            yield (f"SE.{key[0]}.{key[1]}.{key[2]}", t)
        for name in sorted(self.pn):
            yield (f"pn.{name}", self.pn[name])

    def snapshot_shared(self):
        """Deep, gradient-detached copy of (SE, projection net)."""
        return {name: t.data.copy() for name, t in self.shared_tensors()}

    def regularization_loss(self, snapshot):
        """L1 drift of shared parameters from the snapshot."""
        total = Tensor(0.0)
        for name, t in self.shared_tensors():
            if snapshot[name].shape != t.data.shape:
                raise ad.ShapeError(f"snapshot shape drift for {name}")
            total = ad.add(total, ad.l1_distance(t, Tensor(snapshot[name])))
        return total

    # -- parameter accounting ------------------------------------------------

    def trainable_parameter_count(self, classifier=0, backbone=0):
        """(trainable, frozen_prompt, backbone) parameter counts."""
        trainable = sum(t.size for _, t in self.shared_tensors())
        frozen = 0
        for g in self.groups:
            n = sum(t.size for _, t in g.tensors())
            if g.frozen:
                frozen += n
            else:
                trainable += n
        return trainable + classifier, frozen, backbone

    def closed_form_counts(self):
        """Closed-form parameter formulas, for cross-checking the live counts."""
        pc, bc = self.config, self.bc
        lp_layers = len(pc.prompted_layers)
        se = lp_layers * bc.heads * 2 * (pc.l_p + pc.k - 1) * (bc.d_h + pc.k - 1)
        pn = bc.d * (bc.d // 2) + bc.d // 2 + (bc.d // 2) * self.d_pi + self.d_pi
        per_task = {
            g.task_id: lp_layers * bc.heads * 2 * g.j * pc.k ** 2
            + lp_layers * g.j * self.d_pi
            for g in self.groups
        }
        return {"se": se, "pn": pn, "per_task": per_task}

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        tensors = {name: t.data for name, t in self.shared_tensors()}
        for g in self.groups:
            for name, t in g.tensors():
                tensors[name] = t.data
        manifest = {
            "tasks": [{"t": g.task_id, "j": g.j, "frozen": g.frozen} for g in self.groups],
            "config": {"l_p": self.config.l_p, "k": self.config.k,
                       "prompted_layers": list(self.config.prompted_layers),
                       "j_max": self.config.j_max, "seed": self.config.seed},
            "backbone": self.bc.__dict__,
        }
        serialize.save_archive(path, tensors, manifest)

    @classmethod
    def load(cls, path):
        tensors, manifest = serialize.load_archive(path)
        bc = BackboneConfig(**manifest["backbone"])
        pcfg = manifest["config"]
        engine = cls(bc, PromptConfig(
            l_p=pcfg["l_p"], k=pcfg["k"],
            prompted_layers=tuple(pcfg["prompted_layers"]),
            j_max=pcfg["j_max"], seed=pcfg["seed"]))
        for entry in manifest["tasks"]:
            engine.begin_task(entry["t"], entry["j"])
        for name, t in engine.shared_tensors():
            t.data = tensors[name].copy()
        for g in engine.groups:
            for name, t in g.tensors():
                t.data = tensors[name].copy()
        for entry, g in zip(manifest["tasks"], engine.groups):
            if entry["frozen"]:
                g.freeze()
        engine._cache.clear()
        return engine


class DirectPrefixEngine:
    """Ablation baseline: per-layer prefixes learned directly, no generators."""

    def __init__(self, backbone_config: BackboneConfig, config: PromptConfig):
        self.bc = backbone_config
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.prefixes = {}
        for layer in config.prompted_layers:
            for h in range(backbone_config.heads):
                for kv in ("K", "V"):
                    self.prefixes[(layer, h, kv)] = _uniform(
                        rng, backbone_config.d_h, (config.l_p, backbone_config.d_h))
        self.degenerate_weight_events = 0

    @property
    def total_components(self):
        return 0

    def begin_task(self, t, j_t):
        pass

    def begin_step(self):
        pass

    def make_provider(self):
        prompted = set(self.config.prompted_layers)

        def provider(layer, cls):
            if layer not in prompted:
                return None
            return PrefixSet(
                [self.prefixes[(layer, h, "K")] for h in range(self.bc.heads)],
                [self.prefixes[(layer, h, "V")] for h in range(self.bc.heads)])

        return provider

    def shared_tensors(self):
        for key, t in sorted(self.prefixes.items()):
            yield (f"prefix.{key[0]}.{key[1]}.{key[2]}", t)

    def snapshot_shared(self):
        return {name: t.data.copy() for name, t in self.shared_tensors()}

    def regularization_loss(self, snapshot):
        total = Tensor(0.0)
        for name, t in self.shared_tensors():
            total = ad.add(total, ad.l1_distance(t, Tensor(snapshot[name])))
        return total

    def trainable_parameter_count(self, classifier=0, backbone=0):
        return (sum(t.size for _, t in self.shared_tensors()) + classifier, 0, backbone)
