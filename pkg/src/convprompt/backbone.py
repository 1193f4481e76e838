"""Frozen toy vision-transformer encoder with prefix injection points.

Seeded Gaussian initialization (std configurable, 0.2 by default so the
frozen CLS features stay linearly separable) stands in for large-scale
pretraining at desk scale; every backbone weight is non-trainable unless
the caller explicitly unfreezes (sequential fine-tuning baseline). Blocks
are pre-norm: z' = z + MHSA(LN(z)); out = z' + FFN(LN(z')).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import serialize
from .autodiff import Tensor


@dataclass
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    d: int = 64
    heads: int = 4
    layers: int = 4
    ffn_hidden: int = 128
    seed: int = 0
    init_std: float = 0.2

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.layers < 1:
            raise ValueError("need at least one layer")

    @property
    def d_h(self):
        return self.d // self.heads

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2


class PrefixSet:
    """Per-head key/value prefixes for one layer: two lists of l_p x d_h tensors."""

    def __init__(self, key_prefixes, value_prefixes):
        if len(key_prefixes) != len(value_prefixes):
            raise ad.ShapeError("key/value prefix head counts differ")
        lp = {p.shape[0] for p in key_prefixes} | {p.shape[0] for p in value_prefixes}
        if len(lp) > 1:
            raise ad.ShapeError("all prefixes in a set must share l_p")
        self.key_prefixes = list(key_prefixes)
        self.value_prefixes = list(value_prefixes)

    @property
    def l_p(self):
        return self.key_prefixes[0].shape[0] if self.key_prefixes else 0


class FrozenBackbone:
    """Toy ViT encoder; parameters bit-identical across forwards and tasks."""

    def __init__(self, config: BackboneConfig):
        self.config = config
        self.forward_passes = 0
        rng = np.random.default_rng(config.seed)
        c = config
        patch_dim = c.channels * c.patch_size * c.patch_size

        def w(*shape):
            return Tensor(rng.normal(0.0, c.init_std, size=shape))

        self.params = {"patch_proj": w(patch_dim, c.d), "cls": w(1, c.d),
                       "pos": w(c.num_patches + 1, c.d)}
        for l in range(c.layers):
            p = self.params
            p[f"l{l}.wq"] = w(c.d, c.d)
            p[f"l{l}.wk"] = w(c.d, c.d)
            p[f"l{l}.wv"] = w(c.d, c.d)
            p[f"l{l}.wo"] = w(c.d, c.d)
            p[f"l{l}.bo"] = Tensor(np.zeros(c.d))
            p[f"l{l}.ffn_w1"] = w(c.d, c.ffn_hidden)
            p[f"l{l}.ffn_b1"] = Tensor(np.zeros(c.ffn_hidden))
            p[f"l{l}.ffn_w2"] = w(c.ffn_hidden, c.d)
            p[f"l{l}.ffn_b2"] = Tensor(np.zeros(c.d))
            for ln in ("ln1", "ln2"):
                p[f"l{l}.{ln}_g"] = Tensor(np.ones(c.d))
                p[f"l{l}.{ln}_b"] = Tensor(np.zeros(c.d))
        self.params["final_ln_g"] = Tensor(np.ones(c.d))
        self.params["final_ln_b"] = Tensor(np.zeros(c.d))

    def set_trainable(self, trainable: bool):
        for t in self.params.values():
            t.requires_grad = trainable

    def trainable_params(self):
        return {f"backbone.{k}": v for k, v in self.params.items() if v.requires_grad}

    def parameter_count(self):
        return sum(t.size for t in self.params.values())

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    # -- forward pieces ------------------------------------------------------

    def patch_embed(self, image):
        """image: channels x S x S array -> (N+1) x d token matrix."""
        c = self.config
        img = np.asarray(image, dtype=np.float64)
        if img.shape != (c.channels, c.image_size, c.image_size):
            raise ad.ShapeError(f"image shape {img.shape} does not match config")
        ps = c.patch_size
        n_side = c.image_size // ps
        patches = (img.reshape(c.channels, n_side, ps, n_side, ps)
                      .transpose(1, 3, 0, 2, 4)
                      .reshape(n_side * n_side, c.channels * ps * ps))
        tokens = ad.matmul(Tensor(patches), self.params["patch_proj"])
        tokens = ad.concat([self.params["cls"], tokens], axis=0)
        return ad.add(tokens, self.params["pos"])

    def attention_with_prefix(self, z, layer, prefix: PrefixSet | None):
        c = self.config
        p = self.params
        q_all = ad.matmul(z, p[f"l{layer}.wq"])
        k_all = ad.matmul(z, p[f"l{layer}.wk"])
        v_all = ad.matmul(z, p[f"l{layer}.wv"])
        scale = 1.0 / math.sqrt(c.d_h)
        heads = []
        for h in range(c.heads):
            cols = slice(h * c.d_h, (h + 1) * c.d_h)
            q = q_all[:, cols]
            k = k_all[:, cols]
            v = v_all[:, cols]
            if prefix is not None and prefix.l_p > 0:
                pk = prefix.key_prefixes[h]
                pv = prefix.value_prefixes[h]
                if pk.shape[1] != c.d_h or pv.shape[1] != c.d_h:
                    raise ad.ShapeError("prefix head dimension does not match d_h")
                k = ad.concat([pk, k], axis=0)
                v = ad.concat([pv, v], axis=0)
            attn = ad.softmax(ad.matmul(q, k.T) * scale, axis=-1)
            heads.append(ad.matmul(attn, v))
        out = ad.concat(heads, axis=1)
        return ad.add(ad.matmul(out, p[f"l{layer}.wo"]), p[f"l{layer}.bo"])

    def encoder_layer(self, z, layer, prefix=None):
        p = self.params
        normed = ad.layer_norm(z, p[f"l{layer}.ln1_g"], p[f"l{layer}.ln1_b"])
        z = ad.add(z, self.attention_with_prefix(normed, layer, prefix))
        normed = ad.layer_norm(z, p[f"l{layer}.ln2_g"], p[f"l{layer}.ln2_b"])
        hidden = ad.gelu(ad.add(ad.matmul(normed, p[f"l{layer}.ffn_w1"]),
                                p[f"l{layer}.ffn_b1"]))
        ffn = ad.add(ad.matmul(hidden, p[f"l{layer}.ffn_w2"]), p[f"l{layer}.ffn_b2"])
        return ad.add(z, ffn)

    def forward(self, image, prompt_provider=None):
        """Single pass over all layers.

        ``prompt_provider(layer, cls)`` receives the CLS embedding available
        before the layer executes (layer 0 sees the post-patch-embedding CLS)
        and returns a PrefixSet or None. Returns (final_cls, layerwise_cls).
        """
        self.forward_passes += 1
        z = self.patch_embed(image)
        layerwise = []
        for l in range(self.config.layers):
            prefix = None
            if prompt_provider is not None:
                prefix = prompt_provider(l, z[0, :])
            z = self.encoder_layer(z, l, prefix)
            layerwise.append(z[0, :])
        final = ad.layer_norm(z[0, :], self.params["final_ln_g"],
                              self.params["final_ln_b"])
        return final, layerwise

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        serialize.save_archive(
            path,
            {k: v.data for k, v in self.params.items()},
            manifest={"config": self.config.__dict__},
        )

    @classmethod
    def load(cls, path):
        tensors, manifest = serialize.load_archive(path)
        bb = cls(BackboneConfig(**manifest["config"]))
        for k, arr in tensors.items():
            bb.params[k] = Tensor(arr)
        return bb
