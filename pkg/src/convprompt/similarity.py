"""Inter-task similarity and prompt-generator budgeting.

Class attributes (text) are embedded, pooled across seen tasks, and each
new task's attributes are matched against the pool by maximum cosine; the
mean of those maxima is the task similarity, which shrinks the generator
budget: J_t = clamp(round_half_up((1 - sim_t) * J_max), 1, J_max). The
first task has no history and receives the full budget.

Text embeddings normally arrive precomputed in the attribute file; the
hashed character-trigram fallback keeps tests hermetic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

NO_HISTORY = None

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


class EmbeddingLookupError(KeyError):
    """Requested text has no precomputed embedding."""


@dataclass
class AttributeRecord:
    task_id: int
    class_name: str
    attribute_text: str
    embedding: np.ndarray

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        norm = np.linalg.norm(self.embedding)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(
                f"attribute embedding for {self.attribute_text!r} is not unit-norm "
                f"(|v|={norm:.8f})")


class AttributePool:
    """Append-only store of attribute embeddings for all seen tasks."""

    def __init__(self):
        self.records: list[AttributeRecord] = []

    def add(self, records):
        self.records.extend(records)

    def embeddings(self):
        if not self.records:
            return np.zeros((0, 0))
        return np.stack([r.embedding for r in self.records])

    def __len__(self):
        return len(self.records)


@dataclass
class SimilarityConfig:
    j_max: int = 3
    mode: str = "attribute"          # attribute | class_label | image
    embedder: str = "deterministic"  # deterministic | file
    d_e: int = 64

    def __post_init__(self):
        if self.j_max < 1:
            raise ValueError("j_max must be >= 1")
        if self.mode not in ("attribute", "class_label", "image"):
            raise ValueError(f"unknown similarity mode {self.mode!r}")
        if self.embedder not in ("deterministic", "file"):
            raise ValueError(f"unknown embedder {self.embedder!r}")


def _fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


class TextEmbedder:
    """Deterministic fallback embedder or exact-key file lookup."""

    def __init__(self, config: SimilarityConfig, table: dict | None = None):
        self.config = config
        self.table = table or {}

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        if self.config.embedder == "file":
            if text not in self.table:
                raise EmbeddingLookupError(text)
            return np.asarray(self.table[text], dtype=np.float64)
        return self._hash_trigrams(text)

    def _hash_trigrams(self, text: str) -> np.ndarray:
        text = text.lower()
        counts = np.zeros(self.config.d_e)
        for i in range(max(len(text) - 2, 0)):
            tri = text[i:i + 3]
            counts[_fnv1a_64(tri.encode("utf-8")) % self.config.d_e] += 1.0
        norm = np.linalg.norm(counts)
        if norm == 0.0:
            # texts shorter than one trigram fall back to whole-string hashing
            counts[_fnv1a_64(text.encode("utf-8")) % self.config.d_e] = 1.0
            norm = 1.0
        return counts / norm


def _mean_of_max(current: np.ndarray, pool: np.ndarray) -> float:
    """Mean over current rows of the maximum cosine against pool rows.

    All rows are unit vectors, so cosine reduces to a dot product.
    """
    sims = current @ pool.T
    return float(np.mean(sims.max(axis=1)))


def task_similarity(t, current_records, pool: AttributePool):
    """Similarity of task t to history; NO_HISTORY when the pool is empty."""
    if not current_records:
        raise ValueError("task has no attributes")
    if len(pool) == 0:
        return NO_HISTORY
    current = np.stack([r.embedding for r in current_records])
    sim = _mean_of_max(current, pool.embeddings())
    return min(max(sim, 0.0), 1.0)


def num_generators(sim_or_sentinel, j_max: int) -> int:
    """Budget J_t from similarity; first task (no history) gets the full budget."""
    if j_max < 1:
        raise ValueError("j_max must be >= 1")
    if sim_or_sentinel is NO_HISTORY:
        return j_max
    raw = (1.0 - sim_or_sentinel) * j_max
    return int(min(max(math.floor(raw + 0.5), 1), j_max))


def image_task_similarity(t, class_feature_means, pool_of_class_means):
    """Per current class: max cosine against stored class means; then mean."""
    if not class_feature_means:
        raise ValueError("no class feature means supplied")
    if not pool_of_class_means:
        return NO_HISTORY

    def unit(rows):
        m = np.stack([np.asarray(r, dtype=np.float64) for r in rows])
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        return m / norms

    sim = _mean_of_max(unit(class_feature_means), unit(pool_of_class_means))
    return min(max(sim, 0.0), 1.0)


def class_label_similarity(t, labels, pool_of_label_embeddings, embedder: TextEmbedder):
    """Max-then-mean over label-text embeddings instead of attribute texts."""
    if not labels:
        raise ValueError("no class labels supplied")
    if len(pool_of_label_embeddings) == 0:
        return NO_HISTORY
    current = np.stack([embedder.embed(lbl) for lbl in labels])
    pool = np.stack([np.asarray(v, dtype=np.float64) for v in pool_of_label_embeddings])
    sim = _mean_of_max(current, pool)
    return min(max(sim, 0.0), 1.0)


# -- attribute file ingestion -------------------------------------------------

def load_attribute_file(path, config: SimilarityConfig | None = None):
    """Parse the attribute JSON file into per-task AttributeRecord lists.

    Schema: {"tasks": [{"id", "classes": [{"name", "attributes",
    "embeddings"?}]}]}. Explicit embeddings override the embedder and must
    be unit-normalized (checked to 1e-6).
    """
    config = config or SimilarityConfig()
    with open(path) as fh:
        doc = json.load(fh)
    if "tasks" not in doc or not isinstance(doc["tasks"], list):
        raise ValueError("attribute file must contain a 'tasks' list")
    table = {}
    for task in doc["tasks"]:
        for cls in task.get("classes", []):
            if "embeddings" in cls:
                if len(cls["embeddings"]) != len(cls["attributes"]):
                    raise ValueError(
                        f"class {cls['name']!r}: embeddings/attributes length mismatch")
                for text, vec in zip(cls["attributes"], cls["embeddings"]):
                    table[text] = np.asarray(vec, dtype=np.float64)
    embedder = TextEmbedder(
        SimilarityConfig(j_max=config.j_max, mode=config.mode,
                         embedder="file" if table else config.embedder,
                         d_e=config.d_e),
        table=table)
    tasks = []
    for task in doc["tasks"]:
        records = []
        for cls in task.get("classes", []):
            for text in cls["attributes"]:
                records.append(AttributeRecord(
                    task_id=task["id"], class_name=cls["name"],
                    attribute_text=text, embedding=embedder.embed(text)))
        tasks.append((task["id"], records))
    return tasks, embedder
