"""Alignment scores, layer-wise score increments, and softmax merge weights.

A ScoreTable holds one alignment score per expert per layer (mean cosine
between projected features and text embeddings on a held-out set) plus the
softmax temperature. Scores can be ingested directly from JSON or computed
from pre-extracted feature containers; the merge weight for expert i at
layer l is the temperature softmax over experts of the layer-wise score
increment.

Score JSON schema::

    {"beta": 0.05, "experts": [{"id": "a", "scores": [s1, ..., sL]}, ...]}

Feature containers hold "texts" (M, d) plus "expert.{id}.layer.{l}.features"
tensors (M, d), one vector per sample: token-grid features must be mean
pooled per sample upstream.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import ZERO_NORM
from .tensorstore import read_container

DEFAULT_BETA = 0.05


@dataclass(frozen=True)
class ScoreTable:
    """Per-expert, per-layer alignment scores with a softmax temperature."""

    expert_ids: tuple[str, ...]
    scores: np.ndarray  # (N, L)
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        ids = tuple(str(i) for i in self.expert_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("expert ids must be unique")
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != len(ids) or s.shape[0] < 1 or s.shape[1] < 1:
            raise ValueError(f"scores must be (num_experts, num_layers), got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("scores contain NaN or Inf")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        object.__setattr__(self, "expert_ids", ids)
        object.__setattr__(self, "scores", s)

    @property
    def num_layers(self) -> int:
        return self.scores.shape[1]

    def rows_for(self, expert_ids: Sequence[str]) -> np.ndarray:
        """Score rows for the given ids, in the given order."""
        index = {eid: i for i, eid in enumerate(self.expert_ids)}
        missing = [eid for eid in expert_ids if eid not in index]
        if missing:
            raise ValueError(f"score table is missing experts: {missing}")
        return self.scores[[index[eid] for eid in expert_ids]]


@dataclass(frozen=True)
class LayerWeights:
    """Softmax merge weights, one column per layer, each summing to 1.

    Entries are strictly positive in exact arithmetic but may saturate to 0
    or 1 in float64 at extreme temperatures.
    """

    alpha: np.ndarray  # (N, L)

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"alpha must be 2-D, got shape {a.shape}")
        if np.any(a < 0.0) or np.any(a > 1.0):
            raise ValueError("alpha entries must lie in [0, 1]")
        col = a.sum(axis=0)
        if np.any(np.abs(col - 1.0) > 1e-12):
            raise ValueError("alpha columns must sum to 1")
        object.__setattr__(self, "alpha", a)


def _rowwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na >= ZERO_NORM) & (nb >= ZERO_NORM)
    out = np.zeros(a.shape[0])
    dots = np.einsum("ij,ij->i", a, b)
    out[ok] = dots[ok] / (na[ok] * nb[ok])
    return np.clip(out, -1.0, 1.0)


def compute_scores_from_features(layer_features: Sequence, texts) -> np.ndarray:
    """Mean per-sample cosine between each layer's features and the text embeddings.

    `layer_features` is one (M, d) array per layer; `texts` is (M, d).
    Returns a length-L score vector.
    """
    t = np.asarray(texts, dtype=np.float64)
    if t.ndim != 2:
        raise ValueError(f"texts must be (samples, dim), got shape {t.shape}")
    if t.shape[0] == 0:
        raise ValueError("need at least one sample")
    if len(layer_features) == 0:
        raise ValueError("need at least one layer of features")
    out = np.zeros(len(layer_features))
    for li, feats in enumerate(layer_features):
        f = np.asarray(feats, dtype=np.float64)
        if f.shape != t.shape:
            raise ValueError(
                f"layer {li + 1} features have shape {f.shape}, expected {t.shape}")
        out[li] = _rowwise_cosine(f, t).mean()
    return out


def score_increments(scores) -> np.ndarray:
    """Layer-wise increments along the last axis; the first layer keeps its raw score."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim not in (1, 2) or s.shape[-1] < 1:
        raise ValueError(f"scores must be a vector or (N, L) matrix, got shape {s.shape}")
    return np.concatenate([s[..., :1], np.diff(s, axis=-1)], axis=-1)


def layer_weights(increments, beta: float) -> LayerWeights:
    """Column-wise temperature softmax of score increments across experts."""
    if not beta > 0.0:
        raise ValueError(f"beta must be positive, got {beta}")
    inc = np.asarray(increments, dtype=np.float64)
    if inc.ndim != 2:
        raise ValueError(f"increments must be (num_experts, num_layers), got {inc.shape}")
    z = inc / float(beta)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return LayerWeights(alpha=e / e.sum(axis=0, keepdims=True))


def threshold_from_ratio(consistencies, rho: float) -> float:
    """Order-statistic threshold for a retention ratio rho in (0, 1).

    With m sorted values, returns the max(1, floor(m * (1 - rho)))-th smallest.
    """
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must be in (0, 1), got {rho}")
    c = np.asarray(consistencies, dtype=np.float64).ravel()
    m = c.size
    if m < 1:
        raise ValueError("need at least one consistency value")
    k = max(1, int(math.floor(m * (1.0 - rho))))
    k = min(k, m)
    return float(np.sort(c)[k - 1])


def read_scores(path) -> ScoreTable:
    """Parse a score JSON file; a missing beta falls back to 0.05 with a warning."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed score JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("experts"), list):
        raise ValueError(f"{path}: expected an object with an 'experts' list")
    if "beta" in doc:
        beta = doc["beta"]
        if not isinstance(beta, (int, float)) or isinstance(beta, bool):
            raise ValueError(f"{path}: beta must be a number, got {beta!r}")
        beta = float(beta)
    else:
        warnings.warn(f"{path}: no beta in score file, defaulting to {DEFAULT_BETA}")
        beta = DEFAULT_BETA
    ids, rows = [], []
    for entry in doc["experts"]:
        if not isinstance(entry, dict) or "id" not in entry or "scores" not in entry:
            raise ValueError(f"{path}: each expert needs 'id' and 'scores'")
        values = entry["scores"]
        if (not isinstance(values, list) or not values
                or any(not isinstance(v, (int, float)) or isinstance(v, bool) for v in values)):
            raise ValueError(f"{path}: expert {entry['id']!r} has invalid scores")
        ids.append(str(entry["id"]))
        rows.append([float(v) for v in values])
    if not ids:
        raise ValueError(f"{path}: no experts in score file")
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ValueError(f"{path}: ragged score lists, lengths {sorted(lengths)}")
    return ScoreTable(expert_ids=tuple(ids), scores=np.array(rows), beta=beta)


def write_scores(path, table: ScoreTable) -> None:
    doc = {
        "beta": table.beta,
        "experts": [
            {"id": eid, "scores": [float(v) for v in row]}
            for eid, row in zip(table.expert_ids, table.scores)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def score_table_from_feature_container(path, beta: float = DEFAULT_BETA) -> ScoreTable:
    """Build a ScoreTable from a pre-extracted feature container.

    Expert ids are ordered lexicographically; every expert must provide the
    same contiguous 1..L layer range over the same samples as "texts".
    """
    tensors = {t.name: t for t in read_container(path)}
    if "texts" not in tensors:
        raise ValueError(f"{path}: feature container is missing the 'texts' tensor")
    texts = tensors.pop("texts").data
    per_expert: dict[str, dict[int, np.ndarray]] = {}
    for name, tensor in tensors.items():
        parts = name.split(".")
        if len(parts) < 4 or parts[0] != "expert" or parts[-3] != "layer" or parts[-1] != "features":
            raise ValueError(f"{path}: unexpected tensor name {name!r}")
        eid = ".".join(parts[1:-3])
        try:
            layer = int(parts[-2])
        except ValueError as exc:
            raise ValueError(f"{path}: bad layer index in {name!r}") from exc
        per_expert.setdefault(eid, {})[layer] = tensor.data
    if not per_expert:
        raise ValueError(f"{path}: no expert feature tensors found")
    ids = sorted(per_expert)
    num_layers = {len(layers) for layers in per_expert.values()}
    if len(num_layers) != 1:
        raise ValueError(f"{path}: experts disagree on layer count: {sorted(num_layers)}")
    depth = num_layers.pop()
    rows = []
    for eid in ids:
        layers = per_expert[eid]
        if sorted(layers) != list(range(1, depth + 1)):
            raise ValueError(f"{path}: expert {eid!r} layers must be 1..{depth} contiguous")
        rows.append(compute_scores_from_features([layers[i] for i in range(1, depth + 1)], texts))
    return ScoreTable(expert_ids=tuple(ids), scores=np.stack(rows), beta=beta)
