"""
Frozen-feature evaluation
Feature banks, weighted k-NN, linear probe, retrieval mAP, attention masks and Jaccard scoring
"""
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Set, Tuple, Union

import numpy as np

from . import ndtensor as nd
from .data import Dataset
from .error_reporter import ContractError, DimensionError, ParameterError
from .model import DinoModel
from .ndtensor import Tensor
from .rng import STREAM_PROBE, derive_rng
from .unified_logging import get_logger, log_performance
from .vit import AttentionRecord, ParamSet, cls_concat

logger = get_logger(__name__)

KNN_K = 20
KNN_TAU = 0.07
CLS_LAYERS = 4
FEATURE_EPS = 1e-12
NORM_TOLERANCE = 1e-5


@dataclass
class FeatureBank:
    """Rows l2-normalized so dot products are cosine similarities"""
    features: np.ndarray
    labels: np.ndarray
    source: str = ''
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DimensionError(
                f"feature bank needs [N, D] features and N labels, got {self.features.shape} / {self.labels.shape}"
            )
        norms = np.linalg.norm(self.features, axis=1)
        if len(norms) and np.max(np.abs(norms - 1.0)) > NORM_TOLERANCE:
            raise ContractError("feature bank rows must be l2-normalized")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0

    @classmethod
    def from_raw(cls, features: np.ndarray, labels: Sequence[int], source: str = '',
                 num_classes: Optional[int] = None) -> 'FeatureBank':
        return cls(l2_normalize_rows(features), np.asarray(labels), source, num_classes)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def l2_normalize_rows(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(features, axis=-1, keepdims=True)
    return features / np.maximum(norms, FEATURE_EPS)


@log_performance
def extract_features(model: DinoModel, dataset: Dataset, layers: int = 1,
                     params: Optional[ParamSet] = None, batch_size: int = 128, source: str = '') -> FeatureBank:
    """
    CLS features of every image at native size, no augmentation

    The representation is the concatenated CLS output of the last `layers`
    blocks, l2-normalized.
    """
    params = model.params if params is None else params
    rows = []
    with nd.no_grad():
        for begin in range(0, len(dataset), batch_size):
            images = dataset.pixels[begin:begin + batch_size].astype(np.float64) / 255.0
            out = model.backbone(images, params)
            rows.append(np.asarray(cls_concat(out.per_layer_cls, layers).data, dtype=np.float64))
    features = np.concatenate(rows, axis=0) if rows else np.zeros((0, layers * model.vit_config.dim))
    return FeatureBank.from_raw(features, dataset.labels, source, len(dataset.class_names))


# ---------------------------------------------------------------------------
# Weighted k-NN
# ---------------------------------------------------------------------------

def _check_knn(bank: FeatureBank, k: int, tau: float) -> None:
    if len(bank) == 0:
        raise ContractError("k-NN needs a non-empty feature bank")
    if not 1 <= k <= len(bank):
        raise ParameterError(f"k must lie in [1, {len(bank)}], got {k}")
    if not tau > 0:
        raise ParameterError(f"k-NN temperature must be > 0, got {tau}")


def knn_classify(bank: FeatureBank, query: np.ndarray, k: int = KNN_K,
                 tau: float = KNN_TAU) -> Tuple[int, np.ndarray]:
    """
    Vote of the k most similar stored features, each weighted exp(sim / tau)

    Equal similarities rank the lower bank index first; equal class scores
    resolve to the lowest class id.

    Returns:
        (label, per-class scores)
    """
    _check_knn(bank, k, tau)
    sims = bank.features @ np.asarray(query, dtype=np.float64)
    top = np.argsort(-sims, kind='stable')[:k]
    weights = np.exp(sims[top] / tau)
    scores = np.bincount(bank.labels[top], weights=weights, minlength=bank.num_classes)
    return int(np.argmax(scores)), scores


def knn_predict(bank: FeatureBank, queries: np.ndarray, k: int = KNN_K, tau: float = KNN_TAU,
                chunk: int = 256) -> Tuple[np.ndarray, np.ndarray]:
    """Batched knn_classify with the same tie rules"""
    _check_knn(bank, k, tau)
    queries = np.asarray(queries, dtype=np.float64)
    labels = np.empty(len(queries), dtype=np.int64)
    scores = np.zeros((len(queries), bank.num_classes))
    for begin in range(0, len(queries), chunk):
        sims = queries[begin:begin + chunk] @ bank.features.T
        top = np.argsort(-sims, axis=1, kind='stable')[:, :k]
        weights = np.exp(np.take_along_axis(sims, top, axis=1) / tau)
        block = np.zeros((len(sims), bank.num_classes))
        rows = np.repeat(np.arange(len(sims)), k)
        np.add.at(block, (rows, bank.labels[top].reshape(-1)), weights.reshape(-1))
        scores[begin:begin + chunk] = block
        labels[begin:begin + chunk] = np.argmax(block, axis=1)
    return labels, scores


def knn_eval(train_bank: FeatureBank, test_bank: FeatureBank, k: int = KNN_K, tau: float = KNN_TAU) -> float:
    """Fraction of test rows whose k-NN label matches"""
    if len(test_bank) == 0:
        return 0.0
    predicted, _ = knn_predict(train_bank, test_bank.features, k, tau)
    return float(np.mean(predicted == test_bank.labels))


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------

class ProbeResult(NamedTuple):
    accuracy: float
    weight: np.ndarray
    bias: np.ndarray


def linear_probe(train_bank: FeatureBank, test_bank: FeatureBank, epochs: int = 100, lr: float = 0.1,
                 batch_size: int = 64, seed: int = 0) -> ProbeResult:
    """
    Softmax regression on frozen features

    Zero-initialized weights, plain SGD, cosine-decayed learning rate, no
    weight decay, no augmentation.
    """
    if train_bank.dim != test_bank.dim:
        raise DimensionError(f"probe banks differ in width: {train_bank.dim} vs {test_bank.dim}")
    if epochs < 0 or batch_size < 1:
        raise ParameterError("linear probe needs epochs >= 0 and batch_size >= 1")
    num_classes = max(train_bank.num_classes, test_bank.num_classes)
    weight = Tensor(np.zeros((train_bank.dim, num_classes)), requires_grad=True)
    bias = Tensor(np.zeros(num_classes), requires_grad=True)

    n = len(train_bank)
    steps_per_epoch = -(-n // batch_size)
    total = max(1, epochs * steps_per_epoch)
    step = 0
    for epoch in range(epochs):
        order = derive_rng(seed, STREAM_PROBE, epoch).permutation(n)
        for begin in range(0, n, batch_size):
            idx = order[begin:begin + batch_size]
            logits = Tensor(train_bank.features[idx]) @ weight + bias
            onehot = np.eye(num_classes)[train_bank.labels[idx]]
            loss = -(Tensor(onehot) * nd.log_softmax(logits, axis=-1)).sum(axis=-1).mean()
            nd.backward(loss)
            step_lr = lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
            weight.data = (weight.data - step_lr * weight.grad).astype(weight.data.dtype, copy=False)
            bias.data = (bias.data - step_lr * bias.grad).astype(bias.data.dtype, copy=False)
            step += 1

    logits = test_bank.features @ weight.data + bias.data
    accuracy = float(np.mean(np.argmax(logits, axis=1) == test_bank.labels)) if len(test_bank) else 0.0
    logger.info(f"Linear probe accuracy {accuracy:.4f}", extra={'epochs': epochs, 'lr': lr})
    return ProbeResult(accuracy, weight.data.copy(), bias.data.copy())


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------

def average_precision(ranking: np.ndarray, relevant: Set[int]) -> float:
    hits = np.isin(ranking, list(relevant))
    if not hits.any():
        return 0.0
    precision_at_hit = np.cumsum(hits)[hits] / (np.flatnonzero(hits) + 1.0)
    return float(precision_at_hit.sum() / len(relevant))


def retrieval_map(bank: FeatureBank, query_bank: FeatureBank, relevance: Sequence[Set[int]]) -> float:
    """
    Mean average precision of cosine ranking, over queries with relevant items

    relevance[i] holds the bank row ids relevant to query row i.
    """
    if bank.dim != query_bank.dim:
        raise DimensionError(f"retrieval banks differ in width: {bank.dim} vs {query_bank.dim}")
    if len(relevance) != len(query_bank):
        raise DimensionError(f"{len(relevance)} relevance sets for {len(query_bank)} queries")
    if not any(relevance):
        raise ContractError("retrieval needs at least one query with relevant items")

    scores = []
    for query, relevant in zip(query_bank.features, relevance):
        if not relevant:
            continue
        if min(relevant) < 0 or max(relevant) >= len(bank):
            raise ParameterError(f"relevance ids must lie in [0, {len(bank)})")
        ranking = np.argsort(-(bank.features @ query), kind='stable')
        scores.append(average_precision(ranking, set(relevant)))
    return float(np.mean(scores))


def load_relevance(path: str) -> List[Set[int]]:
    """One line per query: whitespace or comma separated bank ids (blank line = none)"""
    with open(path, 'r', encoding='utf-8') as handle:
        return [{int(tok) for tok in line.replace(',', ' ').split()} for line in handle.read().splitlines()]


# ---------------------------------------------------------------------------
# Attention masks
# ---------------------------------------------------------------------------

class MaskResult(NamedTuple):
    mask: np.ndarray
    kept_mass: float
    head: int = -1
    layer: int = -1


def _as_distribution(weights: np.ndarray) -> np.ndarray:
    """Weights rescaled to sum to 1; a row with no mass becomes uniform"""
    row = np.asarray(weights, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise DimensionError(f"expected a non-empty row of patch weights, got shape {row.shape}")
    if not np.all(np.isfinite(row)) or np.any(row < 0):
        raise ParameterError("attention weights must be finite and non-negative")
    total = row.sum()
    if total <= 0:
        return np.full(row.size, 1.0 / row.size)
    return row / total


def cls_attention(record: Union[AttentionRecord, np.ndarray], index: Optional[int] = None) -> np.ndarray:
    """CLS query row over patch tokens, CLS self-weight dropped and the rest renormalized"""
    weights = record.weights if isinstance(record, AttentionRecord) else np.asarray(record)
    if index is not None:
        weights = weights[index]
    if weights.ndim != 2:
        raise DimensionError(f"expected one [T, T] attention matrix, got shape {weights.shape}")
    return _as_distribution(weights[0, 1:])


def attention_mask(attn_row: np.ndarray, mass: float = 0.6, grid: Optional[Tuple[int, int]] = None,
                   head: int = -1, layer: int = -1) -> MaskResult:
    """
    Smallest set of top-weighted patches holding at least `mass` of the attention

    Equal weights keep the lower patch index first.
    """
    if not 0.0 < mass <= 1.0:
        raise ParameterError(f"mass must lie in (0, 1], got {mass}")
    row = _as_distribution(attn_row)
    if grid is None:
        side = math.isqrt(len(row))
        if side * side != len(row):
            raise DimensionError(f"{len(row)} patch weights do not form a square grid")
        grid = (side, side)

    order = np.argsort(-row, kind='stable')
    # the full set holds all the mass; rounding must not leave it short
    cumulative = np.minimum(np.cumsum(row[order]), 1.0)
    cumulative[-1] = 1.0
    count = min(int(np.searchsorted(cumulative, mass, side='left')), len(row) - 1) + 1
    mask = np.zeros(len(row), dtype=bool)
    mask[order[:count]] = True
    return MaskResult(mask.reshape(grid), float(cumulative[count - 1]), head, layer)


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; two empty masks score 1"""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def patch_ground_truth(mask: np.ndarray, patch: int) -> np.ndarray:
    """Pixel mask to patch grid: a patch is foreground when more than half its pixels are"""
    h, w = mask.shape
    if h % patch or w % patch:
        raise DimensionError(f"mask {h}x{w} is not divisible by patch size {patch}")
    blocks = np.asarray(mask, dtype=np.float64).reshape(h // patch, patch, w // patch, patch)
    return blocks.mean(axis=(1, 3)) > 0.5


class JaccardResult(NamedTuple):
    per_head: List[float]
    best_head: int
    best_score: float


def attention_jaccard(model: DinoModel, dataset: Dataset, mass: float = 0.6, layer: Optional[int] = None,
                      params: Optional[ParamSet] = None, batch_size: int = 64) -> JaccardResult:
    """
    Mean Jaccard per head between attention masks and ground-truth shape masks

    Uses the last block unless `layer` is given; the best head is the one with
    the highest mean.
    """
    if dataset.masks is None:
        raise ContractError("attention_jaccard needs a dataset with ground-truth masks")
    cfg = model.vit_config
    layer = cfg.depth - 1 if layer is None else layer
    if not 0 <= layer < cfg.depth:
        raise ParameterError(f"layer must lie in [0, {cfg.depth}), got {layer}")
    params = model.params if params is None else params

    totals = np.zeros(cfg.heads)
    with nd.no_grad():
        for begin in range(0, len(dataset), batch_size):
            images = dataset.pixels[begin:begin + batch_size].astype(np.float64) / 255.0
            out = model.backbone(images, params, collect_attn=True)
            grid = cfg.grid_for(images.shape[2], images.shape[3])
            records = [r for r in out.attn if r.layer == layer]
            for i in range(len(images)):
                truth = patch_ground_truth(dataset.masks[begin + i], cfg.patch_size)
                for record in records:
                    row = cls_attention(record, i)
                    totals[record.head] += jaccard(attention_mask(row, mass, grid).mask, truth)

    per_head = (totals / max(1, len(dataset))).tolist()
    best = int(np.argmax(per_head))
    return JaccardResult(per_head, best, per_head[best])


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def write_pgm(path: str, array: np.ndarray) -> None:
    """
    8-bit binary PGM (P5), row-major

    Boolean masks map to 0/255, float maps are scaled so their max is 255.
    """
    array = np.asarray(array)
    if array.ndim != 2:
        raise DimensionError(f"PGM export needs a 2-D array, got shape {array.shape}")
    if array.dtype == bool:
        pixels = array.astype(np.uint8) * 255
    elif array.dtype == np.uint8:
        pixels = array
    else:
        values = np.asarray(array, dtype=np.float64)
        peak = values.max() if values.size else 0.0
        scaled = values / peak if peak > 0 else np.zeros_like(values)
        pixels = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, 'wb') as handle:
        handle.write(f"P5\n{w} {h}\n255\n".encode('ascii'))
        handle.write(np.ascontiguousarray(pixels).tobytes())


@dataclass
class EvalReport:
    """Appends {metric, value, config} JSON lines"""
    path: str
    config: Dict[str, Any] = field(default_factory=dict)

    def write(self, metric: str, value: float, **extra: Any) -> Dict[str, Any]:
        record = {'metric': metric, 'value': value, 'config': {**self.config, **extra}}
        directory = os.path.dirname(self.path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(self.path, 'a', encoding='utf-8') as handle:
            handle.write(json.dumps(record, sort_keys=True) + '\n')
        return record
