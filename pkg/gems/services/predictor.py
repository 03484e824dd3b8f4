"""
Fitness surrogate: a small GCN over the gene graphs of an individual.

Node states start from per-type embeddings and go through two rounds of
mean-neighbor message passing. Each gene is sum-pooled so that its size
reaches the readout. The genes of an individual are averaged and a two-layer
readout with a tanh output produces a score in (-1, 1) that is trained
against normalized observed metrics.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from gems.services.gene import MetaStructureGene, from_edges
from gems.services.hin_core import Relation, Schema
from gems.services.optim import Adam

logger = logging.getLogger(__name__)

PREDICTOR_DIM = 16
READOUT_HIDDEN = 32
ROUNDS = 2
ARRAY_NAMES = ("type_emb", "W1", "b1", "W2", "b2", "R1", "c1", "R2", "c2")

Sample = Tuple[Sequence[MetaStructureGene], float]


@dataclass
class PredictorParams:
    type_emb: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    R1: np.ndarray
    c1: np.ndarray
    R2: np.ndarray
    c2: np.ndarray

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ARRAY_NAMES}

    def copy(self) -> "PredictorParams":
        return PredictorParams(**{name: value.copy() for name, value in self.arrays().items()})

    @property
    def dim(self) -> int:
        return int(self.type_emb.shape[1])


def init_predictor(n_types: int, dim: int = PREDICTOR_DIM, hidden: int = READOUT_HIDDEN, seed: int = 0) -> PredictorParams:
    rng = np.random.default_rng(seed)

    def glorot(shape: Tuple[int, int]) -> np.ndarray:
        bound = math.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-bound, bound, size=shape)

    return PredictorParams(
        type_emb=rng.uniform(-0.5, 0.5, size=(n_types, dim)),
        W1=glorot((dim, 2 * dim)),
        b1=np.zeros(dim),
        W2=glorot((dim, 2 * dim)),
        b2=np.zeros(dim),
        R1=glorot((hidden, dim)),
        c1=np.zeros(hidden),
        R2=glorot((1, hidden)),
        c2=np.zeros(1),
    )


def zero_predictor(n_types: int, dim: int = PREDICTOR_DIM, hidden: int = READOUT_HIDDEN) -> PredictorParams:
    params = init_predictor(n_types, dim, hidden)
    for value in params.arrays().values():
        value[...] = 0.0
    return params


def _mean_adjacency(gene: MetaStructureGene) -> np.ndarray:
    adj = np.zeros((gene.n, gene.n))
    for i, j in gene.edges:
        adj[i, j] = adj[j, i] = 1.0
    degree = adj.sum(axis=1, keepdims=True)
    return np.divide(adj, degree, out=np.zeros_like(adj), where=degree > 0)


@dataclass
class _GeneCache:
    types: np.ndarray
    A: np.ndarray
    cats: List[np.ndarray]
    pres: List[np.ndarray]


@dataclass
class _Cache:
    genes: List[_GeneCache]
    z: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray
    out: float


def _forward(params: PredictorParams, genes: Sequence[MetaStructureGene]) -> _Cache:
    if not genes:
        raise ValueError("an individual needs at least one gene")
    weights = ((params.W1, params.b1), (params.W2, params.b2))
    caches = []
    pooled = []
    for gene in genes:
        types = np.asarray(gene.type_list, dtype=np.int64)
        A = _mean_adjacency(gene)
        state = params.type_emb[types]
        cats, pres = [], []
        for W, b in weights:
            cat = np.concatenate([state, A @ state], axis=1)
            pre = cat @ W.T + b
            cats.append(cat)
            pres.append(pre)
            state = np.maximum(pre, 0.0)
        caches.append(_GeneCache(types, A, cats, pres))
        pooled.append(state.sum(axis=0))
    z = np.mean(pooled, axis=0)
    hidden_pre = params.R1 @ z + params.c1
    hidden = np.maximum(hidden_pre, 0.0)
    out = float(np.tanh(params.R2 @ hidden + params.c2)[0])
    return _Cache(caches, z, hidden_pre, hidden, out)


def predict(params: PredictorParams, genes: Sequence[MetaStructureGene]) -> float:
    return _forward(params, genes).out


def _backward(params: PredictorParams, cache: _Cache, d_out: float, grads: Dict[str, np.ndarray]) -> None:
    d_pre_out = d_out * (1.0 - cache.out * cache.out)
    grads["R2"] += d_pre_out * cache.hidden[None, :]
    grads["c2"] += d_pre_out
    d_hidden_pre = (params.R2[0] * d_pre_out) * (cache.hidden_pre > 0)
    grads["R1"] += np.outer(d_hidden_pre, cache.z)
    grads["c1"] += d_hidden_pre
    d_pooled = (params.R1.T @ d_hidden_pre) / len(cache.genes)
    weights = (("W1", "b1"), ("W2", "b2"))
    dim = params.dim
    for gene in cache.genes:
        d_state = np.tile(d_pooled, (len(gene.types), 1))
        for round_index in reversed(range(ROUNDS)):
            w_name, b_name = weights[round_index]
            d_pre = d_state * (gene.pres[round_index] > 0)
            grads[w_name] += d_pre.T @ gene.cats[round_index]
            grads[b_name] += d_pre.sum(axis=0)
            d_cat = d_pre @ getattr(params, w_name)
            d_state = d_cat[:, :dim] + gene.A.T @ d_cat[:, dim:]
        np.add.at(grads["type_emb"], gene.types, d_state)


def mse_and_grads(
    params: PredictorParams,
    samples: Sequence[Sample],
    with_grads: bool = True,
) -> Tuple[float, Optional[Dict[str, np.ndarray]]]:
    grads = {name: np.zeros_like(value) for name, value in params.arrays().items()} if with_grads else None
    errors = []
    for genes, target in samples:
        cache = _forward(params, genes)
        error = cache.out - target
        errors.append(error * error)
        if grads is not None:
            _backward(params, cache, 2.0 * error / len(samples), grads)
    return math.fsum(errors) / len(samples), grads


@dataclass
class PredictorFit:
    params: PredictorParams
    mse: float


def train_predictor(
    params: PredictorParams,
    samples: Sequence[Sample],
    epochs: int = 200,
    lr: float = 0.01,
    seed: int = 0,
    batch_size: Optional[int] = None,
) -> PredictorFit:
    """ADAM on squared error; warm-starts from ``params`` and leaves them untouched.

    Without ``batch_size`` every step sees the whole history and ``seed`` has no
    effect. With it, the samples are reshuffled from ``seed`` every epoch.
    """
    if not samples:
        raise ValueError("training the predictor needs at least one sample")
    if batch_size is not None and batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    samples = list(samples)
    rng = np.random.default_rng(seed)
    current = params.copy()
    optimizer = Adam(current.arrays())
    for _ in range(epochs):
        if batch_size is None or batch_size >= len(samples):
            batches = [samples]
        else:
            order = rng.permutation(len(samples))
            batches = [
                [samples[index] for index in order[start:start + batch_size]]
                for start in range(0, len(samples), batch_size)
            ]
        for batch in batches:
            _, grads = mse_and_grads(current, batch)
            optimizer.step(current.arrays(), grads, lr)
    mse, _ = mse_and_grads(current, samples, with_grads=False)
    logger.debug("Predictor trained on %d samples: mse=%.6f", len(samples), mse)
    return PredictorFit(current, mse)


def normalize_metric(history: Sequence[float], raw: float) -> float:
    """Map ``raw`` into [-1, 1] by the min and max of every recorded metric."""
    if not len(history):
        return 0.0
    low, high = min(history), max(history)
    if high == low:
        return 0.0
    return 2.0 * (raw - low) / (high - low) - 1.0


def denormalize_metric(history: Sequence[float], value: float) -> float:
    """Inverse of normalize_metric over the same history."""
    if not len(history):
        return 0.0
    low, high = min(history), max(history)
    if high == low:
        return low
    return low + (value + 1.0) * (high - low) / 2.0


def spearman(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Rank correlation with averaged tie ranks; constant inputs give 0.0."""
    if len(pred) != len(truth):
        raise ValueError("prediction and truth lengths differ")
    if len(pred) < 2:
        raise ValueError("spearman needs at least two pairs")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho, _ = spearmanr(pred, truth)
    return 0.0 if not np.isfinite(rho) else float(rho)


def filter_threshold(previous_normalized: Sequence[float], quantile: float) -> float:
    """Cut-off predicted score; empty input disables filtering."""
    if not len(previous_normalized):
        return float("-inf")
    return float(np.quantile(np.asarray(previous_normalized, dtype=np.float64), quantile, method="lower"))


def gradient_errors(params: PredictorParams, samples: Sequence[Sample], h: float = 1e-5) -> Dict[str, float]:
    _, analytic = mse_and_grads(params, samples)
    shifted = params.copy()
    errors: Dict[str, float] = {}
    for name, array in shifted.arrays().items():
        worst = 0.0
        for index in np.ndindex(array.shape):
            saved = array[index]
            array[index] = saved + h
            up, _ = mse_and_grads(shifted, samples, with_grads=False)
            array[index] = saved - h
            down, _ = mse_and_grads(shifted, samples, with_grads=False)
            array[index] = saved
            numeric = (up - down) / (2.0 * h)
            exact = float(analytic[name][index])
            worst = max(worst, abs(exact - numeric) / max(1e-8, abs(exact) + abs(numeric)))
        errors[name] = worst
    return errors


def near_kink(params: PredictorParams, samples: Sequence[Sample], tol: float = 1e-4) -> bool:
    for genes, _ in samples:
        cache = _forward(params, genes)
        if np.any(np.abs(cache.hidden_pre) < tol):
            return True
        if any(np.any(np.abs(pre) < tol) for gene in cache.genes for pre in gene.pres):
            return True
    return False


def micro_instance(seed: int = 0, dim: int = 4, hidden: int = 5, attempts: int = 200) -> Tuple[PredictorParams, List[Sample]]:
    """Random small params over a fixed three-type gene set, redrawn until no ReLU sits near zero."""
    schema = Schema(
        node_types=("U", "I", "C"),
        relations=(Relation("U-I", 0, 1), Relation("I-C", 1, 2), Relation("U-U", 0, 0)),
        source=0,
        sink=1,
        target_relation="U-I",
    )
    genes = [
        from_edges(schema, ["U", "I"], [(0, 1)]),
        from_edges(schema, ["U", "I", "U", "I"], [(0, 3), (1, 2), (2, 3)]),
        from_edges(schema, ["U", "I", "I", "C"], [(0, 2), (1, 3), (2, 3)]),
        from_edges(schema, ["U", "I", "U"], [(0, 1), (0, 2), (1, 2)]),
    ]
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        params = init_predictor(len(schema.node_types), dim, hidden, seed=int(rng.integers(2**31)))
        for name in ("b1", "b2", "c1", "c2"):
            setattr(params, name, rng.uniform(-0.2, 0.2, size=getattr(params, name).shape))
        picks = [rng.choice(len(genes), size=2, replace=False).tolist() for _ in range(3)]
        samples = [([genes[i] for i in pick], float(rng.uniform(-1, 1))) for pick in picks]
        if not near_kink(params, samples):
            return params, samples
    raise RuntimeError("could not draw a kink-free predictor instance")
