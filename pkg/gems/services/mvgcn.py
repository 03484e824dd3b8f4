"""
Attention-fused multi-view GCN over meta-structure neighbor tables.

Every gene contributes one single-layer view per endpoint side. Views are fused
by attention, user and item embeddings are scored by a sigmoid of their dot
product, and the model is trained on a max-margin ranking loss with analytic
gradients and ADAM. All arithmetic is float64.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.special import expit, softmax

from gems.data.models import TrainConfig
from gems.errors import CheckpointMismatchError, DatasetError, TrainingAbort
from gems.services.adjsearch import NeighborTable
from gems.services.evalkit import Candidates, evaluate_candidates, sample_candidates
from gems.services.hin_core import InteractionDataset, Schema, sample_negatives_batch
from gems.services.optim import Adam, learning_rate

logger = logging.getLogger(__name__)

ARRAY_NAMES = ("x_src", "x_snk", "view_W", "view_b", "att_src", "att_snk")
WEIGHT_NAMES = ("view_W", "att_src", "att_snk")
FEATURE_SCALE = 0.05
KINK_TOLERANCE = 1e-4

# side -> (own feature array, neighbor feature array, attention matrix)
_SIDES = {
    "source": ("x_src", "x_snk", "att_src"),
    "sink": ("x_snk", "x_src", "att_snk"),
}


@dataclass
class ModelParams:
    """Base features for both endpoint types, per-view GCN weights and per-side attention."""

    x_src: np.ndarray
    x_snk: np.ndarray
    view_W: np.ndarray
    view_b: np.ndarray
    att_src: np.ndarray
    att_snk: np.ndarray
    gene_keys: Tuple[str, ...] = ()

    @property
    def d(self) -> int:
        return int(self.view_b.shape[1])

    @property
    def n(self) -> int:
        return int(self.view_b.shape[0])

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ARRAY_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: value.copy() for name, value in self.arrays().items()}, gene_keys=self.gene_keys)

    def norm(self) -> float:
        return math.sqrt(math.fsum(float(np.sum(value * value)) for value in self.arrays().values()))

    def is_finite(self) -> bool:
        return all(np.isfinite(value).all() for value in self.arrays().values())


@dataclass(frozen=True)
class Views:
    """Row-normalized neighbor-mean operators, one per gene and side."""

    source: Tuple[sparse.csr_matrix, ...]
    sink: Tuple[sparse.csr_matrix, ...]
    gene_keys: Tuple[str, ...]

    @property
    def n(self) -> int:
        return len(self.source)


@dataclass
class TrainResult:
    params: ModelParams
    best_ndcg: float
    best_epoch: int
    epoch_losses: List[float] = field(default_factory=list)
    val_history: List[float] = field(default_factory=list)


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(
    n_source_nodes: int,
    n_sink_nodes: int,
    d: int,
    gene_keys: Sequence[str],
    seed: int = 0,
    features: Optional[Dict[str, np.ndarray]] = None,
) -> ModelParams:
    if d < 1:
        raise ValueError("embedding dimension must be at least 1")
    if not gene_keys:
        raise ValueError("at least one view is required")
    n = len(gene_keys)
    rng = np.random.default_rng(seed)
    params = ModelParams(
        x_src=rng.uniform(-FEATURE_SCALE, FEATURE_SCALE, size=(n_source_nodes, d)),
        x_snk=rng.uniform(-FEATURE_SCALE, FEATURE_SCALE, size=(n_sink_nodes, d)),
        view_W=_glorot(rng, (n, d, 2 * d), 2 * d, d),
        view_b=np.zeros((n, d)),
        att_src=_glorot(rng, (d, n * d), n * d, d),
        att_snk=_glorot(rng, (d, n * d), n * d, d),
        gene_keys=tuple(gene_keys),
    )
    for name, value in (features or {}).items():
        current = getattr(params, name)
        if value.shape != current.shape:
            raise DatasetError(f"{name} features have shape {value.shape}, expected {current.shape}")
        setattr(params, name, np.array(value, dtype=np.float64))
    return params


def _mean_operator(table: NeighborTable, n_rows: int, n_cols: int) -> sparse.csr_matrix:
    lengths = np.fromiter((len(row) for row in table.neighbors), dtype=np.int64, count=len(table))
    if len(table) != n_rows:
        raise ValueError(f"table for {table.gene_key} has {len(table)} rows, expected {n_rows}")
    rows = np.repeat(np.arange(n_rows), lengths)
    cols = np.concatenate(table.neighbors) if lengths.sum() else np.zeros(0, dtype=np.int64)
    data = np.repeat(1.0 / np.maximum(lengths, 1), lengths)
    # Repeated neighbors are summed, so multiplicity weights the mean.
    return sparse.csr_matrix((data, (rows, cols)), shape=(n_rows, n_cols))


def build_views(
    tables: Sequence[Tuple[NeighborTable, NeighborTable]],
    n_source_nodes: int,
    n_sink_nodes: int,
) -> Views:
    """Turn (source-side, sink-side) table pairs into neighbor-mean operators."""
    return Views(
        source=tuple(_mean_operator(src, n_source_nodes, n_sink_nodes) for src, _ in tables),
        sink=tuple(_mean_operator(snk, n_sink_nodes, n_source_nodes) for _, snk in tables),
        gene_keys=tuple(src.gene_key for src, _ in tables),
    )


def view_embed(
    params: ModelParams,
    view: int,
    node: int,
    neighbors: Sequence[int],
    side: str = "source",
) -> np.ndarray:
    """h = ReLU(W_v [x_node, mean of neighbor features] + b_v); no neighbors gives a zero mean."""
    own_name, other_name, _ = _SIDES[side]
    own, other = getattr(params, own_name), getattr(params, other_name)
    ids = np.asarray(neighbors, dtype=np.int64)
    agg = other[ids].mean(axis=0) if len(ids) else np.zeros(params.d)
    cat = np.concatenate([own[node], agg])
    return np.maximum(params.view_W[view] @ cat + params.view_b[view], 0.0)


def fuse(params: ModelParams, views: np.ndarray, side: str = "source") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Attention over one node's view embeddings; returns (query, weights, fused embedding)."""
    H = np.asarray(views, dtype=np.float64)
    att = getattr(params, _SIDES[side][2])
    q = np.tanh(att @ H.reshape(-1))
    alpha = softmax(H @ q)
    return q, alpha, alpha @ H


def score(y_u: np.ndarray, y_i: np.ndarray) -> float:
    return float(expit(np.dot(y_u, y_i)))


def margin_loss(z_pos: float, z_negs: Sequence[float], margin: float) -> float:
    return float(np.mean(np.maximum(0.0, np.asarray(z_negs, dtype=np.float64) - z_pos + margin)))


@dataclass
class _SideCache:
    nodes: np.ndarray
    blocks: List[sparse.csr_matrix]
    cats: List[np.ndarray]
    pres: List[np.ndarray]
    H: np.ndarray
    C: np.ndarray
    q: np.ndarray
    alpha: np.ndarray
    y: np.ndarray


def _forward(params: ModelParams, views: Views, side: str, nodes: np.ndarray) -> _SideCache:
    own_name, other_name, att_name = _SIDES[side]
    own, other, att = getattr(params, own_name), getattr(params, other_name), getattr(params, att_name)
    operators = views.source if side == "source" else views.sink
    if len(operators) != params.n:
        raise CheckpointMismatchError(f"model has {params.n} views but {len(operators)} tables were given")
    blocks, cats, pres, hs = [], [], [], []
    for v in range(params.n):
        block = operators[v][nodes]
        cat = np.concatenate([own[nodes], np.asarray(block @ other)], axis=1)
        pre = cat @ params.view_W[v].T + params.view_b[v]
        blocks.append(block)
        cats.append(cat)
        pres.append(pre)
        hs.append(np.maximum(pre, 0.0))
    H = np.stack(hs, axis=1)
    C = H.reshape(len(nodes), -1)
    q = np.tanh(C @ att.T)
    alpha = softmax(np.einsum("bnd,bd->bn", H, q), axis=1)
    y = np.einsum("bn,bnd->bd", alpha, H)
    return _SideCache(nodes, blocks, cats, pres, H, C, q, alpha, y)


def _backward(
    params: ModelParams,
    side: str,
    cache: _SideCache,
    dy: np.ndarray,
    grads: Dict[str, np.ndarray],
) -> None:
    own_name, other_name, att_name = _SIDES[side]
    att = getattr(params, att_name)
    b, n, d = cache.H.shape
    d_alpha = np.einsum("bd,bnd->bn", dy, cache.H)
    dH = cache.alpha[:, :, None] * dy[:, None, :]
    de = cache.alpha * (d_alpha - np.sum(cache.alpha * d_alpha, axis=1, keepdims=True))
    dH += de[:, :, None] * cache.q[:, None, :]
    dq = np.einsum("bn,bnd->bd", de, cache.H)
    dP = dq * (1.0 - cache.q * cache.q)
    grads[att_name] += dP.T @ cache.C
    dH += (dP @ att).reshape(b, n, d)
    for v in range(n):
        dpre = dH[:, v, :] * (cache.pres[v] > 0)
        grads["view_W"][v] += dpre.T @ cache.cats[v]
        grads["view_b"][v] += dpre.sum(axis=0)
        dcat = dpre @ params.view_W[v]
        np.add.at(grads[own_name], cache.nodes, dcat[:, :d])
        grads[other_name] += np.asarray(cache.blocks[v].T @ dcat[:, d:])


@dataclass
class _LossParts:
    loss: float
    hinge_args: np.ndarray
    user_cache: _SideCache
    item_cache: _SideCache


def _loss_forward(
    params: ModelParams,
    views: Views,
    users: np.ndarray,
    items: np.ndarray,
    negatives: np.ndarray,
    margin: float,
    l2: float,
) -> Tuple[_LossParts, Dict[str, np.ndarray]]:
    B, K = negatives.shape
    user_cache = _forward(params, views, "source", users)
    item_nodes = np.concatenate([items, negatives.reshape(-1)])
    item_cache = _forward(params, views, "sink", item_nodes)
    y_u = user_cache.y
    y_i = item_cache.y[:B]
    y_j = item_cache.y[B:].reshape(B, K, -1)
    z_pos = expit(np.sum(y_u * y_i, axis=1))
    z_neg = expit(np.einsum("bd,bkd->bk", y_u, y_j))
    args = z_neg - z_pos[:, None] + margin
    data = float(np.maximum(args, 0.0).sum()) / (B * K)

    touched_users = np.unique(users)
    touched_items = np.unique(item_nodes)
    squares = (
        float(np.sum(params.x_src[touched_users] ** 2))
        + float(np.sum(params.x_snk[touched_items] ** 2))
        + sum(float(np.sum(getattr(params, name) ** 2)) for name in WEIGHT_NAMES)
    )
    loss = data + 0.5 * l2 * squares / B
    extras = {
        "z_pos": z_pos,
        "z_neg": z_neg,
        "y_i": y_i,
        "y_j": y_j,
        "touched_users": touched_users,
        "touched_items": touched_items,
    }
    return _LossParts(loss, args, user_cache, item_cache), extras


def batch_loss(
    params: ModelParams,
    views: Views,
    users: np.ndarray,
    items: np.ndarray,
    negatives: np.ndarray,
    margin: float,
    l2: float,
    with_grads: bool = True,
) -> Tuple[float, Optional[Dict[str, np.ndarray]]]:
    """Mean hinge over (positive, negative) pairs plus the L2 term, and its analytic gradient."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    parts, extras = _loss_forward(params, views, users, items, negatives, margin, l2)
    if not with_grads:
        return parts.loss, None

    B, K = negatives.shape
    z_pos, z_neg = extras["z_pos"], extras["z_neg"]
    active = (parts.hinge_args > 0).astype(np.float64)
    ds_neg = active / (B * K) * z_neg * (1.0 - z_neg)
    ds_pos = -active.sum(axis=1) / (B * K) * z_pos * (1.0 - z_pos)
    y_u, y_i, y_j = parts.user_cache.y, extras["y_i"], extras["y_j"]
    dy_u = ds_pos[:, None] * y_i + np.einsum("bk,bkd->bd", ds_neg, y_j)
    dy_i = ds_pos[:, None] * y_u
    dy_j = ds_neg[:, :, None] * y_u[:, None, :]

    grads = {name: np.zeros_like(value) for name, value in params.arrays().items()}
    _backward(params, "source", parts.user_cache, dy_u, grads)
    _backward(params, "sink", parts.item_cache, np.concatenate([dy_i, dy_j.reshape(B * K, -1)]), grads)

    scale = l2 / B
    grads["x_src"][extras["touched_users"]] += scale * params.x_src[extras["touched_users"]]
    grads["x_snk"][extras["touched_items"]] += scale * params.x_snk[extras["touched_items"]]
    for name in WEIGHT_NAMES:
        grads[name] += scale * getattr(params, name)
    return parts.loss, grads


def near_kink(
    params: ModelParams,
    views: Views,
    users: np.ndarray,
    items: np.ndarray,
    negatives: np.ndarray,
    margin: float,
    tol: float = KINK_TOLERANCE,
) -> bool:
    """True when any ReLU pre-activation or hinge argument of the batch sits within ``tol`` of zero."""
    parts, _ = _loss_forward(
        params,
        views,
        np.asarray(users, dtype=np.int64),
        np.asarray(items, dtype=np.int64),
        np.asarray(negatives, dtype=np.int64),
        margin,
        0.0,
    )
    if np.any(np.abs(parts.hinge_args) < tol):
        return True
    return any(np.any(np.abs(pre) < tol) for cache in (parts.user_cache, parts.item_cache) for pre in cache.pres)


def gradient_errors(
    params: ModelParams,
    views: Views,
    users: np.ndarray,
    items: np.ndarray,
    negatives: np.ndarray,
    margin: float,
    l2: float,
    h: float = 1e-5,
) -> Dict[str, float]:
    """Per parameter array, the worst relative gap between analytic and central-difference gradients."""
    _, analytic = batch_loss(params, views, users, items, negatives, margin, l2)
    shifted = params.copy()
    errors: Dict[str, float] = {}
    for name, array in shifted.arrays().items():
        worst = 0.0
        for index in np.ndindex(array.shape):
            saved = array[index]
            array[index] = saved + h
            up, _ = batch_loss(shifted, views, users, items, negatives, margin, l2, with_grads=False)
            array[index] = saved - h
            down, _ = batch_loss(shifted, views, users, items, negatives, margin, l2, with_grads=False)
            array[index] = saved
            numeric = (up - down) / (2.0 * h)
            exact = float(analytic[name][index])
            worst = max(worst, abs(exact - numeric) / max(1e-8, abs(exact) + abs(numeric)))
        errors[name] = worst
    return errors


def grad_check(
    params: ModelParams,
    views: Views,
    users: np.ndarray,
    items: np.ndarray,
    negatives: np.ndarray,
    margin: float,
    l2: float,
    h: float = 1e-5,
) -> float:
    return max(gradient_errors(params, views, users, items, negatives, margin, l2, h).values())


@dataclass
class MicroInstance:
    params: ModelParams
    views: Views
    users: np.ndarray
    items: np.ndarray
    negatives: np.ndarray


def micro_instance(
    seed: int = 0,
    d: int = 4,
    n_views: int = 2,
    n_source_nodes: int = 6,
    n_sink_nodes: int = 7,
    batch: int = 3,
    negatives: int = 2,
    margin: float = 0.3,
    attempts: int = 200,
) -> MicroInstance:
    """A small random model and batch, redrawn until no ReLU or hinge sits near its kink."""
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        keys = tuple(f"view{v}" for v in range(n_views))
        params = init_params(n_source_nodes, n_sink_nodes, d, keys, seed=int(rng.integers(2**31)))
        params.x_src = rng.uniform(-0.5, 0.5, size=params.x_src.shape)
        params.x_snk = rng.uniform(-0.5, 0.5, size=params.x_snk.shape)
        params.view_b = rng.uniform(-0.2, 0.2, size=params.view_b.shape)
        tables = []
        for key in keys:
            src = [np.sort(rng.integers(0, n_sink_nodes, size=rng.integers(0, 4))) for _ in range(n_source_nodes)]
            snk = [np.sort(rng.integers(0, n_source_nodes, size=rng.integers(0, 4))) for _ in range(n_sink_nodes)]
            tables.append(
                (
                    NeighborTable(key, 0, 1, tuple(src), None, None),
                    NeighborTable(key, 1, 0, tuple(snk), None, None),
                )
            )
        views = build_views(tables, n_source_nodes, n_sink_nodes)
        users = rng.integers(0, n_source_nodes, size=batch)
        items = rng.integers(0, n_sink_nodes, size=batch)
        negs = rng.integers(0, n_sink_nodes, size=(batch, negatives))
        if not near_kink(params, views, users, items, negs, margin):
            return MicroInstance(params, views, users, items, negs)
    raise RuntimeError("could not draw a kink-free micro instance")


def embed_all(params: ModelParams, views: Views) -> Tuple[np.ndarray, np.ndarray]:
    """Fused embeddings for every source node and every sink node."""
    users = np.arange(params.x_src.shape[0])
    items = np.arange(params.x_snk.shape[0])
    return _forward(params, views, "source", users).y, _forward(params, views, "sink", items).y


class EmbeddingScorer:
    """Scores candidates with sigmoid(y_u . y_i) from precomputed embeddings."""

    def __init__(self, y_src: np.ndarray, y_snk: np.ndarray):
        self.y_src = y_src
        self.y_snk = y_snk

    @classmethod
    def from_params(cls, params: ModelParams, views: Views) -> "EmbeddingScorer":
        return cls(*embed_all(params, views))

    def __call__(self, user: int, items: np.ndarray) -> np.ndarray:
        return expit(self.y_snk[items] @ self.y_src[user])


def _validation_ndcg(params: ModelParams, views: Views, candidates: Sequence[Candidates]) -> float:
    if not candidates:
        return 0.0
    return evaluate_candidates(EmbeddingScorer.from_params(params, views), candidates, ks=(10,))["NDCG@10"]


def train(
    params: ModelParams,
    dataset: InteractionDataset,
    views: Views,
    cfg: TrainConfig,
    seed: Optional[int] = None,
    on_step: Optional[Callable[[int, int, ModelParams], None]] = None,
) -> TrainResult:
    """Mini-batch ADAM on the margin loss; returns the params of the best validation NDCG@10.

    The untouched input params count as epoch -1, so zero epochs hand them back.
    """
    seed = cfg.seed if seed is None else seed
    train_stream, eval_stream = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(train_stream)
    candidates = sample_candidates(
        dataset,
        "val",
        cfg.eval_negatives,
        int(eval_stream.generate_state(1)[0]),
        cfg.negative_exponent,
    )
    current = params.copy()
    best = current.copy()
    best_ndcg = _validation_ndcg(current, views, candidates)
    best_epoch = -1
    result = TrainResult(params=best, best_ndcg=best_ndcg, best_epoch=best_epoch)
    positives = dataset.split("train")
    if cfg.epochs == 0 or not len(positives):
        return result

    optimizer = Adam(current.arrays())
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg.lr, epoch, cfg.warmup_epochs, cfg.decay)
        order = rng.permutation(len(positives))
        losses = []
        for batch_index, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = positives[order[start:start + cfg.batch_size]]
            users, items = batch[:, 0], batch[:, 1]
            negatives = sample_negatives_batch(
                dataset,
                users,
                cfg.negatives,
                rng,
                [dataset.train_items(int(u)) for u in users],
                cfg.negative_exponent,
            )
            loss, grads = batch_loss(current, views, users, items, negatives, cfg.margin, cfg.l2)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingAbort(
                    "non-finite loss during training",
                    {"epoch": epoch, "batch": batch_index, "lr": lr, "param_norm": current.norm()},
                )
            optimizer.step(current.arrays(), grads, lr)
            losses.append(loss)
            if on_step is not None:
                on_step(epoch, batch_index, current)
        epoch_loss = math.fsum(losses) / len(losses)
        ndcg = _validation_ndcg(current, views, candidates)
        result.epoch_losses.append(epoch_loss)
        result.val_history.append(ndcg)
        logger.debug("epoch %d lr=%.5f loss=%.6f val NDCG@10=%.4f", epoch, lr, epoch_loss, ndcg)
        if not candidates or ndcg > result.best_ndcg:
            result.params = current.copy()
            result.best_ndcg = ndcg
            result.best_epoch = epoch
    return result


def export_features(params: ModelParams, schema: Schema, path: Path) -> None:
    """One node per line: ``type<TAB>id<TAB>v1,...,vd`` for both endpoint types."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for type_index, array in ((schema.source, params.x_src), (schema.sink, params.x_snk)):
            name = schema.node_types[type_index]
            for node, row in enumerate(array):
                handle.write(f"{name}\t{node}\t{','.join(repr(float(v)) for v in row)}\n")


def import_features(path: Path, schema: Schema, n_source_nodes: int, n_sink_nodes: int, d: int) -> Dict[str, np.ndarray]:
    """Read pretrained endpoint features; nodes absent from the file keep zero vectors."""
    path = Path(path)
    arrays = {"x_src": np.zeros((n_source_nodes, d)), "x_snk": np.zeros((n_sink_nodes, d))}
    targets = {schema.node_types[schema.source]: "x_src", schema.node_types[schema.sink]: "x_snk"}
    skipped = 0
    with path.open("r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DatasetError(f"{path}:{line_no}: expected type<TAB>id<TAB>values")
            name = targets.get(fields[0])
            if name is None:
                skipped += 1
                continue
            try:
                node = int(fields[1])
                values = [float(v) for v in fields[2].split(",")]
            except ValueError:
                raise DatasetError(f"{path}:{line_no}: malformed id or vector") from None
            if len(values) != d:
                raise DatasetError(f"{path}:{line_no}: vector has {len(values)} values, expected {d}")
            if not 0 <= node < arrays[name].shape[0]:
                raise DatasetError(f"{path}:{line_no}: node id {node} out of range")
            arrays[name][node] = values
    if skipped:
        logger.info("Ignored %d feature rows for non-endpoint types in %s", skipped, path)
    return arrays


def save_checkpoint(params: ModelParams, path: Path, meta: Optional[Dict[str, object]] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(meta or {})
    payload.update({"d": params.d, "n": params.n, "gene_keys": list(params.gene_keys)})
    with path.open("wb") as handle:
        np.savez_compressed(handle, meta=np.array(json.dumps(payload, sort_keys=True)), **params.arrays())


def load_checkpoint(path: Path) -> Tuple[ModelParams, Dict[str, object]]:
    with np.load(Path(path), allow_pickle=False) as data:
        missing = [name for name in ARRAY_NAMES + ("meta",) if name not in data.files]
        if missing:
            raise CheckpointMismatchError(f"{path}: checkpoint lacks {', '.join(missing)}")
        meta = json.loads(str(data["meta"]))
        params = ModelParams(
            **{name: np.array(data[name], dtype=np.float64) for name in ARRAY_NAMES},
            gene_keys=tuple(meta.get("gene_keys", ())),
        )
    if params.n != meta.get("n") or params.d != meta.get("d"):
        raise CheckpointMismatchError(f"{path}: stored shapes disagree with the recorded d/n")
    return params, meta
