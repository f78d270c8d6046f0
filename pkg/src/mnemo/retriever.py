"""Query/key projectors, exact top-K0 inner-product retrieval, and the
contrastive training objective.

Both projectors are two-layer perceptrons d -> d -> d_proj with a tanh in
between; their weights live in the model checkpoint under the reserved
"retriever." prefix. Retrieval is an exact scan over the archive: per-token
relevance pools the query-position scores (max by default) and the top K0
tokens are returned sorted oldest-first for the model view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .memory import MemoryState, MemoryToken, PRIMORDIAL, inject_chunk
from .model import MODE_GENERATE, MODE_UPDATE, MPlusModel
from .rng import Rng
from .tensor import Tensor


def project(model: MPlusModel, prefix: str, fn: str, x: np.ndarray) -> np.ndarray:
    """Numpy forward of projector fn in {fq, fk}; used on frozen states."""
    p = model.params
    h = np.tanh(x @ p[f"{prefix}.{fn}.w1"].data + p[f"{prefix}.{fn}.b1"].data)
    return h @ p[f"{prefix}.{fn}.w2"].data + p[f"{prefix}.{fn}.b2"].data


def project_t(model: MPlusModel, prefix: str, fn: str, x: Tensor) -> Tensor:
    """Differentiable projector forward for training."""
    p = model.params
    h = T.tanh(x @ p[f"{prefix}.{fn}.w1"] + p[f"{prefix}.{fn}.b1"])
    return h @ p[f"{prefix}.{fn}.w2"] + p[f"{prefix}.{fn}.b2"]


@dataclass
class RetrievalResult:
    indices: np.ndarray  # into Θ_l, in chronological (oldest-first) order
    scores: np.ndarray  # relevance of those indices, same order
    tokens: list[MemoryToken]  # chronologically sorted, oldest first

    @property
    def matrix(self) -> np.ndarray:
        if not self.tokens:
            return np.zeros((0, 0))
        return np.stack([t.vector for t in self.tokens])


def _pool_scores(dots: np.ndarray, pooling: str) -> np.ndarray:
    return dots.max(axis=0) if pooling == "max" else dots.mean(axis=0)


def select_top(
    scores: np.ndarray, tokens: list[MemoryToken], k0: int
) -> np.ndarray:
    """Exact top-k0 indices by score; ties by smallest birth step, then index."""
    n = len(scores)
    if n == 0 or k0 <= 0:
        return np.zeros(0, dtype=np.int64)
    births = np.array([t.birth_step for t in tokens])
    order = np.lexsort((np.arange(n), births, -scores))
    return order[: min(k0, n)]


def retrieve(
    model: MPlusModel,
    layer: int,
    query_hidden: np.ndarray,
    memory: MemoryState,
    k0: int | None = None,
) -> RetrievalResult:
    """Exact top-K0 retrieval from Θ_layer for a batch of query hidden states."""
    c = model.config
    k0 = c.K0 if k0 is None else k0
    tokens = memory.ltm_tokens[layer]
    if not tokens or k0 == 0:
        return RetrievalResult(np.zeros(0, dtype=np.int64), np.zeros(0), [])
    queries = project(model, model.retriever_prefix(layer), "fq", np.atleast_2d(query_hidden))
    keys = memory.ltm_key_matrix(layer)
    scores = _pool_scores(queries @ keys.T, c.retriever_pooling)
    picked = select_top(scores, tokens, k0)
    chrono = sorted(picked, key=lambda i: (tokens[i].birth_step, i))
    chrono = np.asarray(chrono, dtype=np.int64)
    return RetrievalResult(chrono, scores[chrono], [tokens[i] for i in chrono])


# -- training objective ------------------------------------------------------


def retriever_loss(
    model: MPlusModel,
    prefix: str,
    query_hidden: Tensor,
    theta_plus: Tensor,
    theta_minus: Tensor,
) -> Tensor:
    """Contrastive objective pushing positive tokens above negatives.

    Scores are logistic of the sqrt(d_proj)-scaled inner product; the loss
    averages -log p over (query, positive) pairs and -log(1-p) over
    (query, negative) pairs.
    """
    if theta_plus.shape[0] == 0 or theta_minus.shape[0] == 0:
        raise ValueError("retriever_loss requires non-empty positive and negative sets")
    scale = 1.0 / math.sqrt(model.config.d_proj)
    q = project_t(model, prefix, "fq", query_hidden)
    kp = project_t(model, prefix, "fk", theta_plus)
    kn = project_t(model, prefix, "fk", theta_minus)
    pos = T.matmul(q, T.transpose(kp, (1, 0))) * scale
    neg = T.matmul(q, T.transpose(kn, (1, 0))) * scale
    # -log sigmoid(z) for positives, -log(1 - sigmoid(z)) for negatives
    return -T.tmean(T.logsigmoid(pos)) - T.tmean(T.logsigmoid(neg * -1.0))


def split_pool_by_provenance(
    memory: MemoryState, layer: int, positive_provenances: set[str]
) -> tuple[np.ndarray, np.ndarray]:
    """Partition the layer's pooled θ+Θ vectors by provenance.

    Positives come from the given chunk ids wherever they currently live
    (short-term or archived); negatives are primordial tokens or tokens
    from other chunks.
    """
    pos, neg = [], []
    for tok in memory.stm[layer] + memory.ltm_tokens[layer]:
        if tok.provenance in positive_provenances:
            pos.append(tok.vector)
        else:
            neg.append(tok.vector)
    d = memory.config.d
    return (
        np.stack(pos) if pos else np.zeros((0, d)),
        np.stack(neg) if neg else np.zeros((0, d)),
    )


def retriever_train_step(
    doc_chunks: list[np.ndarray],
    model: MPlusModel,
    memory: MemoryState,
    optimizer,
    rng: Rng,
    provenance_base: str = "doc",
) -> float | None:
    """Inject x_1..x_{n-1}, then train f_q/f_k to score the surviving tokens
    of those chunks above primordial/older tokens, using x_n's hidden states
    as queries. Returns the loss, or None if every layer lost all positives.
    """
    if len(doc_chunks) < 2:
        raise ValueError("retriever_train_step needs at least two chunks")
    model.set_adapter_mode(MODE_UPDATE)
    provs = set()
    for i, chunk in enumerate(doc_chunks[:-1]):
        prov = f"{provenance_base}:{i}"
        provs.add(prov)
        inject_chunk(chunk, model, memory, rng, prov)

    model.set_adapter_mode(MODE_GENERATE)
    collect: dict = {}
    views = [
        _stm_view(memory, l) for l in range(model.config.L)
    ]
    model.forward_generate(doc_chunks[-1], views, collect=collect)

    losses = []
    with T.Tape() as tape:
        for l in range(model.config.L):
            pos, neg = split_pool_by_provenance(memory, l, provs)
            if len(pos) == 0 or len(neg) == 0:
                continue
            losses.append(
                retriever_loss(
                    model,
                    model.retriever_prefix(l),
                    Tensor(collect["hidden"][l]),
                    Tensor(pos),
                    Tensor(neg),
                )
            )
        if not losses:
            return None
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        total = total * (1.0 / len(losses))
        T.backward(tape, total)
    optimizer.step()
    return total.item()


def _stm_view(memory: MemoryState, layer: int):
    from .model import LayerMemoryView

    return LayerMemoryView(extracted_ltm=None, stm=memory.stm_matrix(layer))
