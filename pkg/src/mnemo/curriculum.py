"""Synthetic corpus and the three-stage training schedule.

Documents are chunked token-id sequences with planted key->value facts:
the fact pattern [KEY k1.. VAL v1..] appears once in its fact chunk, and
the final chunk restates it as a query [QRY k1.. VAL v1..], so next-token
loss on the last chunk directly supervises recall from memory. Stages 1-2
train with a short-term pool of N+K0 tokens; stage 3 shrinks the pool to N
and activates long-term retrieval (same total attended budget).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import ModelConfig
from .memory import MemoryState, inject_chunk
from .model import LayerMemoryView, MODE_GENERATE, MODE_UPDATE, MPlusModel
from .optim import SGDM
from .retriever import retrieve, retriever_loss, split_pool_by_provenance
from .rng import Rng
from .tensor import Tensor

KEY_MARK = 1
VAL_MARK = 2
QRY_MARK = 3
FILLER_LO = 8  # marker ids never appear as filler/key/value tokens


@dataclass
class Fact:
    key: tuple[int, ...]
    value: tuple[int, ...]
    chunk_index: int

    def pattern(self) -> list[int]:
        return [KEY_MARK, *self.key, VAL_MARK, *self.value]

    def query_prompt(self) -> list[int]:
        return [QRY_MARK, *self.key, VAL_MARK]

    def restatement(self) -> list[int]:
        return [QRY_MARK, *self.key, VAL_MARK, *self.value]


@dataclass
class SyntheticDoc:
    id: str
    chunks: list[np.ndarray]
    facts: list[Fact]

    @property
    def n_chunks(self) -> int:
        return len(self.chunks)


@dataclass
class CurriculumConfig:
    n_docs: int = 400
    chunk_len: int = 16
    facts_per_doc: int = 1
    key_len: int = 2
    value_len: int = 2
    max_chunks: int = 12
    steps_per_stage: list[int] = field(default_factory=lambda: [2000, 2000, 2000])
    lr: float = 0.05
    momentum: float = 0.9
    min_lr_frac: float = 0.1
    clip_norm: float = 1.0
    revisit_target: list[int] = field(default_factory=lambda: [4, 8, 30])
    # stage 1 leans on two_chunk steps (the only task with gradients through
    # the update pass); later stages mix in longer-horizon tasks
    p_revisit: list[float] = field(default_factory=lambda: [0.1, 0.25, 0.25])
    p_cache: float = 0.2
    p_multi: list[float] = field(default_factory=lambda: [0.2, 0.5, 0.5])
    cache_capacity: int = 8
    revisit_cap: int = 64
    retriever_aux: float = 1.0
    heldout_frac: float = 0.1
    val_docs: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumConfig":
        return cls(**d)


# -- corpus ------------------------------------------------------------------


def _bucket_bounds(max_chunks: int) -> list[tuple[int, int]]:
    """Short bucket plus four long-length buckets (each gets 20% of docs)."""
    lo, hi = 4, max(max_chunks, 8)
    edges = np.unique(np.linspace(lo, hi + 1, 5).astype(int))
    longs = [(int(edges[i]), int(edges[i + 1]) - 1) for i in range(len(edges) - 1)]
    while len(longs) < 4:
        longs.append(longs[-1])
    return [(2, 3)] + longs[:4]


def make_corpus(
    seed: int,
    cfg: CurriculumConfig,
    vocab: int = 256,
    n_docs: int | None = None,
    id_prefix: str = "doc",
) -> list[SyntheticDoc]:
    """Deterministic synthetic corpus with 20% of docs per length bucket."""
    rng = Rng(seed, stream=7)
    n_docs = cfg.n_docs if n_docs is None else n_docs
    buckets = _bucket_bounds(cfg.max_chunks)
    docs = []
    for i in range(n_docs):
        lo, hi = buckets[i % len(buckets)]
        n_chunks = int(rng.integers(lo, hi + 1))
        docs.append(_make_doc(f"{id_prefix}{i}", n_chunks, cfg, vocab, rng))
    return docs


def _make_doc(
    doc_id: str, n_chunks: int, cfg: CurriculumConfig, vocab: int, rng: Rng
) -> SyntheticDoc:
    chunks = [
        rng.integers(FILLER_LO, vocab, size=cfg.chunk_len).astype(np.int64)
        for _ in range(n_chunks)
    ]
    facts: list[Fact] = []
    used_keys: set[tuple[int, ...]] = set()
    n_facts = min(cfg.facts_per_doc, max(1, n_chunks - 1))
    for f in range(n_facts):
        while True:
            key = tuple(int(t) for t in rng.integers(FILLER_LO, vocab, size=cfg.key_len))
            if key not in used_keys:
                used_keys.add(key)
                break
        value = tuple(int(t) for t in rng.integers(FILLER_LO, vocab, size=cfg.value_len))
        chunk_index = f % max(1, n_chunks - 1)
        fact = Fact(key, value, chunk_index)
        _plant(chunks[chunk_index], fact.pattern(), rng)
        _plant(chunks[-1], fact.restatement(), rng, slot=f)
        facts.append(fact)
    return SyntheticDoc(doc_id, chunks, facts)


def _plant(chunk: np.ndarray, pattern: list[int], rng: Rng, slot: int | None = None):
    width = len(pattern)
    if width > len(chunk):
        raise ValueError(f"chunk length {len(chunk)} too small for a {width}-token fact")
    if slot is None:
        start = int(rng.integers(0, len(chunk) - width + 1))
    else:
        start = slot * width
        if start + width > len(chunk):
            start = len(chunk) - width
    chunk[start : start + width] = pattern


def save_corpus(path: str, docs: list[SyntheticDoc]):
    with open(path, "w") as f:
        for doc in docs:
            f.write(
                json.dumps(
                    {
                        "id": doc.id,
                        "chunks": [c.tolist() for c in doc.chunks],
                        "facts": [
                            {"key": list(x.key), "value": list(x.value), "chunk_index": x.chunk_index}
                            for x in doc.facts
                        ],
                    }
                )
                + "\n"
            )


def load_corpus(path: str) -> list[SyntheticDoc]:
    docs = []
    with open(path) as f:
        for line in f:
            d = json.loads(line)
            docs.append(
                SyntheticDoc(
                    d["id"],
                    [np.asarray(c, dtype=np.int64) for c in d["chunks"]],
                    [Fact(tuple(x["key"]), tuple(x["value"]), x["chunk_index"]) for x in d["facts"]],
                )
            )
    return docs


# -- loss helpers ------------------------------------------------------------


def sequence_loss(model: MPlusModel, views, chunk: np.ndarray, collect=None) -> Tensor:
    """Mean next-token cross entropy of a chunk under generate mode."""
    inputs, targets = chunk[:-1], chunk[1:]
    logits = model.forward_generate(inputs, views, collect=collect)
    return -T.tmean(T.take_rows(T.log_softmax(logits, axis=-1), targets))


def _numpy_provider(model: MPlusModel, memory: MemoryState, use_ltm: bool):
    def provider(layer: int, window_hidden: np.ndarray) -> LayerMemoryView:
        extracted = None
        if use_ltm and memory.ltm_tokens[layer]:
            result = retrieve(model, layer, window_hidden, memory)
            if result.tokens:
                extracted = result.matrix
        return LayerMemoryView(extracted_ltm=extracted, stm=memory.stm_matrix(layer))

    return provider


def _aux_retriever_terms(
    model: MPlusModel, memory: MemoryState, hidden: list[np.ndarray], provs: set[str]
) -> Tensor | None:
    terms = []
    for l in range(model.config.L):
        pos, neg = split_pool_by_provenance(memory, l, provs)
        if len(pos) == 0 or len(neg) == 0:
            continue
        terms.append(
            retriever_loss(model, model.retriever_prefix(l), Tensor(hidden[l]), Tensor(pos), Tensor(neg))
        )
    if not terms:
        return None
    total = terms[0]
    for t_extra in terms[1:]:
        total = total + t_extra
    return total * (1.0 / len(terms))


# -- training sub-tasks ------------------------------------------------------


def two_chunk_step(
    doc: SyntheticDoc,
    model: MPlusModel,
    memory: MemoryState,
    optimizer: SGDM,
    rng: Rng,
    use_ltm: bool = False,
) -> float:
    """Inject the fact chunk with gradients retained through the update pass,
    then train on the final chunk in generate mode."""
    if doc.n_chunks < 2:
        raise ValueError("two_chunk_step needs at least two chunks")
    c = memory.config
    x1, x2 = doc.chunks[0], doc.chunks[-1]
    with T.Tape() as tape:
        model.set_adapter_mode(MODE_UPDATE)
        report = inject_chunk(x1, model, memory, rng, f"{doc.id}:0", record=True)
        stm_graph = []
        for l in range(c.L):
            survivors = np.stack([t.vector for t in memory.stm[l][: c.N - c.K]])
            stm_graph.append(T.concat([Tensor(survivors), report.graph_new_tokens[l]], axis=0))
        model.set_adapter_mode(MODE_GENERATE)

        def provider(layer: int, window_hidden: np.ndarray) -> LayerMemoryView:
            extracted = None
            if use_ltm and memory.ltm_tokens[layer]:
                result = retrieve(model, layer, window_hidden, memory)
                if result.tokens:
                    extracted = result.matrix
            return LayerMemoryView(extracted_ltm=extracted, stm=stm_graph[layer])

        loss = sequence_loss(model, provider, x2)
        T.backward(tape, loss)
    optimizer.step()
    return loss.item()


def multi_chunk_step(
    doc: SyntheticDoc,
    model: MPlusModel,
    memory: MemoryState,
    optimizer: SGDM,
    rng: Rng,
    use_ltm: bool = False,
    retriever_aux: float = 0.0,
) -> float:
    """Inject x_1..x_{n-1} detached, then train on x_n. With retriever_aux > 0
    the contrastive retriever objective joins the x_n pass (stage 3)."""
    if doc.n_chunks < 3:
        raise ValueError("multi_chunk_step needs at least three chunks")
    model.set_adapter_mode(MODE_UPDATE)
    # retriever positives are the fact chunks only: the query restates the
    # fact, and the doc's filler chunks look just like any other distractor
    provs = {f"{doc.id}:{f.chunk_index}" for f in doc.facts}
    for i, chunk in enumerate(doc.chunks[:-1]):
        inject_chunk(chunk, model, memory, rng, f"{doc.id}:{i}")
    model.set_adapter_mode(MODE_GENERATE)
    with T.Tape() as tape:
        collect: dict = {}
        loss = sequence_loss(model, _numpy_provider(model, memory, use_ltm), doc.chunks[-1], collect)
        if retriever_aux > 0.0:
            aux = _aux_retriever_terms(model, memory, collect["hidden"], provs)
            if aux is not None:
                loss = loss + aux * retriever_aux
        T.backward(tape, loss)
    optimizer.step()
    return loss.item()


# -- revisit cache -----------------------------------------------------------


@dataclass(eq=False)
class CacheEntry:
    doc: SyntheticDoc
    injected_step: int
    due_step: int


class RevisitCache:
    """Documents queued for a delayed query, roughly target_distance training
    steps after they were first seen; each entry is served once."""

    def __init__(self, target_distance: int, capacity: int = 8):
        self.target_distance = target_distance
        self.capacity = capacity
        self.entries: list[CacheEntry] = []
        self.served_distances: list[int] = []
        self.skips = 0

    def add(self, doc: SyntheticDoc, step: int, rng: Rng) -> bool:
        if len(self.entries) >= self.capacity:
            return False
        jitter = 0.5 + rng.uniform()  # due in [0.5, 1.5] * target
        due = step + max(1, int(round(self.target_distance * jitter)))
        self.entries.append(CacheEntry(doc, step, due))
        return True

    def pop_due(self, step: int) -> CacheEntry | None:
        due = [e for e in self.entries if e.due_step <= step]
        if not due:
            return None
        entry = min(due, key=lambda e: (e.due_step, e.doc.id))
        self.entries.remove(entry)
        return entry

    @property
    def mean_distance(self) -> float:
        return float(np.mean(self.served_distances)) if self.served_distances else 0.0


def revisit_step(
    cache: RevisitCache,
    model: MPlusModel,
    stage_cfg: ModelConfig,
    optimizer: SGDM,
    rng: Rng,
    now: int,
    use_ltm: bool = False,
    distance_cap: int = 64,
) -> float | None:
    """Serve one due cache entry: rebuild the document's memory, age it with
    as many filler injections as training steps have elapsed (capped), then
    train on the final chunk. Returns None when nothing is due."""
    entry = cache.pop_due(now)
    if entry is None:
        cache.skips += 1
        return None
    doc = entry.doc
    memory = MemoryState(stage_cfg, rng.split(int(rng.integers(0, 2**31))))
    model.set_adapter_mode(MODE_UPDATE)
    for j, chunk in enumerate(doc.chunks[:-1]):
        inject_chunk(chunk, model, memory, rng, f"{doc.id}:{j}")
    # serve at the scheduled distance (entries can sit past their due step
    # waiting for a revisit draw, which would inflate elapsed time)
    distance = min(entry.due_step - entry.injected_step, distance_cap)
    chunk_len = len(doc.chunks[-1])
    for j in range(distance):
        filler = rng.integers(FILLER_LO, model.config.vocab, size=chunk_len)
        inject_chunk(filler, model, memory, rng, f"revisit-filler:{j}")
    cache.served_distances.append(distance)
    model.set_adapter_mode(MODE_GENERATE)
    with T.Tape() as tape:
        loss = sequence_loss(model, _numpy_provider(model, memory, use_ltm), doc.chunks[-1])
        T.backward(tape, loss)
    optimizer.step()
    return loss.item()


# -- staged training ---------------------------------------------------------


def stage_model_config(base: ModelConfig, stage: int) -> ModelConfig:
    """Stages 1-2: short-term pool of N+K0 tokens, no retrieval.
    Stage 3: pool back to N with K0 retrieved tokens (same total budget)."""
    d = base.to_dict()
    if stage in (1, 2):
        d["N"] = base.N + base.K0
        d["K0"] = 0
    return ModelConfig.from_dict(d)


def split_corpus(docs: list[SyntheticDoc], heldout_frac: float):
    n_held = max(1, int(len(docs) * heldout_frac))
    return docs[:-n_held], docs[-n_held:]


def validation_loss(
    model: MPlusModel,
    docs: list[SyntheticDoc],
    stage_cfg: ModelConfig,
    seed: int,
    use_ltm: bool,
) -> float:
    """Held-out loss: inject all but the last chunk, score the last chunk."""
    losses = []
    for i, doc in enumerate(docs):
        memory = MemoryState(stage_cfg, Rng(seed, stream=9000 + i))
        rng = Rng(seed, stream=9500 + i)
        model.set_adapter_mode(MODE_UPDATE)
        for j, chunk in enumerate(doc.chunks[:-1]):
            inject_chunk(chunk, model, memory, rng, f"{doc.id}:{j}")
        model.set_adapter_mode(MODE_GENERATE)
        loss = sequence_loss(model, _numpy_provider(model, memory, use_ltm), doc.chunks[-1])
        losses.append(loss.item())
    return float(np.mean(losses))


def run_stage(
    stage: int,
    base_cfg: ModelConfig,
    cur_cfg: CurriculumConfig,
    corpus: list[SyntheticDoc],
    seed: int,
    out_dir: str,
    prev_checkpoint: str | None = None,
) -> dict:
    """Train one curriculum stage and write checkpoint + loss CSV to out_dir.

    Stage 2 requires a stage-1 checkpoint, stage 3 a stage-2 checkpoint
    (enforced via the checkpoint's recorded stage).
    """
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2, or 3, got {stage}")
    stage_cfg = stage_model_config(base_cfg, stage)
    model = MPlusModel(base_cfg, Rng(seed))
    if stage > 1:
        if prev_checkpoint is None:
            raise StageOrderError(f"stage {stage} requires a stage-{stage - 1} checkpoint")
        arrays, extra = checkpoint.load_tensors(prev_checkpoint)
        prev_stage = extra.get("stage")
        if prev_stage != stage - 1:
            raise StageOrderError(
                f"stage {stage} requires a stage-{stage - 1} checkpoint, "
                f"got stage {prev_stage!r}"
            )
        model.load_state_arrays(arrays)
    use_ltm = stage == 3
    aux = cur_cfg.retriever_aux if stage == 3 else 0.0

    train_docs, heldout = split_corpus(corpus, cur_cfg.heldout_frac)
    if stage == 1:
        short = [d for d in train_docs if d.n_chunks <= 3]
        pool = short if short else train_docs
    else:
        pool = train_docs

    steps = cur_cfg.steps_per_stage[stage - 1]
    rng = Rng(seed, stream=40 + stage)
    optimizer = SGDM(
        list(model.params.values()),
        lr=cur_cfg.lr,
        momentum=cur_cfg.momentum,
        total_steps=steps,
        min_lr_frac=cur_cfg.min_lr_frac,
        clip_norm=cur_cfg.clip_norm,
    )
    cache = RevisitCache(cur_cfg.revisit_target[stage - 1], cur_cfg.cache_capacity)

    rows = []
    for t in range(steps):
        task, loss = None, None
        if rng.uniform() < cur_cfg.p_revisit[stage - 1]:
            loss = revisit_step(
                cache, model, stage_cfg, optimizer, rng, t, use_ltm, cur_cfg.revisit_cap
            )
            if loss is not None:
                task = "revisit"
        if loss is None:
            doc = pool[int(rng.integers(0, len(pool)))]
            # every task step gets a fresh memory so the model learns to read
            # facts out of varying pools rather than one shared state
            memory = MemoryState(stage_cfg, rng.split(90_000 + t))
            if doc.n_chunks >= 3 and rng.uniform() < cur_cfg.p_multi[stage - 1]:
                task = "multi_chunk"
                loss = multi_chunk_step(doc, model, memory, optimizer, rng, use_ltm, aux)
            else:
                task = "two_chunk"
                loss = two_chunk_step(doc, model, memory, optimizer, rng, use_ltm)
            if rng.uniform() < cur_cfg.p_cache:
                cache.add(doc, t, rng)
        rows.append(
            {
                "step": t,
                "stage": stage,
                "task": task,
                "loss": loss,
                "revisit_distance_mean": cache.mean_distance,
            }
        )

    long_heldout = [d for d in heldout if d.n_chunks >= 4] or heldout
    val = validation_loss(model, long_heldout[: cur_cfg.val_docs], stage_cfg, seed, use_ltm)

    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, f"stage{stage}")
    checkpoint.save_tensors(
        ckpt_dir,
        model.state_arrays(),
        dtype="float32",
        extra={
            "kind": "model",
            "stage": stage,
            "seed": seed,
            "model_config": base_cfg.to_dict(),
            "stage_config": stage_cfg.to_dict(),
            "validation_loss": val,
        },
    )
    csv_path = os.path.join(out_dir, f"stage{stage}_loss.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["step", "stage", "task", "loss", "revisit_distance_mean"]
        )
        writer.writeheader()
        writer.writerows(rows)
    return {
        "checkpoint": ckpt_dir,
        "loss_csv": csv_path,
        "validation_loss": val,
        "revisit_distance_mean": cache.mean_distance,
        "revisit_served": len(cache.served_distances),
    }


class StageOrderError(Exception):
    pass
