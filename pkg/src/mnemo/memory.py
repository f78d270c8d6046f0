"""Short-term / long-term memory state machine.

The short-term pool keeps exactly N tokens per layer: each chunk injection
compresses the chunk into K new tokens (via the model's update pass), drops
K uniformly chosen tokens into the long-term archive, and appends the new
ones at the end. The archive stores dropped tokens with their retriever
keys and evicts the largest-age (smallest birth step) tokens at capacity M.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import ModelConfig
from .model import MODE_UPDATE, MPlusModel
from .rng import Rng

PRIMORDIAL = "primordial"


@dataclass
class MemoryToken:
    vector: np.ndarray
    birth_step: int
    provenance: str
    uid: int

    def age(self, now: int) -> int:
        return now - self.birth_step


@dataclass
class LayerReport:
    dropped_uids: list[int]
    appended: int
    ltm_size: int
    evicted: int


@dataclass
class UpdateReport:
    step: int
    provenance: str
    mode: str
    layers: list[LayerReport]
    # graph-connected new-token tensors, only kept when record=True
    graph_new_tokens: list | None = None


class MemoryState:
    """Per-layer θ (STM) and Θ (LTM) pools plus the global update counter."""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        self.step = 0
        self._next_uid = 0
        self.stm: list[list[MemoryToken]] = []
        self.ltm_tokens: list[list[MemoryToken]] = []
        self.ltm_keys: list[list[np.ndarray]] = []
        self.evicted_log: list[list[int]] = []
        self.appended_total = 0
        r = rng.split(100)
        scale = 1.0 / np.sqrt(config.d)
        for _ in range(config.L):
            layer = [
                self._new_token(r.normal(config.d, scale), 0, PRIMORDIAL)
                for _ in range(config.N)
            ]
            self.stm.append(layer)
            self.ltm_tokens.append([])
            self.ltm_keys.append([])
            self.evicted_log.append([])

    def _new_token(self, vector: np.ndarray, birth: int, provenance: str) -> MemoryToken:
        tok = MemoryToken(np.asarray(vector, dtype=np.float64), birth, provenance, self._next_uid)
        self._next_uid += 1
        self.appended_total += 1
        return tok

    # -- views ---------------------------------------------------------------

    def stm_matrix(self, layer: int) -> np.ndarray:
        return np.stack([t.vector for t in self.stm[layer]])

    def ltm_key_matrix(self, layer: int) -> np.ndarray:
        if not self.ltm_keys[layer]:
            return np.zeros((0, self.config.d_proj))
        return np.stack(self.ltm_keys[layer])

    def resize_stm(self, new_n: int, rng: Rng):
        """Shrink or grow θ (stage-2 -> stage-3 reconfiguration).

        Shrinking drops the oldest tokens into Θ; growing pads with fresh
        primordial tokens.
        """
        scale = 1.0 / np.sqrt(self.config.d)
        for l in range(self.config.L):
            pool = self.stm[l]
            while len(pool) > new_n:
                tok = pool.pop(0)
                self.ltm_tokens[l].append(tok)
                self.ltm_keys[l].append(np.zeros(self.config.d_proj))
            while len(pool) < new_n:
                pool.append(self._new_token(rng.normal(self.config.d, scale), self.step, PRIMORDIAL))
        self.config.N = new_n

    # -- snapshotting --------------------------------------------------------

    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays: dict[str, np.ndarray] = {}
        meta: dict = {
            "step": self.step,
            "next_uid": self._next_uid,
            "appended_total": self.appended_total,
            "layers": [],
        }
        for l in range(self.config.L):
            arrays[f"stm.{l}"] = self.stm_matrix(l)
            ltm = self.ltm_tokens[l]
            arrays[f"ltm.{l}.vectors"] = (
                np.stack([t.vector for t in ltm]) if ltm else np.zeros((0, self.config.d))
            )
            arrays[f"ltm.{l}.keys"] = self.ltm_key_matrix(l)
            meta["layers"].append(
                {
                    "stm": [[t.birth_step, t.provenance, t.uid] for t in self.stm[l]],
                    "ltm": [[t.birth_step, t.provenance, t.uid] for t in ltm],
                    "evicted": list(self.evicted_log[l]),
                }
            )
        return arrays, meta

    def snapshot(self) -> "MemorySnapshot":
        arrays, meta = self.to_arrays()
        return MemorySnapshot(
            config=self.config.to_dict(),
            arrays={k: v.copy() for k, v in arrays.items()},
            meta=json.loads(json.dumps(meta)),
        )

    def save(self, path: str):
        arrays, meta = self.to_arrays()
        checkpoint.save_tensors(
            path,
            arrays,
            dtype="float64",
            extra={"kind": "memory", "config": self.config.to_dict(), "meta": meta},
        )

    @classmethod
    def load(cls, path: str) -> "MemoryState":
        arrays, extra = checkpoint.load_tensors(path)
        if extra.get("kind") != "memory":
            raise checkpoint.CheckpointError(f"{path} is not a memory snapshot")
        snap = MemorySnapshot(config=extra["config"], arrays=arrays, meta=extra["meta"])
        return restore(snap)


@dataclass
class MemorySnapshot:
    """Immutable captured memory state; see restore()."""

    config: dict
    arrays: dict[str, np.ndarray]
    meta: dict


def restore(snap: MemorySnapshot) -> MemoryState:
    config = ModelConfig.from_dict(dict(snap.config))
    mem = MemoryState.__new__(MemoryState)
    mem.config = config
    mem.step = snap.meta["step"]
    mem._next_uid = snap.meta["next_uid"]
    mem.appended_total = snap.meta["appended_total"]
    mem.stm, mem.ltm_tokens, mem.ltm_keys, mem.evicted_log = [], [], [], []
    for l, layer_meta in enumerate(snap.meta["layers"]):
        stm_vecs = snap.arrays[f"stm.{l}"]
        mem.stm.append(
            [
                MemoryToken(stm_vecs[i].copy(), b, prov, uid)
                for i, (b, prov, uid) in enumerate(layer_meta["stm"])
            ]
        )
        ltm_vecs = snap.arrays[f"ltm.{l}.vectors"]
        mem.ltm_tokens.append(
            [
                MemoryToken(ltm_vecs[i].copy(), b, prov, uid)
                for i, (b, prov, uid) in enumerate(layer_meta["ltm"])
            ]
        )
        keys = snap.arrays[f"ltm.{l}.keys"]
        mem.ltm_keys.append([keys[i].copy() for i in range(len(keys))])
        mem.evicted_log.append(list(layer_meta["evicted"]))
    return mem


# -- update ------------------------------------------------------------------


def inject_chunk(
    chunk_ids: np.ndarray,
    model: MPlusModel,
    memory: MemoryState,
    rng: Rng,
    provenance: str,
    record: bool = False,
) -> UpdateReport:
    """One memory update: compress the chunk into K tokens per layer, drop K
    random tokens into Θ (computing their retriever keys), append the new K.

    With record=True the new-token tensors stay graph-connected on the
    active tape so two-chunk training can backprop through the update pass.
    """
    from .retriever import project  # late import; retriever needs the model only

    c = memory.config
    chunk_ids = np.asarray(chunk_ids, dtype=np.int64)
    if len(chunk_ids) == 0 or len(chunk_ids) > c.W_gen:
        raise ValueError(f"chunk length {len(chunk_ids)} outside [1, {c.W_gen}]")
    if model.mode != MODE_UPDATE:
        raise ValueError("inject_chunk requires update-mode adapters to be active")

    memory.step += 1
    layers: list[LayerReport] = []
    graph_tokens: list | None = [] if record else None
    chunk_hidden = model.embed(chunk_ids)
    for l in range(c.L):
        pool = memory.stm[l]
        last_k = T.Tensor(np.stack([t.vector for t in pool[-c.K :]]))
        new_k, chunk_hidden = model.layer_update_pass(l, last_k, chunk_hidden)
        if record:
            graph_tokens.append(new_k)

        drop_idx = rng.sample_without_replacement(c.N, c.K)
        dropped = [pool[i] for i in drop_idx]
        keep = np.setdiff1d(np.arange(c.N), drop_idx, assume_unique=True)
        survivors = [pool[i] for i in keep]

        key_vecs = project(model, model.retriever_prefix(l), "fk",
                           np.stack([t.vector for t in dropped]))
        memory.ltm_tokens[l].extend(dropped)
        memory.ltm_keys[l].extend(list(key_vecs))

        new_tokens = [
            memory._new_token(new_k.data[i].copy(), memory.step, provenance)
            for i in range(c.K)
        ]
        memory.stm[l] = survivors + new_tokens

        evicted = _evict_to_capacity(memory, l)
        layers.append(
            LayerReport(
                dropped_uids=[t.uid for t in dropped],
                appended=c.K,
                ltm_size=len(memory.ltm_tokens[l]),
                evicted=evicted,
            )
        )
    return UpdateReport(
        step=memory.step,
        provenance=provenance,
        mode=model.mode,
        layers=layers,
        graph_new_tokens=graph_tokens,
    )


def _evict_to_capacity(memory: MemoryState, layer: int) -> int:
    """Drop largest-age (smallest birth step) tokens until |Θ| <= M.

    Ties on birth step break by pool order: earlier-archived goes first.
    """
    tokens = memory.ltm_tokens[layer]
    excess = len(tokens) - memory.config.M
    if excess <= 0:
        return 0
    order = sorted(range(len(tokens)), key=lambda i: (tokens[i].birth_step, i))
    victims = set(order[:excess])
    memory.evicted_log[layer].extend(tokens[i].uid for i in sorted(victims))
    memory.ltm_tokens[layer] = [t for i, t in enumerate(tokens) if i not in victims]
    memory.ltm_keys[layer] = [
        k for i, k in enumerate(memory.ltm_keys[layer]) if i not in victims
    ]
    return excess


# -- compression arithmetic --------------------------------------------------


def expected_compressed_count(n: int, k: int, n_chunks: int) -> float:
    """Expected surviving memory-token count after injecting n_chunks chunks.

    Chunk i's K tokens each survive a later update with probability
    (N-K)/N, so the total is K * sum_{i=0}^{n_chunks-1} ((N-K)/N)^i.
    """
    if n_chunks < 0:
        raise ValueError("n_chunks must be non-negative")
    r = (n - k) / n
    return k * sum(r**i for i in range(n_chunks))


def simulate_survival(
    n: int, k: int, n_chunks: int, trials: int, seed: int
) -> np.ndarray:
    """Monte-Carlo oracle for the random-dropping survival counts.

    Returns an (n_chunks,) array: mean number of tokens from chunk j (0-based)
    still in the pool after all n_chunks injections, averaged over trials.
    Pure index bookkeeping; no model involved.
    """
    rng = Rng(seed, stream=777)
    counts = np.zeros(n_chunks)
    for _ in range(trials):
        owner = np.full(n, -1)  # -1 = primordial
        for j in range(n_chunks):
            drop = rng.sample_without_replacement(n, k)
            keep = np.setdiff1d(np.arange(n), drop, assume_unique=True)
            owner = np.concatenate([owner[keep], np.full(k, j)])
        for j in range(n_chunks):
            counts[j] += (owner == j).sum()
    return counts / max(trials, 1)
