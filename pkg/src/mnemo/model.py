"""Toy decoder-only transformer with per-layer latent-memory cross-attention.

Each layer's attention reads [extracted long-term tokens | short-term pool |
generation window]. Window tokens attend causally to each other and without
a causal mask to all memory tokens; memory tokens carry rotary position 0,
window tokens their index. Two low-rank adapter pairs (update / generate)
sit on the query and value projections over shared base weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .rng import Rng
from . import tensor as T
from .tensor import Tensor

MODE_UPDATE = "update"
MODE_GENERATE = "generate"
NEG_INF = -1e30


@dataclass
class LayerMemoryView:
    """Memory tokens fed to one layer: extracted LTM (oldest first) then STM.

    Fields may be numpy arrays (frozen state) or Tensors (graph-spliced
    during two-chunk training, so gradients reach the update pass).
    """

    extracted_ltm: object | None  # (E, d) with E <= K0, or None
    stm: object  # (N, d)

    def matrix(self) -> Tensor:
        parts = []
        if self.extracted_ltm is not None and _rows(self.extracted_ltm) > 0:
            parts.append(_as_t(self.extracted_ltm))
        parts.append(_as_t(self.stm))
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)

    @property
    def n_tokens(self) -> int:
        e = 0 if self.extracted_ltm is None else _rows(self.extracted_ltm)
        return e + _rows(self.stm)


def _rows(x) -> int:
    return x.shape[0]


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _rope_tables(positions: np.ndarray, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = 10000.0 ** (-np.arange(half) / half)
    ang = positions[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1)
    return cos, sin


def _rope_apply(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    # x: (H, T, dh); cos/sin: (T, dh) broadcast over heads
    dh = x.shape[-1]
    half = dh // 2
    rot = T.concat([x[:, :, half:] * -1.0, x[:, :, :half]], axis=-1)
    return x * cos + rot * sin


class MPlusModel:
    """Transformer weights + adapters + retriever projectors, one params dict."""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        self.mode = MODE_GENERATE
        self.params: dict[str, Tensor] = {}
        self._init_params(rng)

    # -- parameters ----------------------------------------------------------

    def _add(self, name: str, data: np.ndarray):
        self.params[name] = T.parameter(data)

    def _init_params(self, rng: Rng):
        c = self.config
        r = rng.split(1)
        std = 1.0 / math.sqrt(c.d)
        out_std = std / math.sqrt(2 * c.L)
        self._add("embed", r.normal((c.vocab, c.d), std))
        self._add("head", r.normal((c.d, c.vocab), std))
        self._add("norm_f", np.ones(c.d))
        for l in range(c.L):
            p = f"layers.{l}"
            self._add(f"{p}.wq", r.normal((c.d, c.d), std))
            self._add(f"{p}.wk", r.normal((c.d, c.d), std))
            self._add(f"{p}.wv", r.normal((c.d, c.d), std))
            self._add(f"{p}.wo", r.normal((c.d, c.d), out_std))
            self._add(f"{p}.w1", r.normal((c.d, c.d_ff), std))
            self._add(f"{p}.w2", r.normal((c.d_ff, c.d), out_std / 2))
            self._add(f"{p}.ln1", np.ones(c.d))
            self._add(f"{p}.ln2", np.ones(c.d))
            # zero-product init: B = 0 so adapters contribute nothing at start
            for mode in (MODE_UPDATE, MODE_GENERATE):
                for key in ("q", "v"):
                    self._add(f"{p}.lora.{mode}.{key}.A", r.normal((c.d, c.lora_rank), std))
                    self._add(f"{p}.lora.{mode}.{key}.B", np.zeros((c.lora_rank, c.d)))
        # retriever projectors live in the same checkpoint under "retriever."
        rr = rng.split(2)
        for prefix in self.retriever_prefixes():
            for fn in ("fq", "fk"):
                self._add(f"{prefix}.{fn}.w1", rr.normal((c.d, c.d), std))
                self._add(f"{prefix}.{fn}.b1", np.zeros(c.d))
                self._add(f"{prefix}.{fn}.w2", rr.normal((c.d, c.d_proj), std))
                self._add(f"{prefix}.{fn}.b2", np.zeros(c.d_proj))

    def retriever_prefixes(self) -> list[str]:
        if self.config.retriever_per_layer:
            return [f"retriever.layer{l}" for l in range(self.config.L)]
        return ["retriever"]

    def retriever_prefix(self, layer: int) -> str:
        if self.config.retriever_per_layer:
            return f"retriever.layer{layer}"
        return "retriever"

    def parameter_names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self.params if n.startswith(prefix))

    # -- adapter mode --------------------------------------------------------

    def set_adapter_mode(self, mode: str):
        if mode not in (MODE_UPDATE, MODE_GENERATE):
            raise ValueError(f"unknown adapter mode {mode!r}")
        self.mode = mode

    # -- building blocks -----------------------------------------------------

    def _rmsnorm(self, x: Tensor, gain: Tensor) -> Tensor:
        ms = T.tmean(x * x, axis=-1, keepdims=True)
        return x * T.power(ms + 1e-6, -0.5) * gain

    def _proj(self, layer: int, name: str, h: Tensor, lora_key: str | None = None) -> Tensor:
        p = f"layers.{layer}"
        out = h @ self.params[f"{p}.{name}"]
        if lora_key is not None:
            a = self.params[f"{p}.lora.{self.mode}.{lora_key}.A"]
            b = self.params[f"{p}.lora.{self.mode}.{lora_key}.B"]
            out = out + (h @ a) @ b
        return out

    def _attention(
        self,
        layer: int,
        h_q: Tensor,
        h_kv: Tensor,
        q_pos: np.ndarray,
        kv_pos: np.ndarray,
        mask: np.ndarray,
        collect: dict | None = None,
    ) -> Tensor:
        c = self.config
        H, dh = c.n_heads, c.head_dim
        tq, tk = h_q.shape[0], h_kv.shape[0]
        q = T.transpose(T.reshape(self._proj(layer, "wq", h_q, "q"), (tq, H, dh)), (1, 0, 2))
        k = T.transpose(T.reshape(self._proj(layer, "wk", h_kv), (tk, H, dh)), (1, 0, 2))
        v = T.transpose(T.reshape(self._proj(layer, "wv", h_kv, "v"), (tk, H, dh)), (1, 0, 2))
        q = _rope_apply(q, *_rope_tables(q_pos, dh))
        k = _rope_apply(k, *_rope_tables(kv_pos, dh))
        scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
        scores = scores + mask[None, :, :]
        weights = T.softmax(scores, axis=-1)
        if collect is not None:
            collect.setdefault("attention", []).append(weights.data.copy())
        out = T.matmul(weights, v)  # (H, tq, dh)
        out = T.reshape(T.transpose(out, (1, 0, 2)), (tq, H * dh))
        return out @ self.params[f"layers.{layer}.wo"]

    def _ffn(self, layer: int, h: Tensor) -> Tensor:
        u = h @ self.params[f"layers.{layer}.w1"]
        return (u * T.sigmoid(u)) @ self.params[f"layers.{layer}.w2"]

    def _block(
        self,
        layer: int,
        x: Tensor,
        memory: Tensor | None,
        x_pos: np.ndarray,
        mask: np.ndarray,
        collect: dict | None = None,
    ) -> Tensor:
        """Pre-norm residual block; memory rows (if any) join keys/values only."""
        p = f"layers.{layer}"
        h = self._rmsnorm(x, self.params[f"{p}.ln1"])
        if memory is not None:
            h_mem = self._rmsnorm(memory, self.params[f"{p}.ln1"])
            h_kv = T.concat([h_mem, h], axis=0)
            kv_pos = np.concatenate([np.zeros(memory.shape[0]), x_pos])
        else:
            h_kv = h
            kv_pos = x_pos
        attn = self._attention(layer, h, h_kv, x_pos, kv_pos, mask, collect)
        x = x + attn
        x = x + self._ffn(layer, self._rmsnorm(x, self.params[f"{p}.ln2"]))
        return x

    # -- generation ----------------------------------------------------------

    def embed(self, token_ids: np.ndarray) -> Tensor:
        return T.embedding(self.params["embed"], np.asarray(token_ids, dtype=np.int64))

    def forward_generate(
        self,
        token_ids: np.ndarray,
        views,
        collect: dict | None = None,
        on_layer=None,
    ) -> Tensor:
        """Next-token logits for a window of token ids.

        views: per-layer LayerMemoryView list, or a callable
        (layer, window_hidden_ndarray) -> LayerMemoryView | None evaluated
        lazily so retrieval can condition on the current hidden states.
        on_layer(layer, view_rows) is the residency accounting hook.
        """
        c = self.config
        token_ids = np.asarray(token_ids, dtype=np.int64)
        n = len(token_ids)
        if n == 0 or n > c.W_gen:
            raise ValueError(f"window length {n} outside [1, {c.W_gen}]")
        pos = np.arange(n, dtype=np.float64)
        causal = np.where(np.tril(np.ones((n, n), dtype=bool)), 0.0, NEG_INF)

        x = self.embed(token_ids)
        for l in range(c.L):
            if collect is not None:
                collect.setdefault("hidden", []).append(x.data.copy())
            view = views(l, x.data) if callable(views) else views[l]
            if view is None or view.n_tokens == 0:
                mem, rows = None, 0
                mask = causal
            else:
                mem = view.matrix()
                rows = mem.shape[0]
                mask = np.concatenate([np.zeros((n, rows)), causal], axis=1)
            if on_layer is not None:
                on_layer(l, rows)
            x = self._block(l, x, mem, pos, mask, collect)
        x = self._rmsnorm(x, self.params["norm_f"])
        return x @ self.params["head"]

    # -- update pass ---------------------------------------------------------

    def layer_update_pass(
        self, layer: int, last_k: Tensor, chunk_hidden: Tensor
    ) -> tuple[Tensor, Tensor]:
        """One layer of the write path over [last_k ; chunk_hidden].

        Memory rows attend to the whole sequence (they must absorb the chunk
        to act as its compressed carrier); chunk rows attend to all memory
        plus the chunk causally. Returns (new K tokens, transformed chunk
        hidden states for the next layer).
        """
        k = last_k.shape[0]
        n_chunk = chunk_hidden.shape[0]
        if n_chunk == 0:
            raise ValueError("update pass requires a non-empty chunk")
        total = k + n_chunk
        mask = np.full((total, total), NEG_INF)
        mask[:k, :] = 0.0
        mask[:, :k] = 0.0
        rows, cols = np.tril_indices(n_chunk)
        mask[k + rows, k + cols] = 0.0
        pos = np.concatenate([np.zeros(k), np.arange(1, n_chunk + 1, dtype=np.float64)])
        x = T.concat([last_k, chunk_hidden], axis=0)
        out = self._block(layer, x, None, pos, mask)
        return out[:k], out[k:]

    # -- attention-score retrieval (ablation) --------------------------------

    def attention_scores(
        self, layer: int, query_hidden: np.ndarray, token_vectors: np.ndarray
    ) -> np.ndarray:
        """Relevance of memory tokens under the layer's own q/k projections.

        Max-pooled over heads and query positions; no rotary (memory tokens
        sit at position 0 and queries are compared position-free).
        """
        c = self.config
        H, dh = c.n_heads, c.head_dim
        p = f"layers.{layer}"
        g = self.params[f"{p}.ln1"].data

        def norm(x):
            ms = (x * x).mean(axis=-1, keepdims=True)
            return x / np.sqrt(ms + 1e-6) * g

        hq = norm(np.asarray(query_hidden))
        hk = norm(np.asarray(token_vectors))
        q = hq @ self.params[f"{p}.wq"].data
        a = self.params[f"{p}.lora.{MODE_GENERATE}.q.A"].data
        b = self.params[f"{p}.lora.{MODE_GENERATE}.q.B"].data
        q = q + (hq @ a) @ b
        k = hk @ self.params[f"{p}.wk"].data
        q = q.reshape(len(hq), H, dh)
        k = k.reshape(len(hk), H, dh)
        scores = np.einsum("qhd,shd->qhs", q, k) / math.sqrt(dh)
        return scores.max(axis=(0, 1))

    # -- checkpointing -------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self.params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}"
                )
            p.data = arr.copy()
