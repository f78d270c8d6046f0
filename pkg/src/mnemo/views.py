"""Per-layer memory view providers for generation-time ablations.

A provider is a callable (layer, window_hidden) -> LayerMemoryView used by
forward_generate. The labels mirror the harness ablations: trained
retriever ("mplus"), no LTM ("stm_only"), attention-score retrieval
("attn_retrieval"), and uniform sampling ("random_retrieval").
"""

from __future__ import annotations

import numpy as np

from .memory import MemoryState
from .model import LayerMemoryView, MPlusModel
from .retriever import retrieve, select_top
from .rng import Rng

ABLATIONS = ("mplus", "stm_only", "attn_retrieval", "random_retrieval")


def make_view_provider(
    model: MPlusModel,
    memory: MemoryState,
    ablation: str = "mplus",
    rng: Rng | None = None,
    trace: list | None = None,
    gt_provenance: str | None = None,
):
    """Build a view provider; optionally record ground-truth-token tracking.

    When trace is a list and gt_provenance names the fact-bearing chunk,
    each call appends per-layer dicts {layer, in_ltm, retrieved, ltm_size}.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    if ablation == "random_retrieval" and rng is None:
        raise ValueError("random_retrieval needs an rng")
    c = model.config

    def provider(layer: int, window_hidden: np.ndarray) -> LayerMemoryView:
        stm = memory.stm_matrix(layer)
        tokens = memory.ltm_tokens[layer]
        if ablation == "stm_only" or c.K0 == 0 or not tokens:
            if trace is not None and gt_provenance is not None and ablation != "stm_only":
                trace.append(_trace_row(layer, tokens, [], gt_provenance))
            return LayerMemoryView(extracted_ltm=None, stm=stm)

        if ablation == "mplus":
            result = retrieve(model, layer, window_hidden, memory)
            chrono = result.indices
        else:
            if ablation == "attn_retrieval":
                vectors = np.stack([t.vector for t in tokens])
                scores = model.attention_scores(layer, window_hidden, vectors)
                picked = select_top(scores, tokens, c.K0)
            else:  # random_retrieval
                picked = rng.sample_without_replacement(len(tokens), min(c.K0, len(tokens)))
            chrono = np.asarray(
                sorted(picked, key=lambda i: (tokens[i].birth_step, i)), dtype=np.int64
            )
        if trace is not None and gt_provenance is not None:
            trace.append(_trace_row(layer, tokens, chrono, gt_provenance))
        extracted = np.stack([tokens[i].vector for i in chrono]) if len(chrono) else None
        return LayerMemoryView(extracted_ltm=extracted, stm=stm)

    return provider


def _trace_row(layer, tokens, picked, gt_provenance) -> dict:
    in_ltm = sum(1 for t in tokens if t.provenance == gt_provenance)
    got = sum(1 for i in picked if tokens[i].provenance == gt_provenance)
    return {
        "layer": layer,
        "in_ltm": in_ltm,
        "retrieved": got,
        "ltm_size": len(tokens),
    }
