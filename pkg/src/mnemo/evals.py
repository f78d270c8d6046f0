"""Knowledge-retention and retrieval-quality evaluation.

The retention protocol plants a fact chunk, injects increasing numbers of
distractor chunks, then asks the query prompt and scores exact match of
the greedy-decoded value tokens. Retrieval quality tracks how many of the
fact chunk's K compressed tokens sit in the long-term archive and how many
the retriever brings back, against the K0/|archive| random baseline.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .curriculum import CurriculumConfig, Fact, FILLER_LO, _plant
from .memory import MemoryState, inject_chunk
from .model import MODE_GENERATE, MODE_UPDATE, MPlusModel
from .rng import Rng
from .views import ABLATIONS, make_view_provider

FACT_PROVENANCE = "fact:0"


@dataclass
class Probe:
    fact_chunk: np.ndarray
    fact: Fact


@dataclass
class RetentionPoint:
    injected_distractor_tokens: int
    recall_accuracy: float
    n_questions: int


@dataclass
class RetentionCurve:
    ablation: str
    points: list[RetentionPoint]
    config_digest: str
    build_id: str

    def to_dict(self) -> dict:
        return {
            "ablation": self.ablation,
            "config_digest": self.config_digest,
            "build_id": self.build_id,
            "points": [
                {
                    "injected_distractor_tokens": p.injected_distractor_tokens,
                    "recall_accuracy": p.recall_accuracy,
                    "n_questions": p.n_questions,
                }
                for p in self.points
            ],
        }

    def auc(self, min_tokens: int = 0) -> float:
        """Trapezoidal area under (tokens, recall), restricted to
        points with at least min_tokens distractor tokens."""
        pts = [p for p in self.points if p.injected_distractor_tokens >= min_tokens]
        if len(pts) < 2:
            return pts[0].recall_accuracy if pts else 0.0
        x = np.array([p.injected_distractor_tokens for p in pts], dtype=float)
        y = np.array([p.recall_accuracy for p in pts])
        trapezoid = getattr(np, "trapezoid", None) or np.trapz
        return float(trapezoid(y, x))


def config_digest(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()[:16]


def build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    from importlib.metadata import version

    try:
        return f"mnemo-{version('mnemo')}"
    except Exception:
        return "mnemo-unknown"


# -- probe construction ------------------------------------------------------


def make_probes(seed: int, n_probes: int, cfg: CurriculumConfig, vocab: int) -> list[Probe]:
    rng = Rng(seed, stream=600)
    probes = []
    for _ in range(n_probes):
        chunk = rng.integers(FILLER_LO, vocab, size=cfg.chunk_len).astype(np.int64)
        key = tuple(int(t) for t in rng.integers(FILLER_LO, vocab, size=cfg.key_len))
        value = tuple(int(t) for t in rng.integers(FILLER_LO, vocab, size=cfg.value_len))
        fact = Fact(key, value, 0)
        _plant(chunk, fact.pattern(), rng)
        probes.append(Probe(chunk, fact))
    return probes


def make_distractors(seed: int, n: int, chunk_len: int, vocab: int) -> list[np.ndarray]:
    """Disjoint filler pool standing in for out-of-domain distracting contexts."""
    rng = Rng(seed, stream=650)
    return [rng.integers(FILLER_LO, vocab, size=chunk_len).astype(np.int64) for _ in range(n)]


# -- decoding ----------------------------------------------------------------


def greedy_decode(model: MPlusModel, views, prompt: list[int], n_tokens: int) -> list[int]:
    ids = list(prompt)
    for _ in range(n_tokens):
        logits = model.forward_generate(np.asarray(ids), views)
        ids.append(int(np.argmax(logits.data[-1])))
    return ids[len(prompt) :]


# -- retention protocol ------------------------------------------------------


def eval_retention(
    model: MPlusModel,
    stage_cfg: ModelConfig,
    probes: list[Probe],
    distractors: list[np.ndarray],
    distractor_counts: list[int],
    ablation: str,
    seed: int,
    config_for_digest: dict | None = None,
    trace_rows: list | None = None,
) -> RetentionCurve:
    """Run the distractor-injection retention sweep for one ablation label.

    trace_rows, when given, collects per-layer ground-truth tracking rows
    (used by the retrieval-quality command on the mplus label).
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    counts = sorted(set(distractor_counts))
    chunk_len = len(probes[0].fact_chunk) if probes else 0
    hits = {j: 0 for j in counts}

    for p_i, probe in enumerate(probes):
        memory = MemoryState(stage_cfg, Rng(seed, stream=3000 + p_i))
        rng = Rng(seed, stream=3500 + p_i)
        view_rng = Rng(seed, stream=4000 + p_i)
        model.set_adapter_mode(MODE_UPDATE)
        inject_chunk(probe.fact_chunk, model, memory, rng, FACT_PROVENANCE)
        injected = 0
        for j in counts:
            while injected < j:
                chunk = distractors[injected % len(distractors)]
                model.set_adapter_mode(MODE_UPDATE)
                inject_chunk(chunk, model, memory, rng, f"distractor:{injected}")
                injected += 1
            model.set_adapter_mode(MODE_GENERATE)
            layer_trace: list = []
            provider = make_view_provider(
                model,
                memory,
                ablation=ablation,
                rng=view_rng,
                trace=layer_trace if trace_rows is not None else None,
                gt_provenance=FACT_PROVENANCE,
            )
            decoded = greedy_decode(
                model, provider, probe.fact.query_prompt(), len(probe.fact.value)
            )
            if tuple(decoded) == probe.fact.value:
                hits[j] += 1
            if trace_rows is not None:
                seen = set()
                for row in layer_trace:
                    # greedy decode calls the provider once per generated token;
                    # keep the first call's counts per layer for this (probe, j)
                    if row["layer"] in seen:
                        continue
                    seen.add(row["layer"])
                    trace_rows.append({"probe": p_i, "distractor_chunks": j, **row})

    points = [
        RetentionPoint(j * chunk_len, hits[j] / max(len(probes), 1), len(probes))
        for j in counts
    ]
    return RetentionCurve(
        ablation=ablation,
        points=points,
        config_digest=config_digest(config_for_digest or stage_cfg.to_dict()),
        build_id=build_id(),
    )


def retrieval_advantage(trace_rows: list[dict], k0: int, min_archive: int = 0) -> dict:
    """Mean ground-truth retrieval fraction vs the K0/|archive| baseline.

    min_archive drops rows with small archives, where the random baseline
    saturates (K0/|archive| -> 1) and the comparison is uninformative.
    """
    fracs, baselines = [], []
    for row in trace_rows:
        if row["in_ltm"] > 0 and row["ltm_size"] >= max(min_archive, 1):
            fracs.append(row["retrieved"] / row["in_ltm"])
            baselines.append(min(k0, row["ltm_size"]) / row["ltm_size"])
    if not fracs:
        return {"trained_fraction": 0.0, "random_baseline": 0.0, "advantage": 0.0, "rows": 0}
    trained = float(np.mean(fracs))
    base = float(np.mean(baselines))
    return {
        "trained_fraction": trained,
        "random_baseline": base,
        "advantage": trained / base if base > 0 else 0.0,
        "rows": len(fracs),
    }
