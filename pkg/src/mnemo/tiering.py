"""Tiered residency of memory views with deterministic accounting.

Instead of real device transfers, residency is modeled as byte counters:
in offload mode a layer's view is fast-resident only while that layer runs,
so the peak is one layer's view plus activations; in resident mode all L
views stay fast-resident for the whole call. Logits are computed by the
same code path in both modes and are therefore bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .model import MPlusModel

FLOAT_BYTES = 8

RESIDENT = "resident"
OFFLOAD = "offload"


class BudgetError(Exception):
    pass


@dataclass
class CostParams:
    per_byte: float = 0.0
    per_transfer: float = 0.0
    per_token: float = 0.0


@dataclass
class TierPolicy:
    """Residency mode plus monotone transfer/residency counters."""

    mode: str = RESIDENT
    fast_budget_bytes: int | None = None
    transfers_in: int = 0
    transfers_out: int = 0
    bytes_moved: int = 0
    peak_fast_resident_bytes: int = 0
    tokens_processed: int = 0
    calls: int = 0

    def reset(self):
        self.transfers_in = 0
        self.transfers_out = 0
        self.bytes_moved = 0
        self.peak_fast_resident_bytes = 0
        self.tokens_processed = 0
        self.calls = 0

    def counters(self) -> dict:
        return {
            "mode": self.mode,
            "transfers_in": self.transfers_in,
            "transfers_out": self.transfers_out,
            "bytes_moved": self.bytes_moved,
            "peak_fast_resident_bytes": self.peak_fast_resident_bytes,
            "tokens_processed": self.tokens_processed,
            "calls": self.calls,
        }


def forward_generate_tiered(
    model: MPlusModel, token_ids, views, policy: TierPolicy, collect=None
):
    """forward_generate with residency accounting under the given policy."""
    c = model.config
    n = len(token_ids)
    act_bytes = n * c.d * FLOAT_BYTES
    view_bytes_seen: list[int] = []

    def on_layer(layer: int, view_rows: int):
        vb = view_rows * c.d * FLOAT_BYTES
        view_bytes_seen.append(vb)
        if policy.mode == OFFLOAD:
            if policy.fast_budget_bytes is not None and vb + act_bytes > policy.fast_budget_bytes:
                raise BudgetError(
                    f"layer {layer} view needs {vb + act_bytes} bytes, "
                    f"budget is {policy.fast_budget_bytes}"
                )
            policy.transfers_in += 1
            policy.transfers_out += 1
            policy.bytes_moved += 2 * vb
            policy.peak_fast_resident_bytes = max(
                policy.peak_fast_resident_bytes, vb + act_bytes
            )
        policy.tokens_processed += view_rows + n

    logits = model.forward_generate(token_ids, views, collect=collect, on_layer=on_layer)
    if policy.mode == RESIDENT:
        total = sum(view_bytes_seen) + act_bytes
        if policy.fast_budget_bytes is not None and total > policy.fast_budget_bytes:
            raise BudgetError(
                f"resident views need {total} bytes, budget is {policy.fast_budget_bytes}"
            )
        policy.peak_fast_resident_bytes = max(policy.peak_fast_resident_bytes, total)
    policy.calls += 1
    return logits


def forward_generate_offloaded(model: MPlusModel, token_ids, views, policy: TierPolicy):
    """Offload-mode forward pass; logits are bit-identical to resident mode."""
    if policy.mode != OFFLOAD:
        raise ValueError("forward_generate_offloaded requires policy.mode == 'offload'")
    return forward_generate_tiered(model, token_ids, views, policy)


def latency_model(counters: dict, cost: CostParams) -> float:
    """Deterministic linear synthetic cost; used only for trend plots."""
    return (
        cost.per_token * counters.get("tokens_processed", 0)
        + cost.per_byte * counters.get("bytes_moved", 0)
        + cost.per_transfer
        * (counters.get("transfers_in", 0) + counters.get("transfers_out", 0))
    )


def overhead_sweep(
    config: ModelConfig, multipliers: list[int], cost: CostParams, chunk_len: int | None = None
) -> list[dict]:
    """Offload-vs-resident cost fractions across injected-context lengths.

    Pure config arithmetic: one generation call after m * L_base injected
    chunks. Transfer cost is fixed per generation call while compute grows
    with injections, so the overhead fraction shrinks as context grows.
    """
    chunk_len = chunk_len or config.W_gen
    rows = []
    view_rows = config.N + min(config.K0, config.M)
    gen_bytes_moved = 2 * config.L * view_rows * config.d * FLOAT_BYTES
    for m in multipliers:
        n_chunks = m
        inject_tokens = n_chunks * config.L * (config.K + chunk_len)
        gen_tokens = config.L * (view_rows + config.W_gen)
        resident = latency_model(
            {"tokens_processed": inject_tokens + gen_tokens, "bytes_moved": 0,
             "transfers_in": 0, "transfers_out": 0},
            cost,
        )
        offload = latency_model(
            {
                "tokens_processed": inject_tokens + gen_tokens,
                "bytes_moved": gen_bytes_moved,
                "transfers_in": config.L,
                "transfers_out": config.L,
            },
            cost,
        )
        frac = (offload - resident) / resident if resident > 0 else 0.0
        rows.append(
            {
                "multiplier": m,
                "resident_cost": resident,
                "offload_cost": offload,
                "overhead_fraction": frac,
            }
        )
    return rows
