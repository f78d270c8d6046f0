"""mnemo: desk-scale hierarchical latent-memory transformer.

Short-term memory pools updated by chunk compression and random dropping,
an age-tracked long-term archive with a co-trained retriever, dual
read/write low-rank adapters, tiered-residency accounting, and a
retention-benchmark harness — all on a seeded float64 numpy substrate.
"""

from .config import EvalConfig, ModelConfig, FULL_SCALE
from .curriculum import CurriculumConfig
from .memory import MemoryState, expected_compressed_count, inject_chunk
from .model import LayerMemoryView, MPlusModel
from .rng import Rng

__all__ = [
    "CurriculumConfig",
    "EvalConfig",
    "LayerMemoryView",
    "MPlusModel",
    "MemoryState",
    "ModelConfig",
    "FULL_SCALE",
    "Rng",
    "expected_compressed_count",
    "inject_chunk",
]

__version__ = "0.1.0"
