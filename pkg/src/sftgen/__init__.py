"""sftgen: retrieval-grounded SFT dataset construction and model-updating
preference data, driven by a small seed set of domain questions."""

from .core import (
    Instruction,
    InstructionPool,
    PreferenceTriple,
    Provenance,
    RetrievedContext,
    SeedQuery,
    SftRecord,
    canonicalize,
    content_hash,
)
from .gateway import ChatRequest, ChatResponse, Gateway, ProviderConfig, script_mock

__version__ = "0.1.0"

__all__ = [
    "ChatRequest",
    "ChatResponse",
    "Gateway",
    "Instruction",
    "InstructionPool",
    "PreferenceTriple",
    "Provenance",
    "ProviderConfig",
    "RetrievedContext",
    "SeedQuery",
    "SftRecord",
    "canonicalize",
    "content_hash",
    "script_mock",
    "__version__",
]
