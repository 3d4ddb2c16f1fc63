"""Latent context compilation at desk scale.

A token context is distilled into a handful of trainable buffer embeddings
with the help of a throwaway low-rank adapter; the buffer's per-layer K/V
cache is then shipped as a small ``.lcc`` file that any copy of the frozen
base model can attach and query.
"""

from .artifact import BufferArtifact, attach, deserialize, serialize
from .compiler import CompileConfig, compile_context
from .data import DEFAULT_VOCAB, Vocab, gen_context, probe_set
from .model import ModelConfig, ModelWeights, decode_greedy, forward

__version__ = "0.1.0"

__all__ = [
    "BufferArtifact", "CompileConfig", "DEFAULT_VOCAB", "ModelConfig", "ModelWeights", "Vocab", "attach",
    "compile_context", "decode_greedy", "deserialize", "forward", "gen_context", "probe_set", "serialize",
]
