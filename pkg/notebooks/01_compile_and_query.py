"""Walkthrough: pretrain a tiny base, compile one context, query the artifact alone.

Run from the repository root:

    python3 notebooks/01_compile_and_query.py [work_dir]

Pretraining takes about three minutes on one CPU core; a checkpoint already
present in ``work_dir`` is reused.
"""

import sys
from pathlib import Path

from lcc import harness as H
from lcc.artifact import attach, load
from lcc.compiler import CompileConfig
from lcc.data import DEFAULT_VOCAB as V, probe_set
from lcc.model import decode_greedy
from lcc.pretrain import PretrainConfig

work = Path(sys.argv[1] if len(sys.argv) > 1 else "notebook_run")
ckpt = work / "model" / "base.lccm"

# 1. A frozen base that can answer "? key" from a context of "key value ;" clauses.
if ckpt.exists():
    weights = H.load_model(ckpt)
else:
    weights, report = H.run_pretrain(PretrainConfig(), work / "model", log=print)
    print(f"held-out recall {report['heldout_recall']:.3f}, without context {report['no_context_recall']:.3f}")

# 2. One evaluation context. Facts are scattered between filler tokens.
ctx = H.eval_context(0, n_facts=6, ctx_len=64)
print("context:", V.detokenize(ctx.tokens))

# 3. Compile it into K = 64 / 16 = 4 buffer tokens. Only the K/V cache of those
#    four positions is written; the adapter used during compilation is discarded.
result = H.run_compile(weights, ctx, CompileConfig(seed=0), work / "arts", "ctx0000")
print(f"artifact: {result.artifact.k_tokens} buffer tokens, "
      f"final loss {result.report.epochs[-1].total_loss:.4f}")

# 4. Query from the artifact file alone: the raw context is no longer needed.
art = load(work / "arts" / "ctx0000.lcc")
for probe in probe_set(ctx):
    with_buffer = decode_greedy(weights, probe.query, cache_in=attach(weights, art), max_new=2, stop_token=V.EOS)
    without = decode_greedy(weights, probe.query, max_new=2, stop_token=V.EOS)
    print(f"{V.detokenize(probe.query):10s} gold {V.detokenize(probe.gold):4s} "
          f"buffer -> {V.detokenize(with_buffer):12s} no context -> {V.detokenize(without)}")
