"""Pipeline glue behind the ``lcc`` command line.

Every function here is usable from Python as well; the CLI only parses
arguments and maps exceptions to exit codes.  Reports are written as a JSON
document plus a tidy CSV (one metric per row), both carrying the config hash
and seed.  Wall-clock numbers go to a separate ``timings.csv`` so the reports
themselves stay byte-identical across reruns.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import artifact as A
from . import tensor as T
from .compiler import CompileConfig, CompileResult, DivergenceError, compile_context
from .data import (DEFAULT_VOCAB, Probe, SyntheticContext, Vocab, gen_agnostic_pool, gen_context, probe_set,
                   read_context, read_probes, write_context, write_probes)
from .lora import ALL_SEGMENTS, LoraAdapter, init_adapter, read_sidecar, write_sidecar
from .masks import Segment, append_mask, causal_mask
from .model import CheckpointError, KvCache, ModelWeights, decode_greedy, forward, load_checkpoint, save_checkpoint
from .pretrain import PretrainBudgetError, PretrainConfig, answer_matches, pretrain
from .tensor import RngState, Tensor

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_DIVERGENCE = 2
EXIT_PRETRAIN_BUDGET = 3
EXIT_FINGERPRINT = 4
EXIT_MISSING = 5

# evaluation contexts and drift queries come from their own seed ranges,
# disjoint from the pretraining corpus and its held-out probes
EVAL_CONTEXT_OFFSET = 1 << 42
DRIFT_SEED_OFFSET = 1 << 43


class MissingInputError(FileNotFoundError):
    def __init__(self, missing):
        self.missing = [str(m) for m in missing]
        super().__init__("missing inputs: " + ", ".join(self.missing))


class FingerprintError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class EvalSettings:
    n_drift_queries: int = 32
    drift_max_decode: int = 12
    tlm_like: bool = False
    tlm_steps: int = 60

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSettings":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown eval config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunConfig:
    """Sections of a ``--config`` file; every section is optional."""

    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    compile: CompileConfig = field(default_factory=CompileConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    n_facts: int = 6
    ctx_len: int = 64

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"pretrain", "compile", "eval", "n_facts", "ctx_len", "sweep"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(PretrainConfig.from_dict(d.get("pretrain", {})), CompileConfig.from_dict(d.get("compile", {})),
                   EvalSettings.from_dict(d.get("eval", {})), int(d.get("n_facts", 6)), int(d.get("ctx_len", 64)))

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise MissingInputError([path])
        return cls.from_dict(json.loads(path.read_text()))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return str(v).lower()
    return str(v)


def write_report(out_dir, stem: str, payload: dict, rows: list[dict], columns: list[str]) -> tuple[Path, Path]:
    """``stem.json`` (full payload) and ``stem.csv`` (tidy rows in ``columns`` order)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out_dir / f"{stem}.json", out_dir / f"{stem}.csv"
    jpath.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(cpath, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in columns])
    return jpath, cpath


def append_timing(out_dir, what: str, seconds: float) -> None:
    path = Path(out_dir) / "timings.csv"
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["what", "seconds"])
        w.writerow([what, f"{seconds:.3f}"])


# --------------------------------------------------------------------------
# model / artifact IO
# --------------------------------------------------------------------------


def load_model(path) -> ModelWeights:
    path = Path(path)
    if not path.exists():
        raise MissingInputError([path])
    try:
        return load_checkpoint(path)
    except CheckpointError as err:
        raise FingerprintError(f"{path}: {err}") from err


def load_artifact(path, weights: ModelWeights) -> A.BufferArtifact:
    path = Path(path)
    if not path.exists():
        raise MissingInputError([path])
    art = A.load(path)
    if art.model_fingerprint != weights.frozen_fingerprint:
        raise FingerprintError(f"{path} was compiled for model {art.model_fingerprint.hex()[:16]}, "
                               f"not {weights.frozen_fingerprint.hex()[:16]}")
    return art


def eval_context(seed: int, n_facts: int, ctx_len: int, vocab: Vocab = DEFAULT_VOCAB) -> SyntheticContext:
    ctx = gen_context(EVAL_CONTEXT_OFFSET + seed, n_facts, ctx_len, vocab)
    ctx.seed = seed  # files record the short seed; the offset is a fixed convention
    return ctx


def write_contexts(out_dir, seeds, n_facts: int, ctx_len: int, vocab: Vocab = DEFAULT_VOCAB) -> list[Path]:
    out_dir = Path(out_dir)
    (out_dir / "probes").mkdir(parents=True, exist_ok=True)
    paths = []
    for s in seeds:
        ctx = eval_context(s, n_facts, ctx_len, vocab)
        p = out_dir / f"ctx{s:04d}.txt"
        write_context(p, ctx)
        write_probes(out_dir / "probes" / f"ctx{s:04d}.txt", probe_set(ctx, vocab), seed=s)
        paths.append(p)
    return paths


# --------------------------------------------------------------------------
# pretrain / compile
# --------------------------------------------------------------------------


def run_pretrain(cfg: PretrainConfig, out_dir, vocab: Vocab = DEFAULT_VOCAB, log=None) -> tuple[ModelWeights, dict]:
    """Train, freeze and write ``base.lccm`` plus ``pretrain.json/csv``.

    On budget exhaustion the report is still written and the error re-raised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg.to_dict())
    t0 = time.perf_counter()
    try:
        weights, report = pretrain(cfg, vocab, log=log)
        ok = True
    except PretrainBudgetError as err:
        weights, report, ok = None, err.report, False
    report = {"config_hash": chash, "seed": cfg.seed, "reached_target": ok, **report}
    metrics = ["heldout_recall", "no_context_recall", "chance", "steps", "n_probes"]
    rows = [{"config_hash": chash, "seed": cfg.seed, "metric": m, "value": report[m]} for m in metrics]
    rows += [{"config_hash": chash, "seed": cfg.seed, "metric": f"recall@{h['step']}", "value": h["recall"]}
             for h in report["history"]]
    write_report(out_dir, "pretrain", report, rows, ["config_hash", "seed", "metric", "value"])
    append_timing(out_dir, "pretrain", time.perf_counter() - t0)
    if not ok:
        raise PretrainBudgetError(f"held-out recall {report['heldout_recall']:.3f} below "
                                  f"{cfg.recall_target} after {report['steps']} steps", report)
    save_checkpoint(out_dir / "base.lccm", weights)
    return weights, report


def run_compile(weights: ModelWeights, context: SyntheticContext, cfg: CompileConfig, out_dir, name: str,
                vocab: Vocab = DEFAULT_VOCAB, dtype: str = "f32") -> CompileResult:
    """Compile and write ``name.lcc``, ``name.train.json/csv`` and, for coupled runs, ``name.lcca``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = compile_context(weights, context, cfg, vocab, dtype=dtype)
    A.save(out_dir / f"{name}.lcc", result.artifact)
    result.report.write(out_dir / f"{name}.train.json", out_dir / f"{name}.train.csv")
    if result.adapter is not None:
        write_sidecar(out_dir / f"{name}.lcca", result.adapter)
    append_timing(out_dir, f"compile {name}", time.perf_counter() - t0)
    return result


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def probe_accuracy(weights: ModelWeights, probes: list[Probe], cache: KvCache | None = None,
                   adapter: LoraAdapter | None = None, vocab: Vocab = DEFAULT_VOCAB) -> float:
    hits = 0
    for p in probes:
        out = decode_greedy(weights, p.query, cache_in=cache, max_new=len(p.gold) + 1, stop_token=vocab.EOS,
                            adapter=adapter)
        hits += answer_matches(out, p.gold)
    return hits / max(len(probes), 1)


def context_cache(weights: ModelWeights, context: SyntheticContext) -> KvCache:
    _, cache = forward(weights, context.tokens, causal_mask(len(context.tokens)))
    return cache


@dataclass
class DriftReference:
    """Context-conditioned teacher answers to held-out agnostic queries."""

    queries: list[tuple[int, ...]]
    answers: list[tuple[int, ...]]
    probs: list[np.ndarray]


def drift_reference(weights: ModelWeights, context: SyntheticContext, settings: EvalSettings,
                    vocab: Vocab = DEFAULT_VOCAB, prefix: KvCache | None = None) -> DriftReference:
    prefix = prefix if prefix is not None else context_cache(weights, context)
    pool = gen_agnostic_pool(DRIFT_SEED_OFFSET + context.seed, settings.n_drift_queries, vocab)
    answers, probs = [], []
    for q in pool:
        y = tuple(decode_greedy(weights, q, cache_in=prefix, max_new=settings.drift_max_decode,
                                stop_token=vocab.EOS))
        answers.append(y)
        probs.append(T.softmax_array(_rows(weights, prefix, q, y, None)))
    return DriftReference(pool, answers, probs)


def _rows(weights, cache, q, y, adapter) -> np.ndarray:
    seq = np.asarray(q + y[:-1], dtype=np.int64)
    n_cached = len(cache) if cache is not None else 0
    seg = None
    if adapter is not None:
        seg = np.full(len(seq), int(Segment.RESPONSE))
        seg[:len(q)] = int(Segment.QUERY)
    logits, _ = forward(weights, seq, append_mask(n_cached, len(seq)), cache_in=cache, adapter=adapter, segments=seg)
    return logits.data[len(q) - 1:len(q) - 1 + len(y)]


def drift_kl(weights: ModelWeights, ref: DriftReference, cache: KvCache | None = None,
             adapter: LoraAdapter | None = None) -> float:
    """Mean KL(context-conditioned || condition) over the reference answer rows."""
    vals = [T.kl_divergence(p, Tensor(_rows(weights, cache, q, y, adapter))).item()
            for q, y, p in zip(ref.queries, ref.answers, ref.probs)]
    return float(np.mean(vals)) if vals else 0.0


def tlm_adapter(weights: ModelWeights, context: SyntheticContext, cfg: CompileConfig, steps: int,
                vocab: Vocab = DEFAULT_VOCAB) -> LoraAdapter:
    """Test-time-adaptation baseline: fit an always-on adapter to the raw context by next-token loss."""
    from .compiler import AdamW

    adapter = init_adapter(weights.config, cfg.rank, cfg.alpha, RngState(cfg.seed).spawn(7),
                           active_segments=ALL_SEGMENTS, projections=cfg.projections)
    opt = AdamW(adapter.parameters(), cfg.learning_rate)
    toks = np.asarray(context.tokens, dtype=np.int64)
    seg = np.full(len(toks) - 1, int(Segment.CONTEXT))
    for _ in range(steps):
        logits, _ = forward(weights, toks[:-1], causal_mask(len(toks) - 1), adapter=adapter, segments=seg)
        loss = T.cross_entropy(logits, toks[1:])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return adapter.detached()


def evaluate_context(weights: ModelWeights, context: SyntheticContext, probes: list[Probe],
                     artifact: A.BufferArtifact | None, settings: EvalSettings, sidecar: LoraAdapter | None = None,
                     compile_cfg: CompileConfig | None = None, vocab: Vocab = DEFAULT_VOCAB,
                     conditions=("FullContext", "NoContext", "Buffer")) -> list[dict]:
    """One row per condition: probe accuracy, drift KL and artifact size."""
    prefix = context_cache(weights, context)
    ref = drift_reference(weights, context, settings, vocab, prefix)
    rows = []

    def row(name, cache=None, adapter=None, size=0):
        rows.append({"condition": name, "accuracy": probe_accuracy(weights, probes, cache, adapter, vocab),
                     "kl": drift_kl(weights, ref, cache, adapter), "artifact_bytes": size})

    if "FullContext" in conditions:
        row("FullContext", prefix)
    if "NoContext" in conditions:
        row("NoContext")
    if artifact is not None and "Buffer" in conditions:
        size = A.expected_size(artifact.n_layers, artifact.n_heads, artifact.k_tokens, artifact.head_dim,
                               artifact.dtype)
        label = f"Buffer({artifact.ratio}x)"
        if sidecar is not None:
            row("Coupled", A.attach(weights, artifact), sidecar, size)
            label = f"Coupled-without-adapter({artifact.ratio}x)"
        row(label, A.attach(weights, artifact), None, size)
    if settings.tlm_like:
        cfg = compile_cfg or CompileConfig()
        row("TLM-like", None, tlm_adapter(weights, context, cfg, settings.tlm_steps, vocab))
    return rows


EVAL_COLUMNS = ["config_hash", "seed", "context", "condition", "metric", "value"]


def run_eval(weights: ModelWeights, contexts_dir, artifacts_dir, out_dir, probes_dir=None,
             settings: EvalSettings | None = None, seed: int = 0, vocab: Vocab = DEFAULT_VOCAB) -> dict:
    """Evaluate every ``*.txt`` context against its same-named ``.lcc`` artifact."""
    settings = settings or EvalSettings()
    contexts_dir, artifacts_dir = Path(contexts_dir), Path(artifacts_dir)
    if not contexts_dir.is_dir():
        raise MissingInputError([contexts_dir])
    ctx_paths = sorted(contexts_dir.glob("*.txt"))
    if not ctx_paths:
        raise MissingInputError([contexts_dir / "*.txt"])
    probes_dir = Path(probes_dir) if probes_dir is not None else contexts_dir / "probes"
    missing = [artifacts_dir / f"{p.stem}.lcc" for p in ctx_paths if not (artifacts_dir / f"{p.stem}.lcc").exists()]
    if missing:
        raise MissingInputError(missing)

    entries, digests = [], []
    for p in ctx_paths:
        ctx = read_context(p)
        pp = probes_dir / p.name
        probes = read_probes(pp) if pp.exists() else probe_set(ctx, vocab)
        art_path = artifacts_dir / f"{p.stem}.lcc"
        art = load_artifact(art_path, weights)
        digests.append(hashlib.sha256(art_path.read_bytes()).hexdigest())
        side = artifacts_dir / f"{p.stem}.lcca"
        sidecar = read_sidecar(side) if side.exists() else None
        for r in evaluate_context(weights, ctx, probes, art, settings, sidecar, vocab=vocab):
            entries.append({"context": p.stem, **r})

    chash = config_hash({"eval": asdict(settings), "model": weights.frozen_fingerprint.hex(), "artifacts": digests})
    summary = {}
    for e in entries:
        summary.setdefault(e["condition"], []).append(e["accuracy"])
    payload = {"config_hash": chash, "seed": seed, "rows": entries,
               "mean_accuracy": {k: float(np.mean(v)) for k, v in sorted(summary.items())}}
    tidy = [{"config_hash": chash, "seed": seed, "context": e["context"], "condition": e["condition"],
             "metric": m, "value": e[m]} for e in entries for m in ("accuracy", "kl", "artifact_bytes")]
    write_report(out_dir, "eval", payload, tidy, EVAL_COLUMNS)
    return payload


# --------------------------------------------------------------------------
# ablation sweeps
# --------------------------------------------------------------------------

SWEEP_AXES = {"ratio": "ratio", "n_agnostic": "n_agnostic", "n_recon": "n_recon", "loss_kind": "loss_kind",
              "loss": "loss_kind", "coupled": "coupled"}


@dataclass
class SweepSpec:
    axis: str
    values: list
    seeds: list[int]
    n_facts: int = 6
    ctx_len: int = 64
    compile: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}; choose from {sorted(set(SWEEP_AXES))}")
        if not self.values or not self.seeds:
            raise ValueError("a sweep needs at least one value and one seed")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        d = dict(d.get("sweep", d))
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown sweep keys: {sorted(unknown)}")
        return cls(**d)

    def cells(self) -> list[tuple[int, object, int]]:
        return [(i, v, s) for i, (v, s) in enumerate((v, s) for v in self.values for s in self.seeds)]

    def cell_config(self, value, seed: int) -> CompileConfig:
        base = {**self.compile, "seed": seed}
        base[SWEEP_AXES[self.axis]] = value
        return CompileConfig.from_dict(base)

    def to_dict(self) -> dict:
        return asdict(self)


SWEEP_COLUMNS = ["config_hash", "seed", "axis", "value", "metric", "metric_value"]


def _run_cell(args) -> dict:
    """One sweep cell; top-level so worker processes can pickle it."""
    model_bytes, spec_dict, value, seed = args
    from .model import checkpoint_from_bytes

    spec = SweepSpec.from_dict(spec_dict)
    weights = checkpoint_from_bytes(model_bytes)
    out = {"value": value, "seed": seed}
    try:
        cfg = spec.cell_config(value, seed)
        ctx = eval_context(seed, spec.n_facts, spec.ctx_len)
        t0 = time.perf_counter()
        res = compile_context(weights, ctx, cfg)
        out["seconds"] = time.perf_counter() - t0
        settings = EvalSettings.from_dict(spec.eval)
        rows = evaluate_context(weights, ctx, probe_set(ctx), res.artifact, settings, res.adapter, cfg)
        for r in rows:
            name = r["condition"].split("(")[0]
            out[f"{name}.accuracy"] = r["accuracy"]
            out[f"{name}.kl"] = r["kl"]
        out["artifact_bytes"] = len(A.serialize(res.artifact))
        out["k_tokens"] = res.artifact.k_tokens
        out["final_loss"] = res.report.epochs[-1].total_loss
    except Exception as err:  # recorded in-row; the sweep goes on
        out["error"] = f"{type(err).__name__}: {err}"
    return out


def run_sweep(weights: ModelWeights, spec: SweepSpec, out_dir, jobs: int = 1, log=None) -> list[dict]:
    """Run every (value, seed) cell and write ``sweep.json`` / ``sweep.csv``, ordered by cell index."""
    from .model import checkpoint_bytes

    blob = checkpoint_bytes(weights)
    tasks = [(blob, spec.to_dict(), v, s) for _, v, s in spec.cells()]
    t0 = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = []
        for t in tasks:
            results.append(_run_cell(t))
            if log is not None:
                log(f"cell {spec.axis}={t[2]} seed={t[3]} done")
    chash = config_hash({"sweep": spec.to_dict(), "model": weights.frozen_fingerprint.hex()})
    seconds = [r.pop("seconds", None) for r in results]
    rows = []
    for r in results:
        for k in sorted(r):
            if k in ("value", "seed"):
                continue
            rows.append({"config_hash": chash, "seed": r["seed"], "axis": spec.axis, "value": r["value"],
                         "metric": k, "metric_value": r[k]})
    payload = {"config_hash": chash, "seeds": spec.seeds, "spec": spec.to_dict(), "cells": results}
    write_report(out_dir, "sweep", payload, rows, SWEEP_COLUMNS)
    for (_, v, s), sec in zip(spec.cells(), seconds):
        if sec is not None:
            append_timing(out_dir, f"cell {spec.axis}={v} seed={s}", sec)
    append_timing(out_dir, "sweep", time.perf_counter() - t0)
    return results


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------


def _mask_rule(layout, i: int, j: int) -> bool:
    """Visibility rule written out case by case."""
    seg = layout.segments()
    si, sj = Segment(int(seg[i])), Segment(int(seg[j]))
    if si == Segment.CONTEXT:
        return sj == Segment.CONTEXT and j <= i
    if si == Segment.BUFFER:
        return sj == Segment.CONTEXT or (sj == Segment.BUFFER and j <= i)
    # query and response
    return sj == Segment.BUFFER or (sj in (Segment.QUERY, Segment.RESPONSE) and j <= i)


def kernel_cases(seed: int = 0) -> list[tuple[str, object, np.ndarray]]:
    """``(name, fn, x)`` for every differentiable kernel; binary ops appear once per operand."""
    rng = np.random.default_rng(seed)
    r = lambda *shape: rng.normal(size=shape)  # noqa: E731
    a34, w54, m42, b243, a24, g4 = r(3, 4), r(5, 4), r(4, 2), r(2, 4, 3), r(2, 4), np.linspace(0.5, 1.5, 4)
    cos, sin = T.rope_tables(np.arange(3), 4, 100.0)
    allow = np.tril(np.ones((3, 4), dtype=bool), k=1)
    p = T.softmax_array(r(3, 4))
    return [
        ("add.a", lambda t: T.add(t, Tensor(a34)), r(3, 4)),
        ("add.b-broadcast", lambda t: T.add(Tensor(a34), t), r(1, 4)),
        ("sub.a", lambda t: T.sub(t, Tensor(a34)), r(3, 4)),
        ("sub.b", lambda t: T.sub(Tensor(a34), t), r(3, 4)),
        ("mul.a", lambda t: T.mul(t, Tensor(a34)), r(3, 4)),
        ("mul.b-broadcast", lambda t: T.mul(Tensor(a34), t), r(4)),
        ("scale", lambda t: T.scale(t, -1.7), r(3, 4)),
        ("mean_all", lambda t: T.mul(T.mean_all(t), Tensor(np.ones(2))), r(3, 4)),
        ("reshape", lambda t: T.reshape(t, (2, 6)), r(3, 4)),
        ("transpose", lambda t: T.transpose(t, (2, 0, 1)), r(2, 3, 4)),
        ("broadcast_to", lambda t: T.broadcast_to(t, (3, 4)), r(1, 4)),
        ("concat", lambda t: T.concat([t, Tensor(a34), t], axis=0), r(3, 4)),
        ("take.slice", lambda t: T.take(t, slice(1, 3), axis=1), r(3, 4)),
        ("take.repeat-index", lambda t: T.take(t, np.array([0, 2, 0]), axis=0), r(3, 4)),
        ("matmul.a", lambda t: T.matmul(t, Tensor(m42)), r(3, 4)),
        ("matmul.b", lambda t: T.matmul(Tensor(a34), t), r(4, 2)),
        ("matmul.batched", lambda t: T.matmul(t, Tensor(b243)), r(2, 3, 4)),
        ("linear.x", lambda t: T.linear(t, Tensor(w54)), r(2, 4)),
        ("linear.w", lambda t: T.linear(Tensor(a34), t), r(5, 4)),
        ("silu", T.silu, r(3, 4)),
        ("rms_norm.x", lambda t: T.rms_norm(t, Tensor(g4)), r(3, 4)),
        ("rms_norm.gain", lambda t: T.rms_norm(Tensor(a34), t), r(4)),
        ("embedding", lambda t: T.embedding(t, np.array([[1, 4, 1], [0, 2, 2]])), r(5, 3)),
        ("rope", lambda t: T.rope(t, cos, sin), r(2, 3, 4)),
        ("softmax", T.softmax, r(3, 4)),
        ("softmax.masked", lambda t: T.softmax(t, allow), r(3, 4)),
        ("log_softmax", T.log_softmax, r(3, 4)),
        ("kl_divergence", lambda t: T.kl_divergence(p, t), r(3, 4)),
        ("cross_entropy", lambda t: T.cross_entropy(t, np.array([1, 0, 3])), r(3, 4)),
        ("mse.a", lambda t: T.mse(t, Tensor(a34)), r(3, 4)),
        ("mse.b", lambda t: T.mse(Tensor(a34), t), r(3, 4)),
        ("place_rows.base", lambda t: T.place_rows(t, Tensor(a24), [0, 2]), r(3, 4)),
        ("place_rows.rows", lambda t: T.place_rows(Tensor(a34), t, [2, 0]), r(2, 4)),
    ]


def kernel_gradient_errors(seed: int = 0) -> dict[str, float]:
    """Max relative finite-difference error per kernel, through a random linear read-out."""
    rng = np.random.default_rng(seed + 1)
    errs = {}
    for name, fn, x in kernel_cases(seed):
        x = Tensor(x)
        wt = rng.normal(size=fn(x).shape)
        errs[name] = T.grad_check(lambda t: T.sum_all(T.mul(fn(t), wt)), x)
    return errs


def _check_gradients() -> None:
    bad = {k: v for k, v in kernel_gradient_errors().items() if not v <= 1e-4}
    if bad:
        raise AssertionError("relative gradient error above 1e-4: " +
                             ", ".join(f"{k} {v:.2e}" for k, v in bad.items()))


def _check_masks() -> None:
    from . import masks

    for n_ctx in range(4):
        for k in range(1, 4):
            for nq in range(3):
                for nr in range(3):
                    layout = masks.SegmentLayout(n_ctx, k, nq, nr)
                    got = masks.build_segment_mask(layout)
                    n = layout.total
                    want = np.array([[_mask_rule(layout, i, j) for j in range(n)] for i in range(n)], dtype=bool)
                    if got.shape != want.shape or not np.array_equal(got, want):
                        raise AssertionError(f"mask differs from the rule oracle at {layout}")


def _small_model():
    from .model import ModelConfig

    cfg = ModelConfig(vocab_size=DEFAULT_VOCAB.size, d_model=32, n_layers=2, n_heads=2, head_dim=16, d_ff=64,
                      max_position=128)
    w = ModelWeights.init(cfg, RngState(11))
    w.freeze()
    return w


def _check_identity() -> None:
    from .compiler import loss, student_logits, teacher_logits

    w = _small_model()
    ctx = gen_context(1, 3, 16)
    adapter = init_adapter(w.config, rng=RngState(2))
    t = teacher_logits(w, ctx.tokens, DEFAULT_VOCAB.trigger, tuple(ctx.tokens))
    s = student_logits(w, adapter, Tensor(np.zeros((1, w.config.d_model))), ctx.tokens, DEFAULT_VOCAB.trigger,
                       tuple(ctx.tokens), relaxed=True)
    kl = loss(None, t, s).item()
    if kl > 1e-10:
        raise AssertionError(f"KL at init {kl:.3e}")


def _check_portability() -> None:
    w = _small_model()
    ctx = gen_context(2, 2, 16)
    res = compile_context(w, ctx, CompileConfig(ratio=8, n_recon=4, n_agnostic=4, epochs=1, max_decode=4))
    for dtype in ("f32", "f64"):
        art = A.artifact_from_cache(A.attach(w, res.artifact), w, dtype=dtype)
        back = A.deserialize(A.serialize(art))
        q = (DEFAULT_VOCAB.ASK, ctx.facts[0][0][0])
        if decode_greedy(w, q, cache_in=A.attach(w, back), max_new=4) != \
                decode_greedy(w, q, cache_in=A.attach(w, art), max_new=4):
            raise AssertionError(f"decode differs after a {dtype} roundtrip")


def _check_fingerprint() -> None:
    from .model import checkpoint_bytes, checkpoint_from_bytes

    w = _small_model()
    fp = w.frozen_fingerprint
    compile_context(w, gen_context(3, 2, 16), CompileConfig(ratio=8, n_recon=4, n_agnostic=4, epochs=1,
                                                            max_decode=4))
    w.verify_frozen()
    if w.frozen_fingerprint != fp or checkpoint_from_bytes(checkpoint_bytes(w)).frozen_fingerprint != fp:
        raise AssertionError("base weights changed")


VERIFY_CHECKS = {
    "gradcheck": _check_gradients,
    "mask-oracle": _check_masks,
    "identity-at-init": _check_identity,
    "portability": _check_portability,
    "frozen-fingerprint": _check_fingerprint,
}


def run_verify(log=print) -> list[str]:
    """Run the invariant suite; returns the names of failing checks."""
    failed = []
    for name, check in VERIFY_CHECKS.items():
        try:
            check()
            log(f"PASS {name}")
        except Exception as err:
            failed.append(name)
            log(f"FAIL {name}: {err}")
    return failed
