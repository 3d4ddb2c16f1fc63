"""``lcc`` command line.

    lcc pretrain  [--config C] [--seed S] --out DIR
    lcc contexts  [--config C] [--seed S] [--n N] --out DIR
    lcc compile   MODEL CONTEXT [--config C] [--seed S] [--ratio R] [--loss kl|mse] [--coupled] --out DIR
    lcc query     MODEL ARTIFACT TOKEN... [--sidecar F]
    lcc eval      MODEL CONTEXTS ARTIFACTS [--probes DIR] [--config C] [--seed S] --out DIR
    lcc ablate    MODEL --config SWEEP [--jobs J] --out DIR
    lcc verify

Exit codes: 0 ok, 1 failed checks, 2 divergence, 3 pretrain budget,
4 fingerprint, 5 missing inputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import harness as H
from .artifact import ArtifactError, IncompatibleModelError, attach
from .compiler import DivergenceError
from .data import DEFAULT_VOCAB, read_context
from .lora import SidecarError, read_sidecar
from .model import decode_greedy
from .pretrain import PretrainBudgetError


def _common(p: argparse.ArgumentParser, *flags: str) -> None:
    if "config" in flags:
        p.add_argument("--config", help="JSON config file")
    if "seed" in flags:
        p.add_argument("--seed", type=int, help="seed (u64); overrides the config")
    if "out" in flags:
        p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lcc", description="Compile token contexts into portable buffer-token caches.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train and freeze the tiny base model")
    _common(p, "config", "seed", "out")

    p = sub.add_parser("contexts", help="write synthetic evaluation contexts and their probes")
    _common(p, "config", "seed", "out")
    p.add_argument("--n", type=int, default=3, help="number of contexts (seeds S..S+n-1)")

    p = sub.add_parser("compile", help="compile one context file into a .lcc artifact")
    p.add_argument("model")
    p.add_argument("context")
    _common(p, "config", "seed", "out")
    p.add_argument("--ratio", type=int)
    p.add_argument("--loss", choices=["kl", "mse"])
    p.add_argument("--coupled", action="store_true")

    p = sub.add_parser("query", help="answer a query from an artifact alone")
    p.add_argument("model")
    p.add_argument("artifact")
    p.add_argument("tokens", nargs="+", help="token ids or names, e.g. '? k03' or 3 13")
    p.add_argument("--sidecar", help="adapter sidecar for coupled artifacts")
    p.add_argument("--max-new", type=int, default=32)

    p = sub.add_parser("eval", help="score artifacts against full-context and no-context bounds")
    p.add_argument("model")
    p.add_argument("contexts")
    p.add_argument("artifacts")
    p.add_argument("--probes")
    _common(p, "config", "seed", "out")

    p = sub.add_parser("ablate", help="run a sweep over one axis")
    p.add_argument("model")
    _common(p, "config", "out")
    p.add_argument("--jobs", type=int, default=1)

    sub.add_parser("verify", help="run the invariant suite")
    return ap


def parse_tokens(items, vocab=DEFAULT_VOCAB) -> list[int]:
    names = {vocab.name(i): i for i in range(vocab.size)}
    out = []
    for item in items:
        for part in item.split():
            if part.lstrip("-").isdigit():
                out.append(int(part))
            elif part in names:
                out.append(names[part])
            else:
                raise ValueError(f"unknown token {part!r}")
    return out


def _cmd_pretrain(args) -> int:
    cfg = H.RunConfig.load(args.config).pretrain
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    try:
        _, report = H.run_pretrain(cfg, args.out, log=lambda m: print(m, file=sys.stderr))
    except PretrainBudgetError as err:
        print(f"pretrain budget exhausted: {err}", file=sys.stderr)
        print(json.dumps({k: err.report[k] for k in ("steps", "heldout_recall", "no_context_recall")}),
              file=sys.stderr)
        return H.EXIT_PRETRAIN_BUDGET
    print(f"{Path(args.out) / 'base.lccm'} recall={report['heldout_recall']:.3f} "
          f"no_context={report['no_context_recall']:.3f} fingerprint={report['fingerprint'][:16]}")
    return H.EXIT_OK


def _cmd_contexts(args) -> int:
    run = H.RunConfig.load(args.config)
    seed = args.seed if args.seed is not None else 0
    for p in H.write_contexts(args.out, range(seed, seed + args.n), run.n_facts, run.ctx_len):
        print(p)
    return H.EXIT_OK


def _cmd_compile(args) -> int:
    run = H.RunConfig.load(args.config)
    cfg = run.compile
    overrides = {k: v for k, v in (("seed", args.seed), ("ratio", args.ratio), ("loss_kind", args.loss)) if v is not None}
    if args.coupled:
        overrides["coupled"] = True
    cfg = replace(cfg, **overrides)
    weights = H.load_model(args.model)
    if not Path(args.context).exists():
        raise H.MissingInputError([args.context])
    ctx = read_context(args.context)
    res = H.run_compile(weights, ctx, cfg, args.out, Path(args.context).stem)
    print(f"{Path(args.out) / (Path(args.context).stem + '.lcc')} k_tokens={res.artifact.k_tokens} "
          f"steps={res.report.n_steps} final_loss={res.report.epochs[-1].total_loss:.6f}")
    return H.EXIT_OK


def _cmd_query(args) -> int:
    weights = H.load_model(args.model)
    art = H.load_artifact(args.artifact, weights)
    adapter = None
    if args.sidecar:
        if not Path(args.sidecar).exists():
            raise H.MissingInputError([args.sidecar])
        adapter = read_sidecar(args.sidecar)
    tokens = parse_tokens(args.tokens)
    out = decode_greedy(weights, tokens, cache_in=attach(weights, art), max_new=args.max_new,
                        stop_token=DEFAULT_VOCAB.EOS, adapter=adapter)
    print(" ".join(str(t) for t in out))
    print(DEFAULT_VOCAB.detokenize(out))
    return H.EXIT_OK


def _cmd_eval(args) -> int:
    weights = H.load_model(args.model)
    run = H.RunConfig.load(args.config)
    payload = H.run_eval(weights, args.contexts, args.artifacts, args.out, args.probes, run.eval,
                         seed=args.seed or 0)
    for cond, acc in payload["mean_accuracy"].items():
        print(f"{cond:32s} {acc:.3f}")
    return H.EXIT_OK


def _cmd_ablate(args) -> int:
    weights = H.load_model(args.model)
    if not args.config or not Path(args.config).exists():
        raise H.MissingInputError([args.config or "--config"])
    spec = H.SweepSpec.from_dict(json.loads(Path(args.config).read_text()))
    results = H.run_sweep(weights, spec, args.out, jobs=args.jobs, log=lambda m: print(m, file=sys.stderr))
    failed = [r for r in results if "error" in r]
    print(f"{len(results)} cells, {len(failed)} failed -> {Path(args.out) / 'sweep.csv'}")
    return H.EXIT_OK


def _cmd_verify(args) -> int:
    failed = H.run_verify()
    if failed:
        print("failed: " + ", ".join(failed))
        return H.EXIT_FAILED
    return H.EXIT_OK


COMMANDS = {"pretrain": _cmd_pretrain, "contexts": _cmd_contexts, "compile": _cmd_compile, "query": _cmd_query,
            "eval": _cmd_eval, "ablate": _cmd_ablate, "verify": _cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except H.MissingInputError as err:
        print(f"error: {err}", file=sys.stderr)
        return H.EXIT_MISSING
    except DivergenceError as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return H.EXIT_DIVERGENCE
    except (H.FingerprintError, IncompatibleModelError) as err:
        print(f"error: fingerprint: {err}", file=sys.stderr)
        return H.EXIT_FINGERPRINT
    except (ArtifactError, SidecarError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return H.EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
