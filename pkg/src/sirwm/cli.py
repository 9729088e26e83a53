"""Command-line entry point: train, generate, detect, attack, spoof, eval."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import numpy as np

from . import __version__
from .analysis import delta_sweep, sir_majority_colors, spoof_attack, spoof_kgw, sweep_csv
from .attacks import random_edit, synonym_attack
from .core import InvalidArgument, TRANSFORM_KINDS
from .desk import DeskConfig, DeskWorld, reference_train_config
from .detect import calibrate_threshold, result_from_scores, sir_token_scores
from .embed import CorpusFormatError, load_corpus
from .generate import GenerationTrace, KgwConfig, KgwWatermark, generate
from .net import LossConfig
from .toylm import Decode
from .train import CheckpointError, TrainConfig, atomic_write_bytes, load, save, train

log = logging.getLogger("sirwm")

SCHEMA_VERSION = 1


class UsageError(Exception):
    """Bad configuration or input; exit code 2."""


# --------------------------------------------------------------------------
# plumbing
# --------------------------------------------------------------------------


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str).encode()).hexdigest()[:16]


def _effective(args, skip=("func", "config", "force", "verbose", "out", "log")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _check_out(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _write_text(path: str, text: str, force: bool) -> None:
    _check_out(path, force)
    atomic_write_bytes(path, text.encode())


def _write_json(path: str, obj: dict, force: bool) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n", force)


def _world(args) -> DeskWorld:
    return DeskWorld(DeskConfig(**args.desk) if args.desk else DeskConfig())


def _load_ckpt(path):
    if not path:
        raise UsageError("--ckpt is required")
    if not os.path.exists(path):
        raise UsageError(f"checkpoint {path} not found")
    return load(path)


def _read_traces(path) -> list[GenerationTrace]:
    if not os.path.exists(path):
        raise UsageError(f"input {path} not found")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if "tokens" in rec and "schema_version" not in rec:
                    rec = {"schema_version": 1, "wm": "unknown", "prompt": rec.get("prompt", []), "tokens": rec["tokens"], "scores": [], "versions": []}
                out.append(GenerationTrace.from_json(rec))
            except (ValueError, KeyError, TypeError) as exc:
                raise UsageError(f"{path}:{lineno}: bad record ({exc})") from exc
    if not out:
        raise UsageError(f"{path}: no records")
    return out


def _write_traces(path, traces, chash, force) -> None:
    lines = []
    for tr in traces:
        rec = tr.to_json()
        rec["config_hash"] = chash
        rec["tool_version"] = __version__
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    _write_text(path, "\n".join(lines) + "\n", force)


def _sidecar(path, obj) -> None:
    # timings live here only, so the primary outputs stay byte-identical
    atomic_write_bytes(path + ".log.json", (json.dumps(obj, sort_keys=True) + "\n").encode())


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    world = _world(args)
    overrides = {k: getattr(args, k) for k in ("epochs", "batch_size", "lr", "seed") if getattr(args, k) is not None}
    tcfg = reference_train_config(world.cfg, gamma=args.gamma, **overrides)
    if args.corpus:
        if not os.path.exists(args.corpus):
            raise UsageError(f"corpus {args.corpus} not found")
        recs = load_corpus(args.corpus)
        if not recs:
            raise UsageError(f"corpus {args.corpus} is empty")
        E = np.stack([r.embedding.values for r in recs]).astype(np.float64)
    else:
        E = world.embed_texts(world.corpus_texts(args.n_texts)[0])
    _check_out(args.out, args.force)
    t0 = time.perf_counter()
    gates = {}
    if args.gates < 0:
        raise UsageError("--gates must be >= 0")
    if args.gates:
        res, reports = world.release(tcfg, max_attempts=args.gates, embeddings=E)
        gates = {"released": reports[-1].passed, "seed": tcfg.seed + len(reports) - 1, "gates": reports[-1].checks}
        if not reports[-1].passed:
            print(f"warning: release gates failed after {len(reports)} attempt(s): {reports[-1].checks}", file=sys.stderr)
    else:
        res = train(tcfg, E)
    save(res.checkpoint, args.out)
    chash = config_hash(_effective(args))
    if args.log:
        lines = [json.dumps({**r, "config_hash": chash, "schema_version": SCHEMA_VERSION}) for r in res.log]
        _write_text(args.log, "\n".join(lines) + "\n", args.force)
    _sidecar(args.out, {"seconds": time.perf_counter() - t0, "tool_version": __version__, "config_hash": chash})
    last = res.log[-1]
    print(json.dumps(last | gates | {"checkpoint_sha256": res.checkpoint.digest(), "config_hash": chash}))
    return 0


def _wm_source(args, world):
    if args.wm == "sir":
        return world.watermark(_load_ckpt(args.ckpt))
    if args.wm == "kgw":
        return KgwWatermark(KgwConfig(k=args.kgw_k), world.cfg.vocab_size)
    return None


def cmd_generate(args) -> int:
    world = _world(args)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.wm == "none" and args.delta is not None:
        print("warning: --wm none ignores --delta", file=sys.stderr)
    delta = 0.0 if args.wm == "none" else (1.0 if args.delta is None else args.delta)
    wm = _wm_source(args, world)
    _check_out(args.out, args.force)
    traces, t0 = [], time.perf_counter()
    for i in range(args.n):
        gcfg = world.gen_config(
            delta=delta,
            max_new_tokens=args.max_new_tokens,
            recompute_interval=args.interval,
            transform=args.transform,
            decode=Decode(args.decode, args.seed + i, args.width),
        )
        traces.append(generate(world.lm, wm, gcfg, world.prompt(args.seed + i), topic=world.topic_of(args.seed + i), parallel=args.parallel))
    chash = config_hash(_effective(args))
    _write_traces(args.out, traces, chash, args.force)
    _sidecar(args.out, {"seconds": time.perf_counter() - t0, "per_text": [t.timing for t in traces]})
    print(json.dumps({"written": len(traces), "config_hash": chash}))
    return 0


def _score(args, world, ckpt, tokens, prompt_len):
    if args.wm == "kgw":
        from .detect import kgw_token_scores

        return kgw_token_scores(KgwConfig(k=args.kgw_k), tokens, world.cfg.vocab_size, prompt_len)
    return sir_token_scores(ckpt.params, world.semantics, world.dmap, tokens, prompt_len, args.transform)


def _threshold(args, world, ckpt):
    if args.threshold is not None:
        return args.threshold
    null = []
    for i in range(args.calibration):
        prompt, body = world.human_text(100_000 + i)
        null.append(float(np.mean(_score(args, world, ckpt, prompt + body, len(prompt)))))
    return calibrate_threshold(null, args.fpr).cut


def cmd_detect(args) -> int:
    if args.wm == "none":
        raise UsageError("detect needs --wm sir or --wm kgw")
    world = _world(args)
    traces = _read_traces(args.inp)
    ckpt = _load_ckpt(args.ckpt) if args.wm == "sir" else None
    cut = _threshold(args, world, ckpt)
    chash = config_hash(_effective(args))
    results = []
    for i, tr in enumerate(traces):
        res = result_from_scores(_score(args, world, ckpt, tr.full, len(tr.prompt)), threshold=cut)
        results.append(res.report(text_id=str(i), config_hash=chash))
    report = {"schema_version": SCHEMA_VERSION, "tool_version": __version__, "config_hash": chash, "threshold": cut, "fpr": args.fpr, "results": results}
    if args.out:
        _write_json(args.out, report, args.force)
    print(json.dumps({"n": len(results), "positive": sum(bool(r["verdict"]) for r in results), "threshold": cut}))
    return 0


def cmd_attack(args) -> int:
    world = _world(args)
    if args.wm == "none":
        raise UsageError("attack needs --wm sir or --wm kgw")
    traces = _read_traces(args.inp)
    ckpt = _load_ckpt(args.ckpt) if args.wm == "sir" else None
    chash = config_hash(_effective(args))
    rows, attacked = [], []
    for i, tr in enumerate(traces):
        p = len(tr.prompt)
        if args.kind == "synonym":
            res = synonym_attack(tr.full, world.lexicon, args.ratio, args.seed + i, start=p)
        else:
            res = random_edit(tr.full, "substitute" if args.kind == "random_sub" else "delete", args.ratio, args.seed + i, world.cfg.vocab_size, start=p)
        new = list(res.tokens.tokens)
        before = float(np.mean(_score(args, world, ckpt, tr.full, p)))
        after = float(np.mean(_score(args, world, ckpt, new, p)))
        rows.append({"text_id": str(i), "z_mean_before": before, "z_mean_after": after, "n_modified": len(res.modified)})
        attacked.append(GenerationTrace(tr.prompt, new[p:], [], [], tr.wm, tr.topic, tr.seeds, tr.config))
    report = {"schema_version": SCHEMA_VERSION, "tool_version": __version__, "config_hash": chash, "kind": args.kind, "ratio": args.ratio, "results": rows}
    _write_json(args.out, report, args.force)
    if args.traces_out:
        _write_traces(args.traces_out, attacked, chash, args.force)
    print(json.dumps({"n": len(rows), "mean_delta": float(np.mean([r["z_mean_after"] - r["z_mean_before"] for r in rows]))}))
    return 0


def cmd_spoof(args) -> int:
    world = _world(args)
    n = args.n_texts
    natural, nat_groups, wm_texts, wm_groups = [], [], [], []
    for i in range(n):
        natural.append(world.human_text(200_000 + i, args.max_new_tokens)[1])
        nat_groups.append(world.topic_of(200_000 + i))
    if args.wm == "sir":
        ckpt = _load_ckpt(args.ckpt)
        src = world.watermark(ckpt)
    else:
        src = KgwWatermark(KgwConfig(k=args.kgw_k), world.cfg.vocab_size)
    for i in range(n):
        j = 300_000 + i
        gcfg = world.gen_config(seed=j, max_new_tokens=args.max_new_tokens, delta=args.delta)
        wm_texts.append(generate(world.lm, src, gcfg, world.prompt(j), topic=world.topic_of(j)).tokens)
        wm_groups.append(world.topic_of(j))
    if args.wm == "sir":
        colors = sir_majority_colors(ckpt.params, world.semantics, world.dmap, wm_texts, wm_groups)
        rep = spoof_attack(wm_texts, natural, lambda g, t: bool(colors[g][t]), None, wm_groups, nat_groups)
    else:
        rep = spoof_kgw(KgwConfig(k=args.kgw_k), wm_texts, natural, world.cfg.vocab_size)
    chash = config_hash(_effective(args))
    out = rep.to_json() | {"tool_version": __version__, "config_hash": chash}
    _write_json(args.out, out, args.force)
    print(json.dumps(rep.accuracy))
    return 0


def cmd_eval(args) -> int:
    world = _world(args)
    ckpt = _load_ckpt(args.ckpt)
    for k in args.kinds:
        if k not in TRANSFORM_KINDS or k == "raw":
            raise UsageError(f"unknown transform kind {k!r}")
    prompts = [world.prompt(400_000 + i) for i in range(args.n_texts)]
    human = [world.human_text(500_000 + i, args.max_new_tokens)[1] for i in range(args.n_texts)]
    base = world.gen_config(max_new_tokens=args.max_new_tokens)
    rows = delta_sweep(world.lm, world.watermark(ckpt), base, prompts, human, args.deltas, args.kinds, seed=args.seed)
    chash = config_hash(_effective(args))
    text = f"# schema_version={SCHEMA_VERSION} tool_version={__version__} config_hash={chash}\n" + sweep_csv(rows)
    _write_text(args.out, text, args.force)
    print(json.dumps({"rows": len(rows), "config_hash": chash}))
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x]


def _strs(s: str) -> list[str]:
    return [x for x in s.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sirwm", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON file; keys are option names, flags override them")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.add_argument("--out", required=out_required)
        sp.set_defaults(desk=None)

    sp = sub.add_parser("train", help="train the watermark network")
    common(sp)
    sp.add_argument("--corpus", help="JSONL embedding corpus (default: generate the desk corpus)")
    sp.add_argument("--n-texts", type=int, default=None)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--gamma", type=float, default=0.5)
    sp.add_argument("--log", help="per-epoch JSONL training log")
    sp.add_argument("--gates", type=int, default=0, metavar="N", help="check the release gates on held-out texts, retrying up to N seeds")
    sp.set_defaults(func=cmd_train, seed=None)

    def gen_opts(sp):
        sp.add_argument("--ckpt")
        sp.add_argument("--wm", choices=("sir", "kgw", "none"), default="sir")
        sp.add_argument("--kgw-k", type=int, default=2)
        sp.add_argument("--transform", choices=[k for k in TRANSFORM_KINDS if k != "raw"], default="tanh_k2")
        sp.add_argument("--max-new-tokens", type=int, default=200)

    sp = sub.add_parser("generate", help="generate watermarked texts")
    common(sp)
    gen_opts(sp)
    sp.add_argument("--n", type=int, default=10)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--decode", choices=("sample", "greedy", "beam"), default="sample")
    sp.add_argument("--width", type=int, default=4)
    sp.add_argument("--interval", type=int, default=5)
    sp.add_argument("--parallel", action="store_true")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("detect", help="score texts and report verdicts")
    common(sp, out_required=False)
    gen_opts(sp)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--fpr", type=float, default=0.01)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--calibration", type=int, default=200)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("attack", help="modify texts and report the score change")
    common(sp)
    gen_opts(sp)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--kind", choices=("synonym", "random_sub", "delete"), default="synonym")
    sp.add_argument("--ratio", type=float, default=0.5)
    sp.add_argument("--traces-out")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("spoof", help="word-frequency decryption attack")
    common(sp)
    gen_opts(sp)
    sp.add_argument("--n-texts", type=int, default=200)
    sp.add_argument("--delta", type=float, default=1.0)
    sp.set_defaults(func=cmd_spoof)

    sp = sub.add_parser("eval", help="delta x transform sweep to CSV")
    common(sp)
    gen_opts(sp)
    sp.add_argument("--deltas", type=_floats, default=[0.25, 0.5, 1.0, 2.0])
    sp.add_argument("--kinds", type=_strs, default=["tanh_k2", "linear", "tanh10_linear", "cubic"])
    sp.add_argument("--n-texts", type=int, default=20)
    sp.set_defaults(func=cmd_eval)
    return p


def _apply_config(parser, argv):
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    desk = cfg.pop("desk", None)
    known = vars(args)
    unknown = [k for k in cfg if k.replace("-", "_") not in known]
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    # config values become defaults; explicit flags still win
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    args = parser.parse_args(argv)
    if desk is not None:
        args.desk = desk
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidArgument, CheckpointError, CorpusFormatError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
