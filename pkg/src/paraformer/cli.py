"""Command-line entry point: ``paraformer {train,generate,eval,sweep,params}``."""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

from . import data as D
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PROFILES, ExperimentConfig, load_config, parse_bool
from .decode import STRATEGIES, DecodeConfig, generate
from .errors import (ConfigError, DataError, FormatError, LengthError, ParameterError, ParaformerError,
                     VocabError)
from .init import SeededRng
from .metrics import coherence_score, diversity_report, get_scorer
from .model import (build_model, count_actual_params, count_paper_params, standalone_blocks)
from .training import AdamState, fit

log = logging.getLogger("paraformer")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def bundled_corpus() -> Path:
    return Path(str(resources.files("paraformer") / "resources" / "toy_echo.jsonl"))


# --- shared plumbing -------------------------------------------------------------

def _resolve_seed(flag: int | None) -> dict[str, str]:
    if flag is not None:
        return {"train.seed": str(flag), "decode.seed": str(flag)}
    env = os.environ.get("PARAFORMER_SEED")
    if env is not None:
        if not env.strip().isdigit():
            raise ConfigError(f"PARAFORMER_SEED must be a non-negative integer, got {env!r}")
        return {"train.seed": env.strip(), "decode.seed": env.strip()}
    return {}


def _config_from_args(args, extra: dict[str, object] | None = None) -> ExperimentConfig:
    overrides: dict[str, object] = dict(_resolve_seed(getattr(args, "seed", None)))
    overrides.update(extra or {})
    return load_config(getattr(args, "config", None), getattr(args, "profile", "desk"), overrides)


def _windowed(examples, max_turns):
    return [D.window_context(ex, max_turns) for ex in examples]


def split_corpus(cfg: ExperimentConfig):
    corpus = cfg.paths.corpus or str(bundled_corpus())
    examples = _windowed(D.load_corpus(corpus), cfg.train.max_turns)
    if cfg.paths.eval_corpus:
        return examples, _windowed(D.load_corpus(cfg.paths.eval_corpus), cfg.train.max_turns)
    n_eval = int(round(len(examples) * cfg.train.eval_fraction))
    if n_eval == 0 or n_eval >= len(examples):
        return examples, examples
    return examples[:-n_eval], examples[-n_eval:]


@dataclass
class TrainedRun:
    model: object
    state: AdamState
    vocab: D.Vocab
    history: list
    eval_set: list


def train_run(cfg: ExperimentConfig, log_path=None) -> TrainedRun:
    train, eval_set = split_corpus(cfg)
    vocab = D.build_vocab(train, cfg.train.min_count)
    model = build_model(cfg.model.build(len(vocab)), cfg.plan.build(cfg.model.layers), cfg.init, cfg.train.seed)
    if cfg.paths.vectors:
        table, coverage = D.load_word_vectors(cfg.paths.vectors, vocab, cfg.model.n,
                                              SeededRng(cfg.train.seed).child("vectors"))
        model.set_embedding(table.data)
        log.info("word vectors cover %.1f%% of the vocabulary", 100 * coverage)
    state = AdamState(lr=cfg.train.lr)
    history = fit(model, train, vocab, cfg.train, state, eval_set=eval_set, log_path=log_path)
    return TrainedRun(model, state, vocab, history, eval_set)


def generate_rows(model, vocab: D.Vocab, examples, decode_cfg: DecodeConfig) -> list[dict]:
    """One generation per example; example ``i`` uses the stream ``SeededRng(seed).child(i)``."""
    rows = []
    root = SeededRng(decode_cfg.seed)
    for i, ex in enumerate(examples):
        ctx_ids = D.encode_context(ex, vocab, model.config.max_len)
        out = generate(model, ctx_ids, decode_cfg, root.child(i))
        rows.append({
            "context": [" ".join(u) for u in ex.context],
            "response": " ".join(vocab.decode(out)),
            "strategy": decode_cfg.label,
            "seed": decode_cfg.seed,
        })
    return rows


def _write_jsonl(rows, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    D.write_jsonl(rows, path)


def _read_generations(path) -> list[dict]:
    rows = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read generations {path}: {exc.strerror or exc}") from None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise D.ParseError(lineno, f"invalid JSON ({exc.msg})", path) from None
        if not isinstance(obj, dict) or not isinstance(obj.get("response"), str) \
                or not isinstance(obj.get("context"), list):
            raise D.ParseError(lineno, "expected an object with 'context' (array) and 'response' (string)", path)
        rows.append(obj)
    if not rows:
        raise DataError(f"generations file {path} is empty")
    return rows


def score_generations(rows: Sequence[dict], scorer_name: str | None = None) -> dict:
    name, scorer = get_scorer(scorer_name)
    responses = [D.tokenize(r["response"]) for r in rows]
    report = diversity_report(responses)
    coherence = sum(coherence_score(scorer, [D.tokenize(u) for u in r["context"]], resp)
                    for r, resp in zip(rows, responses)) / len(rows)
    return {"dist1": report.distinct_1, "dist2": report.distinct_2, "dist3": report.distinct_3,
            "coherence": coherence, "scorer": name, "n_responses": report.response_count}


def _fmt(x) -> str:
    return repr(x) if isinstance(x, float) else str(x)


# --- commands ----------------------------------------------------------------------

def cmd_train(args) -> int:
    overrides = {}
    if args.corpus:
        overrides["paths.corpus"] = args.corpus
    if args.epochs is not None:
        overrides["train.epochs"] = args.epochs
    cfg = _config_from_args(args, overrides)
    out = Path(args.out or cfg.paths.output)
    out.mkdir(parents=True, exist_ok=True)
    run = train_run(cfg, log_path=out / "epochs.csv")
    (out / "config.cfg").write_text(cfg.dumps(), encoding="utf-8")
    meta = {"epoch": len(run.history), "inference_mode": cfg.train.inference_mode, "config": cfg.to_flat()}
    save_checkpoint(run.model, run.state, out / "model.para", run.vocab, meta)
    last = run.history[-1]
    print(f"trained {last.epoch} epochs: train_loss={last.train_loss:.4f} eval_loss={last.eval_loss:.4f}")
    print(f"checkpoint: {out / 'model.para'}")
    return EXIT_OK


def _decode_config(args, base: DecodeConfig, default_reinit: bool) -> DecodeConfig:
    values = {}
    for flag, key in (("strategy", "strategy"), ("temperature", "temperature"), ("k", "k"), ("p", "p"),
                      ("width", "width"), ("max_new_tokens", "max_new_tokens")):
        if getattr(args, flag, None) is not None:
            values[key] = getattr(args, flag)
    seed = _resolve_seed(args.seed)
    if seed:
        values["seed"] = int(seed["decode.seed"])
    reinit = args.reinit_per_context
    values["reinit_per_context"] = default_reinit if reinit is None else parse_bool(reinit)
    return replace(base, **values)


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.vocab is None:
        raise FormatError(f"{args.checkpoint}: checkpoint carries no vocabulary")
    base = DecodeConfig(reinit_per_context=False)
    if args.config:
        base = load_config(args.config, args.profile).decode
    default_reinit = ckpt.meta.get("inference_mode", "reinit_per_context") == "reinit_per_context"
    decode_cfg = _decode_config(args, base, default_reinit)
    max_turns = int(ckpt.meta.get("config", {}).get("train.max_turns", D.MAX_TURNS))
    corpus = args.corpus or str(bundled_corpus())
    examples = _windowed(D.load_corpus(corpus), max_turns)
    rows = generate_rows(ckpt.model, ckpt.vocab, examples, decode_cfg)
    out = args.out or "generations.jsonl"
    _write_jsonl(rows, out)
    print(f"wrote {len(rows)} generations ({decode_cfg.label}) to {out}")
    return EXIT_OK


EVAL_FIELDS = ("file", "strategy", "dist1", "dist2", "dist3")


def cmd_eval(args) -> int:
    scorer_name, _ = get_scorer(args.scorer)
    header = [*EVAL_FIELDS, f"coherence[{scorer_name}]", "n_responses"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for path in sorted(args.files, key=lambda p: Path(p).name):
        rows = _read_generations(path)
        strategies = sorted({str(r.get("strategy", "")) for r in rows})
        s = score_generations(rows, scorer_name)
        writer.writerow([Path(path).name, "|".join(strategies), _fmt(s["dist1"]), _fmt(s["dist2"]),
                         _fmt(s["dist3"]), _fmt(s["coherence"]), s["n_responses"]])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def _emit(text: str, out):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# --- sweeps ---------------------------------------------------------------------------

SIGMA_GRID = (0.01, 0.05, 0.5)
GAIN_SA_GRID = (1.5, 2.5, 3.5)
GAIN_FF_GRID = (1.0, 1.5, 2.0)
PLAN_GRID = (("Alt", "alt"), ("Full", "full"), ("Seq_1", "seq1"), ("Seq_2", "seq2"))


def sweep_cells(grid: str) -> list[tuple[str, dict[str, str]]]:
    """(row label, config overrides) for each cell of a named grid."""
    if grid == "sigma":
        return [(f"sigma_sa={a:g},sigma_ff={b:g}",
                 {"init.kind": "standard_normal", "init.sigma_sa": str(a), "init.sigma_ff": str(b)})
                for a in SIGMA_GRID for b in SIGMA_GRID]
    if grid == "gamma":
        return [(f"gamma_sa={a:g},gamma_ff={b:g}",
                 {"init.kind": "scalable_kaiming", "init.gain_sa": str(a), "init.gain_ff": str(b)})
                for a in GAIN_SA_GRID for b in GAIN_FF_GRID]
    if grid == "plan":
        return [(label, {"plan.name": name}) for label, name in PLAN_GRID]
    if grid == "decode":
        transformer = {"plan.name": "standard", "decode.reinit_per_context": "false"}
        para = {"plan.name": "alt", "decode.strategy": "greedy", "decode.reinit_per_context": "true"}
        return [
            ("PaRaFormer_K", {**para, "init.kind": "scalable_kaiming", "init.gain_sa": "2.5", "init.gain_ff": "1.5"}),
            ("PaRaFormer_N", {**para, "init.kind": "standard_normal", "init.sigma_sa": "0.01",
                              "init.sigma_ff": "0.05"}),
            ("Transformer", {**transformer, "decode.strategy": "greedy"}),
            ("-T=0.50", {**transformer, "decode.strategy": "temperature", "decode.temperature": "0.5"}),
            ("-T=0.75", {**transformer, "decode.strategy": "temperature", "decode.temperature": "0.75"}),
            ("-T=1.0", {**transformer, "decode.strategy": "temperature", "decode.temperature": "1.0"}),
            ("-Top-p(0.9)", {**transformer, "decode.strategy": "topp", "decode.p": "0.9"}),
            ("-Top-k(40)", {**transformer, "decode.strategy": "topk", "decode.k": "40"}),
            ("-Beam(5)", {**transformer, "decode.strategy": "beam", "decode.width": "5"}),
        ]
    raise ConfigError(f"unknown sweep grid {grid!r}; expected sigma, gamma, plan or decode")


SWEEP_FIELDS = ("setting", "config_hash", "dist1", "dist2", "dist3", "coherence", "n_responses", "eval_loss", "error")


def run_sweep(base: ExperimentConfig, grid: str, seeds: int = 1) -> list[dict]:
    """Train and evaluate every cell; failures are recorded in the row and the sweep continues.

    Cells that differ only in decoding settings share one training run (training
    is deterministic, so this equals retraining). Sampling metrics are averaged
    over ``seeds`` decode seeds.
    """
    trained: dict[str, TrainedRun] = {}
    rows = []
    for label, overrides in sweep_cells(grid):
        row = {"setting": label, "config_hash": "", "error": ""}
        try:
            cfg = base.with_overrides(overrides)
            row["config_hash"] = cfg.hash()
            train_key = replace(cfg, decode=DecodeConfig()).hash()
            if train_key not in trained:
                trained[train_key] = train_run(cfg)
            run = trained[train_key]
            decode_cfg = cfg.decode
            if decode_cfg.strategy == "topk" and decode_cfg.k > len(run.vocab):
                decode_cfg = replace(decode_cfg, k=len(run.vocab))
            scores = []
            for s in range(seeds):
                gen_cfg = replace(decode_cfg, seed=decode_cfg.seed + s)
                scores.append(score_generations(generate_rows(run.model, run.vocab, run.eval_set, gen_cfg)))
            for key in ("dist1", "dist2", "dist3", "coherence"):
                row[key] = sum(sc[key] for sc in scores) / len(scores)
            row["n_responses"] = scores[0]["n_responses"]
            row["eval_loss"] = run.history[-1].eval_loss
        except Exception as exc:  # recorded in-row; the sweep continues
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def format_report(rows: list[dict], cfg: ExperimentConfig, grid: str, fmt: str, timestamp: str | None = None) -> str:
    lines = [f"# generated {timestamp or _dt.datetime.now().isoformat(timespec='seconds')}",
             f"# sweep grid: {grid}"]
    lines += [f"# {k} = {v}" for k, v in cfg.to_flat().items()]
    cells = [[_fmt(row.get(f, "")) if not isinstance(row.get(f), float) else f"{row[f]:.6f}" for f in SWEEP_FIELDS]
             for row in rows]
    if fmt == "markdown":
        body = ["| " + " | ".join(SWEEP_FIELDS) + " |", "|" + "---|" * len(SWEEP_FIELDS)]
        body += ["| " + " | ".join(c) + " |" for c in cells]
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_FIELDS)
        writer.writerows(cells)
        body = buf.getvalue().rstrip("\n").split("\n")
    return "\n".join(lines + body) + "\n"


def cmd_sweep(args) -> int:
    overrides = {}
    if args.corpus:
        overrides["paths.corpus"] = args.corpus
    if args.epochs is not None:
        overrides["train.epochs"] = args.epochs
    if args.format:
        overrides["report.format"] = args.format
    cfg = _config_from_args(args, overrides)
    rows = run_sweep(cfg, args.grid, args.seeds)
    _emit(format_report(rows, cfg, args.grid, cfg.report.format), args.out)
    return EXIT_OK


# --- parameter accounting ------------------------------------------------------

def params_table(n: int, d_qkv: int, d_ff: int, d_r: int, heads: int = 1) -> str:
    closed = count_paper_params(n, d_qkv, d_ff, d_r)
    attn, ff, norms = standalone_blocks(n, d_qkv, d_ff, heads=heads, para=True)
    a, f = count_actual_params(attn), count_actual_params(ff)
    norm_total = sum(count_actual_params(m).total for m in norms)
    rows = [
        ("PaRaFormer attention", closed.attn, a.total, f"frozen {a.frozen:,} / trainable {a.trainable:,}, heads={heads}"),
        ("layer norms (x2)", closed.norm, norm_total,
         "formula counts n*n per norm; a gain+bias layer norm holds 2n" if closed.norm != norm_total else ""),
        ("PaRaFormer feed forward", closed.ff, f.total, f"frozen {f.frozen:,} / trainable {f.trainable:,}"),
        ("RL attention", closed.rl_attn, None, f"d_r={d_r}; formula only"),
        ("RL feed forward", closed.rl_ff, None, "formula only"),
    ]
    out = [f"parameter counts for n={n}, d_qkv={d_qkv}, d_ff={d_ff}, d_r={d_r}", "",
           f"{'component':<26}{'formula':>14}{'actual':>14}  {'match':<6} note"]
    for name, formula, actual, note in rows:
        actual_s = f"{actual:,}" if actual is not None else "-"
        match = "-" if actual is None else ("yes" if actual == formula else "NO")
        out.append(f"{name:<26}{formula:>14,}{actual_s:>14}  {match:<6} {note}")
    out += ["",
            f"RL / PaRaFormer attention: {closed.rl_attn / closed.attn:.2f}x",
            f"RL / PaRaFormer feed forward: {closed.rl_ff / closed.ff:.3f}x"]
    return "\n".join(out) + "\n"


def cmd_params(args) -> int:
    for label in ("n", "d_qkv", "d_ff", "d_r", "heads"):
        if getattr(args, label) < 1:
            raise ParameterError(f"--{label.replace('_', '-')} must be positive")
    _emit(params_table(args.n, args.d_qkv, args.d_ff, args.d_r, args.heads), args.out)
    return EXIT_OK


# --- argument parsing --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paraformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
        p.add_argument("--seed", type=int, help="overrides PARAFORMER_SEED and the config")
        p.add_argument("--out")

    p = sub.add_parser("train", help="train a model, write checkpoint and epoch log")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate one response per corpus example")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--temperature", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--max-new-tokens", type=int)
    p.add_argument("--reinit-per-context", metavar="BOOL")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="Distinct-1/2/3 and coherence for generation files")
    p.add_argument("files", nargs="+")
    p.add_argument("--scorer", help="registered coherence scorer (default: lexical overlap proxy)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/evaluate a grid of settings")
    common(p)
    p.add_argument("--grid", choices=("sigma", "gamma", "plan", "decode"), required=True)
    p.add_argument("--corpus")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seeds", type=int, default=1, help="decode seeds averaged per cell")
    p.add_argument("--format", choices=("csv", "markdown"))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("params", help="closed-form vs actual parameter counts")
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--d-qkv", type=int, default=128)
    p.add_argument("--d-ff", type=int, default=2048)
    p.add_argument("--d-r", type=int, default=512)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_params)
    return parser


def exit_code_for(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, (ConfigError, ParameterError)):
        return EXIT_CONFIG, "config"
    if isinstance(exc, (DataError, FormatError, VocabError, LengthError, OSError)):
        return EXIT_DATA, "data"
    return EXIT_RUNTIME, "runtime"


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ParaformerError, OSError) as exc:
        code, kind = exit_code_for(exc)
        print(f"error[{kind}]: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
