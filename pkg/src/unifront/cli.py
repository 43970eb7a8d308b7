"""Command-line surface: synth-data, train-aux, finetune, predict, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every artifact
embeds the resolved config echo, the seed, and content hashes of the input
files, so a (config, seed) pair fully determines the outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import evaluation, inference, synthetic, training
from .config import ConfigError, RunConfig, parse_value
from .data import Lexicon, load_corpus, load_embeddings, save_corpus, save_embeddings
from .main_model import UnifiedFrontend

log = logging.getLogger("unifront")


class UsageError(ValueError):
    pass


def _seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing required {what} path")
    p = Path(path)
    if not p.exists():
        raise RuntimeError(f"{what} path does not exist: {p}")
    return p


def _meta(command: str, cfg: RunConfig, inputs: dict[str, Path]) -> dict:
    return {
        "command": command,
        "seed": cfg.seed,
        "config": cfg.echo(),
        "inputs": {name: ckpt.file_sha256(p) for name, p in sorted(inputs.items())},
    }


def _trace_meta(meta: dict) -> dict:
    return {
        "command": meta["command"],
        "seed": meta["seed"],
        "config": json.dumps(meta["config"], sort_keys=True),
        "inputs": json.dumps(meta["inputs"], sort_keys=True),
    }


def _load_world(cfg: RunConfig, args):
    lex_path = _require(cfg.path("lexicon", args.lexicon), "lexicon")
    corpus_path = _require(cfg.path("corpus", args.corpus), "corpus")
    emb_path = _require(cfg.path("embeddings", args.embeddings), "embeddings")
    lexicon = Lexicon.load(lex_path)
    vocabs = synthetic.vocab_for_lexicon(lexicon, cfg.n_pos())
    utts = load_corpus(corpus_path, vocabs, lexicon)
    table = load_embeddings(emb_path, cfg.embed_dim())
    matrix = table.matrix_for(vocabs.char)
    inputs = {"corpus": corpus_path, "lexicon": lex_path, "embeddings": emb_path}
    return lexicon, vocabs, utts, matrix, inputs


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth_data(args, cfg: RunConfig) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    lexicon = synthetic.default_lexicon()
    utts = synthetic.generate_synthetic_corpus(
        args.n, cfg.seed, lexicon, n_pos=cfg.n_pos()
    )
    table = synthetic.generate_embeddings(
        lexicon, cfg.embed_dim(), training.mix_seed(cfg.seed, 7)
    )
    meta = _meta("synth-data", cfg, {})
    meta["n"] = args.n
    save_corpus(out / "corpus.jsonl", utts, meta=meta)
    lexicon.save(out / "lexicon.tsv", meta=meta)
    save_embeddings(out / "embeddings.vec", table)
    n_poly = sum(sum(u.polyphone_mask) for u in utts)
    n_chars = sum(len(u) for u in utts)
    print(f"wrote {len(utts)} utterances ({n_chars} chars, {n_poly} polyphone positions)")
    print(f"lexicon: {len(lexicon)} chars, {len(lexicon.polyphones())} polyphones")
    print(f"embeddings: dim {table.dim}")
    return 0


def cmd_train_aux(args, cfg: RunConfig) -> int:
    from .aux_model import AuxModel

    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    lexicon, vocabs, utts, matrix, inputs = _load_world(cfg, args)
    aux_cfg = cfg.aux_config()
    torch.manual_seed(training.mix_seed(cfg.seed, 100))
    n_cws = len(vocabs.cws) - vocabs.cws.n_specials
    n_pos = len(vocabs.pos) - vocabs.pos.n_specials
    model = AuxModel(aux_cfg, matrix.shape[1], n_cws, n_pos)
    steps = args.steps if args.steps is not None else int(cfg["train.aux_steps"])
    result = training.train_aux(
        model,
        utts,
        vocabs,
        matrix,
        steps=steps,
        seed=cfg.seed,
        bucketing=cfg.bucketing(),
        optim=cfg.optim(),
        log_every=int(cfg["train.log_every"]),
    )
    meta = _meta("train-aux", cfg, inputs)
    training.save_aux_checkpoint(out / "aux.ckpt", model, vocabs, meta, step=steps)
    training.write_trace(
        out / "aux_trace.csv", ["step", "loss"], result.trace, _trace_meta(meta)
    )
    report = evaluation.evaluate_tagger(model, utts, vocabs, matrix)
    (out / "aux_report.json").write_text(report.to_json(meta=meta), encoding="utf-8")
    print(f"aux checkpoint: {out / 'aux.ckpt'} (final loss {result.final_loss:.4f})")
    if report.cws_block_f1 is not None:
        print(f"CWS block F1: {report.cws_block_f1:.4f}")
    if report.pos_acc is not None:
        print(f"POS accuracy: {report.pos_acc:.4f}")
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    lexicon, vocabs, utts, matrix, inputs = _load_world(cfg, args)

    use_aux = bool(cfg["train.use_aux"]) and not args.no_aux
    aux = None
    if use_aux:
        aux_path = cfg.path("aux_checkpoint", args.aux_checkpoint)
        if aux_path is None:
            raise RuntimeError("auxiliary module enabled but no --aux-checkpoint given")
        aux_path = _require(aux_path, "aux checkpoint")
        aux, aux_vocabs, payload = training.load_aux_checkpoint(aux_path)
        if aux_vocabs.to_symbol_lists() != vocabs.to_symbol_lists():
            raise RuntimeError("aux checkpoint vocab does not match the corpus vocab")
        if aux.embed_dim != matrix.shape[1]:
            raise RuntimeError(
                f"aux checkpoint embed_dim {aux.embed_dim} != embeddings {matrix.shape[1]}"
            )
        configured = cfg.aux_config()
        if configured.to_dict() != aux.config.to_dict():
            raise RuntimeError(
                "aux architecture mismatch between checkpoint and config; "
                "remove conflicting aux.* overrides or retrain"
            )
        inputs["aux_checkpoint"] = aux_path

    main_cfg = cfg.main_config(aux_dense_width=aux.config.dense_width if aux else 0)
    meta = _meta("finetune", cfg, inputs)
    steps = args.steps if args.steps is not None else int(cfg["train.steps"])

    start_step = 0
    optimizer_state = None
    if args.resume:
        model, payload = training.load_main_checkpoint(_require(args.resume, "resume checkpoint"))
        start_step = payload["step"]
        optimizer_state = payload["optimizer"]
        if payload["config"]["main"] != main_cfg.to_dict():
            raise RuntimeError("resume checkpoint architecture does not match config")
    else:
        torch.manual_seed(training.mix_seed(cfg.seed, 200))
        model = UnifiedFrontend(main_cfg, vocabs, matrix, aux)

    result = training.finetune(
        model,
        utts,
        steps=steps,
        seed=cfg.seed,
        schedule=cfg.schedule(),
        bucketing=cfg.bucketing(),
        optim=cfg.optim(),
        freeze_aux=bool(cfg["train.freeze_aux"]),
        start_step=start_step,
        optimizer_state=optimizer_state,
        log_every=int(cfg["train.log_every"]),
    )
    training.save_main_checkpoint(
        out / "main.ckpt",
        model,
        meta,
        step=start_step + steps,
        optimizer_state=result.optimizer_state,
    )
    training.write_trace(out / "trace.csv", training.TRACE_HEADER, result.trace, _trace_meta(meta))
    print(
        f"main checkpoint: {out / 'main.ckpt'} "
        f"(loss {result.first_loss:.4f} -> {result.final_loss:.4f})"
    )
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    ckpt_path = _require(cfg.path("checkpoint", args.checkpoint), "checkpoint")
    lex_path = _require(cfg.path("lexicon", args.lexicon), "lexicon")
    corpus_path = _require(cfg.path("corpus", args.corpus), "corpus")
    model, payload = training.load_main_checkpoint(ckpt_path)
    lexicon = Lexicon.load(lex_path)
    utts = load_corpus(corpus_path, model.vocabs, lexicon)
    if args.limit is not None:
        utts = utts[: args.limit]
    options = cfg.decode_options(mode=args.mode)
    out_path = Path(args.out or "predictions.jsonl")
    if out_path.is_dir():
        out_path = out_path / "predictions.jsonl"
    meta = _meta(
        "predict",
        cfg,
        {"corpus": corpus_path, "lexicon": lex_path, "checkpoint": ckpt_path},
    )
    meta["mode"] = options.mode
    n_failed = inference.batch_predict(model, utts, lexicon, options, out_path, meta=meta)
    print(f"wrote {len(utts)} prediction(s) to {out_path} ({n_failed} failed)")
    return 1 if n_failed else 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt_path = _require(cfg.path("checkpoint", args.checkpoint), "checkpoint")
    lex_path = _require(cfg.path("lexicon", args.lexicon), "lexicon")
    corpus_path = _require(cfg.path("corpus", args.corpus), "corpus")
    model, payload = training.load_main_checkpoint(ckpt_path)
    lexicon = Lexicon.load(lex_path)
    utts = load_corpus(corpus_path, model.vocabs, lexicon)
    if args.limit is not None:
        utts = utts[: args.limit]

    modes = ("ar", "sar") if args.mode == "both" else (args.mode,)
    reports = {}
    for mode in modes:
        options = cfg.decode_options(mode=mode)
        reports[mode.upper()] = evaluation.evaluate_run(model, utts, lexicon, options)
    table = evaluation.format_report_table(reports)
    print(table)

    meta = _meta(
        "eval",
        cfg,
        {"corpus": corpus_path, "lexicon": lex_path, "checkpoint": ckpt_path},
    )
    meta["modes"] = list(modes)
    payload = {
        "modes": {mode: rep.to_dict() for mode, rep in reports.items()},
        "meta": meta,
    }
    out_path = Path(args.out or "report.json")
    if out_path.is_dir():
        out_path = out_path / "report.json"
    out_path.write_text(
        json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2),
        encoding="utf-8",
    )
    print(f"report: {out_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unifront",
        description="Unified sequence-to-sequence Mandarin TTS front-end",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="dotted-key config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="output directory or file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry (repeatable)",
        )

    p = sub.add_parser("synth-data", help="generate a synthetic corpus + lexicon + embeddings")
    common(p)
    p.add_argument("--n", type=int, required=True, help="number of utterances")

    p = sub.add_parser("train-aux", help="pre-train the auxiliary tagger")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--lexicon")
    p.add_argument("--embeddings")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("finetune", help="fine-tune the unified front-end")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--lexicon")
    p.add_argument("--embeddings")
    p.add_argument("--aux-checkpoint")
    p.add_argument("--no-aux", action="store_true", help="train without the auxiliary branch")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="continue from a main checkpoint")

    p = sub.add_parser("predict", help="decode a corpus to a predictions file")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--lexicon")
    p.add_argument("--mode", choices=("ar", "sar"), default="sar")
    p.add_argument("--limit", type=int)

    p = sub.add_parser("eval", help="score a checkpoint against a labelled corpus")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--lexicon")
    p.add_argument("--mode", choices=("ar", "sar", "both"), default="both")
    p.add_argument("--limit", type=int)

    return parser


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-aux": cmd_train_aux,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides: dict[str, object] = {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            key, raw = item.split("=", 1)
            overrides[key.strip()] = parse_value(raw)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = RunConfig.from_sources(args.config, overrides)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    _seed_everything(cfg.seed)
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure contract: exit 1
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
