"""Command-line entry point covering the full pipeline:

    speechdst synth        -> synthetic corpus + ontology
    speechdst pretrain-lm  -> fresh model with a text-pretrained toy LM
    speechdst pretrain-asr -> stage-1 ASR alignment checkpoint
    speechdst train-dst    -> stage-2 joint ASR-DST checkpoint
    speechdst finetune     -> one-epoch final fine-tune checkpoint
    speechdst infer        -> per-turn predictions JSONL
    speechdst evaluate     -> JGA/SER report (JSON + table)

Every command reads an optional JSON config (// comments allowed); CLI flags
override config fields. Outputs embed a hash of the merged run config so
reruns are verifiable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import re
import sys
from pathlib import Path

import torch

from .connector import Connector, ConnectorConfig
from .encoders import ToyEncoder
from .inference import HistoryMode, load_predictions, run_corpus, save_predictions
from .lm import LmSpec, ToyCausalLM
from .lora import LoraConfig
from .metrics import evaluate_states
from .data_io import (SynthSpec, derive_ontology, generate_synthetic,
                      load_corpus, save_corpus)
from .postprocess import Ontology, normalize_prediction
from .tokenizer import ByteTokenizer
from .training import (SpeechDstModel, StageConfig, final_finetune,
                       load_checkpoint, pretrain_lm, save_checkpoint,
                       train_stage1, train_stage2, build_stage2_examples)

DEFAULT_MODEL_CONFIG = {
    "encoder": {"n_symbols": 128, "output_dim": 32, "expansion": 4},
    "connector": {"stack_factor": 4, "hidden": 64, "layers": 2, "heads": 4,
                  "ffn_dim": 128, "max_stacked_len": 256},
    "lm": {"vocab_size": 259, "embed_dim": 64, "layers": 2, "heads": 4,
           "max_context": 768},
}

_COMMENT_RE = re.compile(r"^\s*//.*$", re.MULTILINE)


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    text = Path(path).read_text()
    try:
        return json.loads(_COMMENT_RE.sub("", text))
    except json.JSONDecodeError as e:
        raise SystemExit(f"error: config {path}: invalid JSON at line {e.lineno}: {e.msg}")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def merged_config(args, keys: list[str]) -> dict:
    """Config file values overridden by explicitly-given CLI flags."""
    cfg = dict(DEFAULT_MODEL_CONFIG)
    cfg.update(load_config(getattr(args, "config", None)))
    for key in keys:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            cfg[key] = val
    return cfg


def build_model(cfg: dict, seed: int) -> SpeechDstModel:
    torch.manual_seed(seed)
    enc_cfg = {**DEFAULT_MODEL_CONFIG["encoder"], **cfg.get("encoder", {})}
    con_cfg = {**DEFAULT_MODEL_CONFIG["connector"], **cfg.get("connector", {})}
    lm_cfg = {**DEFAULT_MODEL_CONFIG["lm"], **cfg.get("lm", {})}
    encoder = ToyEncoder(**enc_cfg)
    lm = ToyCausalLM(LmSpec(**lm_cfg))
    connector = Connector(ConnectorConfig(
        encoder_dim=enc_cfg["output_dim"], lm_dim=lm_cfg["embed_dim"], **con_cfg))
    return SpeechDstModel(encoder, connector, lm)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    cfg = merged_config(args, ["seed", "n_dialogues", "turns_min", "turns_max"])
    spec = SynthSpec(seed=cfg.get("seed", 7),
                     n_dialogues=cfg.get("n_dialogues", 50),
                     turns_min=cfg.get("turns_min", 1),
                     turns_max=cfg.get("turns_max", 3))
    corpus = generate_synthetic(spec)
    save_corpus(corpus, args.out)
    if args.ontology_out:
        Ontology.from_dict({k: v for k, v in derive_ontology(corpus).items()}
                           ).save(args.ontology_out)
    print(f"wrote {len(corpus)} dialogues ({corpus.turn_count()} turns) to {args.out} "
          f"[config {config_hash(cfg)}]")
    return 0


def _corpus_texts(corpus, include_agent: bool = True) -> list[str]:
    return [rec.text for _, rec in
            build_stage2_examples(corpus, ByteTokenizer(), include_agent)]


def cmd_pretrain_lm(args) -> int:
    cfg = merged_config(args, ["seed", "steps", "batch_size", "learning_rate"])
    corpus = load_corpus(args.corpus)
    seed = cfg.get("seed", 0)
    model = build_model(cfg, seed)
    texts = _corpus_texts(corpus)
    losses = pretrain_lm(model.lm, texts, steps=cfg.get("steps", 600),
                         batch_size=cfg.get("batch_size", 16),
                         learning_rate=cfg.get("learning_rate", 1e-3), seed=seed)
    save_checkpoint(model, args.out, step=len(losses),
                    extra={"run_config_hash": config_hash(cfg), "phase": "lm_pretrain"})
    print(f"LM pretraining: {len(losses)} steps, final loss {losses[-1]:.4f}; "
          f"checkpoint at {args.out} [config {config_hash(cfg)}]")
    return 0


def _stage_cfg_from(args, cfg: dict, stage: str) -> StageConfig:
    lora = None
    if stage in ("joint_dst", "final_ft") and not cfg.get("no_lora"):
        lora = LoraConfig(r=cfg.get("lora_r", 8))
    return StageConfig(
        stage=stage,
        batch_size=cfg.get("batch_size", 8),
        learning_rate=cfg.get("learning_rate", 1e-3 if stage == "asr_pretrain" else 5e-4),
        warmup_steps=cfg.get("warmup_steps", 20),
        lora=lora,
        early_stop_patience=cfg.get("early_stop_patience", 3),
        eval_interval=cfg.get("eval_interval", 50),
        max_steps=cfg.get("max_steps", 800),
        include_agent=not cfg.get("user_only", False),
        loss_on_history=cfg.get("loss_on_history", False),
        seed=cfg.get("seed", 0),
    )


_TRAIN_KEYS = ["seed", "batch_size", "learning_rate", "warmup_steps", "max_steps",
               "eval_interval", "early_stop_patience", "lora_r"]


def cmd_pretrain_asr(args) -> int:
    cfg = merged_config(args, _TRAIN_KEYS)
    cfg["no_lora"] = True
    model, _ = load_checkpoint(args.init)
    corpus = load_corpus(args.corpus)
    dev = load_corpus(args.dev) if args.dev else None
    scfg = _stage_cfg_from(args, cfg, "asr_pretrain")
    result = train_stage1(model, corpus, scfg, dev)
    save_checkpoint(model, args.out, step=result.steps, stage_config=scfg,
                    extra={"run_config_hash": config_hash(cfg), "phase": "stage1",
                           "best_dev_ce": result.best_dev_ce})
    print(f"stage-1 ASR: {result.steps} steps"
          + (f", best dev CE {result.best_dev_ce:.4f}" if result.best_dev_ce else "")
          + f"; checkpoint at {args.out} [config {config_hash(cfg)}]")
    return 0


def cmd_train_dst(args) -> int:
    cfg = merged_config(args, _TRAIN_KEYS)
    if args.no_lora:
        cfg["no_lora"] = True
    if args.user_only:
        cfg["user_only"] = True
    if args.loss_on_history:
        cfg["loss_on_history"] = True
    if args.no_asr_init:
        model = build_model(cfg, cfg.get("seed", 0))
        base, _ = load_checkpoint(args.init)
        model.lm = base.lm  # pretrained LM kept; encoder/connector random
        model.tokenizer = base.tokenizer
    else:
        model, _ = load_checkpoint(args.init)
    corpora = [load_corpus(p) for p in args.corpus]
    dev = [load_corpus(p) for p in args.dev] if args.dev else None
    scfg = _stage_cfg_from(args, cfg, "joint_dst")
    result = train_stage2(model, corpora, scfg, dev)
    save_checkpoint(model, args.out, step=result.steps, stage_config=scfg,
                    extra={"run_config_hash": config_hash(cfg), "phase": "stage2",
                           "best_dev_ce": result.best_dev_ce,
                           "no_asr_init": bool(args.no_asr_init)})
    print(f"stage-2 DST: {result.steps} steps"
          + (f", best dev CE {result.best_dev_ce:.4f}" if result.best_dev_ce else "")
          + f"; checkpoint at {args.out} [config {config_hash(cfg)}]")
    return 0


def cmd_finetune(args) -> int:
    cfg = merged_config(args, _TRAIN_KEYS)
    model, manifest = load_checkpoint(args.init)
    corpus = load_corpus(args.corpus)
    cfg["no_lora"] = manifest.get("lora") is None
    scfg = _stage_cfg_from(args, cfg, "final_ft")
    result = final_finetune(model, corpus, scfg)
    save_checkpoint(model, args.out, step=result.steps, stage_config=scfg,
                    extra={"run_config_hash": config_hash(cfg), "phase": "final_ft"})
    print(f"final fine-tune: {result.steps} steps (one epoch); checkpoint at "
          f"{args.out} [config {config_hash(cfg)}]")
    return 0


def cmd_infer(args) -> int:
    cfg = merged_config(args, ["max_new_tokens"])
    model, _ = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    hmode = HistoryMode(mode=args.history_mode, include_agent=not args.user_only)
    preds = run_corpus(model, corpus, hmode,
                       max_new_tokens=cfg.get("max_new_tokens", 512))
    save_predictions(preds, args.out)
    n_ok = sum(p.parse_ok for p in preds)
    print(f"decoded {len(preds)} turns ({n_ok} parsed OK) -> {args.out} "
          f"[config {config_hash(cfg)}]")
    return 0


def cmd_evaluate(args) -> int:
    cfg = merged_config(args, ["fuzzy_threshold"])
    preds = load_predictions(args.predictions)
    corpus = load_corpus(args.corpus)
    gold, by_key = [], {}
    for p in preds:
        by_key[(p.dialogue_id, p.turn_id)] = p
    for dlg in corpus.dialogues:
        for i, turn in enumerate(dlg.turns):
            if (dlg.id, i) not in by_key:
                raise SystemExit(f"error: missing prediction for dialogue {dlg.id} turn {i}")
    ordered, gold = [], []
    for dlg in corpus.dialogues:
        for i, turn in enumerate(dlg.turns):
            ordered.append(by_key[(dlg.id, i)])
            gold.append(turn.state)
    threshold = cfg.get("fuzzy_threshold", 80)
    if args.fuzzy:
        ont = Ontology.load(args.ontology)
        ordered = [normalize_prediction(p, ont, threshold) for p in ordered]
    report = evaluate_states([p.state for p in ordered], gold,
                             n_dialogues=len(corpus.dialogues),
                             fuzzy=args.fuzzy,
                             fuzzy_threshold=threshold if args.fuzzy else None)
    report.config_hash = config_hash(cfg)
    Path(args.out).write_text(report.to_json())
    print(report.to_table(), end="")
    print(f"report -> {args.out} [config {config_hash(cfg)}]")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speechdst",
                                description="speech-to-LM dialogue state tracking pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="JSON config file (// comments allowed)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    add_common(sp)
    sp.add_argument("--n-dialogues", type=int)
    sp.add_argument("--turns-min", type=int)
    sp.add_argument("--turns-max", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ontology-out")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("pretrain-lm", help="text-pretrain a fresh toy model's LM")
    add_common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--learning-rate", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pretrain_lm)

    def add_train(sp):
        add_common(sp)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--learning-rate", type=float)
        sp.add_argument("--warmup-steps", type=int)
        sp.add_argument("--max-steps", type=int)
        sp.add_argument("--eval-interval", type=int)
        sp.add_argument("--early-stop-patience", type=int)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("pretrain-asr", help="stage-1 ASR alignment")
    add_train(sp)
    sp.add_argument("--init", required=True, help="pretrain-lm checkpoint")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--dev")
    sp.set_defaults(func=cmd_pretrain_asr)

    sp = sub.add_parser("train-dst", help="stage-2 joint ASR-DST")
    add_train(sp)
    sp.add_argument("--init", required=True, help="stage-1 (or pretrain-lm) checkpoint")
    sp.add_argument("--corpus", action="append", required=True,
                    help="training corpus (repeatable)")
    sp.add_argument("--dev", action="append")
    sp.add_argument("--lora-r", type=int)
    sp.add_argument("--no-lora", action="store_true", help="connector-only ablation")
    sp.add_argument("--no-asr-init", action="store_true",
                    help="random connector/encoder init ablation")
    sp.add_argument("--user-only", action="store_true",
                    help="drop agent turns from history")
    sp.add_argument("--loss-on-history", action="store_true",
                    help="cascade-style loss over the whole prompt schema")
    sp.set_defaults(func=cmd_train_dst)

    sp = sub.add_parser("finetune", help="one-epoch final fine-tuning")
    add_train(sp)
    sp.add_argument("--init", required=True, help="stage-2 checkpoint")
    sp.add_argument("--corpus", required=True)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("infer", help="turn-by-turn decoding")
    add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--history-mode", default="self_decoded",
                    choices=["self_decoded", "oracle_user", "external_asr"])
    sp.add_argument("--user-only", action="store_true")
    sp.add_argument("--max-new-tokens", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("evaluate", help="JGA/SER evaluation")
    add_common(sp)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--ontology")
    sp.add_argument("--fuzzy", action="store_true")
    sp.add_argument("--fuzzy-threshold", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "evaluate" and args.fuzzy and not args.ontology:
        print("error: --fuzzy requires --ontology", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
