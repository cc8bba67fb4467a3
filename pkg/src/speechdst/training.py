"""Two-stage training: stage-1 ASR alignment (LM frozen), stage-2 joint
ASR-DST (encoder frozen, LoRA on the LM), optional per-corpus final
fine-tuning, early stopping on dev cross-entropy, and checkpointing.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR

from .connector import Connector, ConnectorConfig
from .encoders import ToyEncoder, PrecomputedEncoder
from .lm import ToyCausalLM, LmSpec
from .lora import LoraConfig, inject_lora, lora_parameters
from .prompting import (ByteTokenizer, HistoryTurnText, PromptRecord, USER, AGENT,
                        build_asr_prompt, build_dst_prompt, render_history)

STAGES = ("asr_pretrain", "joint_dst", "final_ft")


@dataclass
class StageConfig:
    stage: str
    batch_size: int = 8
    learning_rate: float = 1e-3
    warmup_steps: int = 20
    freeze: set = field(default_factory=set)
    lora: LoraConfig | None = None
    early_stop_patience: int = 3
    eval_interval: int = 200
    max_steps: int = 2000
    include_agent: bool = True
    loss_on_history: bool = False
    full_lm_finetune: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.full_lm_finetune and self.lora is not None:
            raise ValueError("full_lm_finetune and LoRA are mutually exclusive")
        if self.stage == "asr_pretrain":
            if self.lora is not None:
                raise ValueError("asr_pretrain must not carry LoRA")
            self.freeze = set(self.freeze) | {"lm"}
        else:
            self.freeze = set(self.freeze) | {"encoder"}
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")

    def to_dict(self) -> dict:
        d = {"stage": self.stage, "batch_size": self.batch_size,
             "learning_rate": self.learning_rate, "warmup_steps": self.warmup_steps,
             "freeze": sorted(self.freeze), "early_stop_patience": self.early_stop_patience,
             "eval_interval": self.eval_interval, "max_steps": self.max_steps,
             "include_agent": self.include_agent, "loss_on_history": self.loss_on_history,
             "full_lm_finetune": self.full_lm_finetune, "seed": self.seed,
             "lora": self.lora.to_dict() if self.lora else None}
        return d


def compute_nll(logits: torch.Tensor, target_ids, loss_mask) -> torch.Tensor:
    """Mean negative log-likelihood over masked-in positions only.

    `logits` row i must be the predictor of `target_ids[i]`.
    """
    targets = torch.as_tensor(list(target_ids), dtype=torch.long)
    mask = torch.as_tensor(list(loss_mask), dtype=torch.bool)
    if logits.shape[0] != targets.shape[0] or targets.shape[0] != mask.shape[0]:
        raise ValueError("logits, target_ids and loss_mask lengths differ")
    if not mask.any():
        raise ValueError("all positions are masked out of the loss")
    return F.cross_entropy(logits[mask], targets[mask])


class SpeechDstModel:
    """Encoder + connector + LM bundle with the shared byte tokenizer."""

    def __init__(self, encoder, connector: Connector, lm: ToyCausalLM,
                 tokenizer: ByteTokenizer | None = None):
        self.encoder = encoder
        self.connector = connector
        self.lm = lm
        self.tokenizer = tokenizer or ByteTokenizer()

    def encode_turn(self, turn) -> torch.Tensor:
        if turn.symbols is not None:
            return self.encoder.encode(turn.symbols)
        if turn.features is not None:
            return self.encoder.encode(turn.features)
        raise ValueError("turn carries neither symbols nor a features reference")

    def soft_prefix(self, turn) -> torch.Tensor:
        return self.connector(self.encode_turn(turn)).embeddings

    def trainable_parameters(self):
        params = []
        for mod in (self.encoder, self.connector, self.lm):
            params.extend(p for p in mod.parameters() if p.requires_grad)
        return params

    def modules_by_name(self) -> dict:
        return {"encoder": self.encoder, "connector": self.connector, "lm": self.lm}

    def eval_mode(self):
        for m in (self.encoder, self.connector, self.lm):
            if hasattr(m, "eval"):
                m.eval()

    def train_mode(self):
        for m in (self.encoder, self.connector, self.lm):
            if hasattr(m, "train"):
                m.train()


def apply_freeze(model: SpeechDstModel, freeze: set) -> None:
    for name, mod in model.modules_by_name().items():
        frozen = name in freeze
        if hasattr(mod, "set_trainable") and not (isinstance(mod, PrecomputedEncoder) and frozen):
            mod.set_trainable(not frozen)
        elif hasattr(mod, "parameters"):
            for p in mod.parameters():
                p.requires_grad_(not frozen)


# ---------------------------------------------------------------------------
# example construction

def gold_history_turns(dialogue, upto: int) -> list[HistoryTurnText]:
    turns = []
    for t in dialogue.turns[:upto]:
        turns.append(HistoryTurnText(USER, t.transcript))
        turns.append(HistoryTurnText(AGENT, t.agent))
    return turns


def build_stage1_examples(corpus, tokenizer) -> list:
    """ASR pairs: one example per user turn."""
    out = []
    for dlg in corpus.dialogues:
        for i, turn in enumerate(dlg.turns):
            rec = build_asr_prompt(turn.transcript, tokenizer,
                                   prefix_source=f"{dlg.id}:{i}")
            out.append((turn, rec))
    return out


def build_stage2_examples(corpus, tokenizer, include_agent: bool = True,
                          loss_on_history: bool = False) -> list:
    """Joint ASR-DST examples with ground-truth history, one per turn."""
    out = []
    for dlg in corpus.dialogues:
        for i, turn in enumerate(dlg.turns):
            history = render_history(gold_history_turns(dlg, i), include_agent)
            rec = build_dst_prompt(history, turn.transcript, turn.state,
                                   train=True, tokenizer=tokenizer,
                                   prefix_source=f"{dlg.id}:{i}",
                                   loss_on_history=loss_on_history)
            out.append((turn, rec))
    return out


# ---------------------------------------------------------------------------
# batched loss

def batch_loss(lm: ToyCausalLM, items, pos_offset: int = 0) -> torch.Tensor:
    """items: list of (prefix_embeddings [P x D] or None, PromptRecord).

    Pads [prefix || tokens] sequences into one batch and returns the mean
    NLL over all masked-in positions in the batch.
    """
    seqs, gathers = [], []
    for prefix, rec in items:
        ids = torch.as_tensor(rec.token_ids, dtype=torch.long)
        tok = lm.embed_tokens(ids)
        emb = tok if prefix is None else torch.cat([prefix, tok], dim=0)
        p = 0 if prefix is None else prefix.shape[0]
        seqs.append(emb)
        gathers.append((p, rec))
    n = max(s.shape[0] for s in seqs)
    batch = torch.zeros(len(seqs), n, lm.embed_dim)
    kpm = torch.ones(len(seqs), n, dtype=torch.bool)
    for i, s in enumerate(seqs):
        batch[i, :s.shape[0]] = s
        kpm[i, :s.shape[0]] = False
    hidden, _ = lm.forward_embeddings(batch, key_padding_mask=kpm, return_hidden=True,
                                      pos_offset=pos_offset)
    bidx, pidx, targets = [], [], []
    for i, (p, rec) in enumerate(gathers):
        L = len(rec.token_ids)
        start = 0 if p >= 1 else 1  # with no prefix nothing predicts token 0
        for j in range(start, L):
            if rec.loss_mask[j]:
                bidx.append(i)
                pidx.append(p + j - 1)
                targets.append(rec.token_ids[j])
    if not targets:
        raise ValueError("all positions are masked out of the loss")
    rows = hidden[torch.tensor(bidx), torch.tensor(pidx)]
    logits = lm.head(lm.ln_f(rows))
    return F.cross_entropy(logits, torch.tensor(targets))


# ---------------------------------------------------------------------------
# training loops

@dataclass
class TrainResult:
    steps: int
    history: list = field(default_factory=list)  # (step, train_ce, dev_ce)
    best_dev_ce: float | None = None
    stopped_early: bool = False


def _prefixes(model: SpeechDstModel, batch, with_grad: bool):
    items = []
    ctx = torch.enable_grad() if with_grad else torch.no_grad()
    with ctx:
        for turn, rec in batch:
            items.append((model.soft_prefix(turn), rec))
    return items


def eval_ce(model: SpeechDstModel, examples, batch_size: int = 16) -> float:
    model.eval_mode()
    losses, weights = [], []
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            batch = examples[i:i + batch_size]
            items = [(model.soft_prefix(t), r) for t, r in batch]
            losses.append(float(batch_loss(model.lm, items)))
            weights.append(len(batch))
    model.train_mode()
    return sum(l * w for l, w in zip(losses, weights)) / sum(weights)


def _make_optimizer(params, cfg: StageConfig):
    opt = AdamW(params, lr=cfg.learning_rate, betas=(0.9, 0.999), weight_decay=0.01)
    def lr_lambda(step):
        if cfg.warmup_steps and step < cfg.warmup_steps:
            return (step + 1) / cfg.warmup_steps
        return 1.0
    return opt, LambdaLR(opt, lr_lambda)


def _run_loop(model: SpeechDstModel, examples, cfg: StageConfig,
              dev_examples=None, exactly_one_epoch: bool = False) -> TrainResult:
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    params = model.trainable_parameters()
    if not params:
        raise ValueError("no trainable parameters for this stage configuration")
    opt, sched = _make_optimizer(params, cfg)
    result = TrainResult(steps=0)
    best, since_best = float("inf"), 0
    order = list(range(len(examples)))
    pool: list[int] = []
    if exactly_one_epoch:
        rng.shuffle(order)
        n_steps = math.ceil(len(examples) / cfg.batch_size)
    else:
        n_steps = cfg.max_steps
    model.train_mode()
    for step in range(n_steps):
        if exactly_one_epoch:
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
        else:
            while len(pool) < cfg.batch_size:
                epoch = order[:]
                rng.shuffle(epoch)
                pool.extend(epoch)
            idx, pool = pool[:cfg.batch_size], pool[cfg.batch_size:]
        batch = [examples[i] for i in idx]
        items = _prefixes(model, batch, with_grad=True)
        loss = batch_loss(model.lm, items)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"training diverged at step {step}: loss={float(loss)} "
                f"(lr={sched.get_last_lr()[0]:.3g}, batch={len(batch)})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        result.steps = step + 1
        if (not exactly_one_epoch and dev_examples
                and (step + 1) % cfg.eval_interval == 0):
            dev = eval_ce(model, dev_examples)
            result.history.append((step + 1, float(loss.detach()), dev))
            if dev < best - 1e-5:
                best, since_best = dev, 0
            else:
                since_best += 1
                if since_best >= cfg.early_stop_patience:
                    result.stopped_early = True
                    break
        elif (step + 1) % cfg.eval_interval == 0:
            result.history.append((step + 1, float(loss.detach()), None))
    result.best_dev_ce = None if best == float("inf") else best
    return result


def _configure_lm_adaptation(model: SpeechDstModel, cfg: StageConfig) -> None:
    """Freeze the base LM; make only LoRA factors trainable (if configured).

    With full_lm_finetune the whole LM stays trainable (cascade-style
    topline, usable with the toy LM only).
    """
    if cfg.full_lm_finetune:
        return
    for p in model.lm.parameters():
        p.requires_grad_(False)
    if cfg.lora is not None:
        if not getattr(model.lm, "_lora_injected", False):
            inject_lora(model.lm, cfg.lora, seed=cfg.seed)
        for p in lora_parameters(model.lm):
            p.requires_grad_(True)


def train_stage1(model: SpeechDstModel, corpus, cfg: StageConfig,
                 dev_corpus=None) -> TrainResult:
    """ASR alignment: LM frozen, encoder + connector trained."""
    if cfg.stage != "asr_pretrain":
        raise ValueError("train_stage1 requires cfg.stage == 'asr_pretrain'")
    apply_freeze(model, cfg.freeze)
    examples = build_stage1_examples(corpus, model.tokenizer)
    dev = build_stage1_examples(dev_corpus, model.tokenizer) if dev_corpus else None
    return _run_loop(model, examples, cfg, dev)


def train_stage2(model: SpeechDstModel, corpora, cfg: StageConfig,
                 dev_corpora=None) -> TrainResult:
    """Joint ASR-DST: encoder frozen; connector (+ LoRA, if configured)
    trained on the shuffled union of the corpora with gold history."""
    if cfg.stage != "joint_dst":
        raise ValueError("train_stage2 requires cfg.stage == 'joint_dst'")
    if not isinstance(corpora, (list, tuple)):
        corpora = [corpora]
    apply_freeze(model, cfg.freeze)
    _configure_lm_adaptation(model, cfg)
    examples = []
    for c in corpora:
        examples.extend(build_stage2_examples(c, model.tokenizer, cfg.include_agent,
                                              cfg.loss_on_history))
    dev = None
    if dev_corpora:
        if not isinstance(dev_corpora, (list, tuple)):
            dev_corpora = [dev_corpora]
        dev = []
        for c in dev_corpora:
            dev.extend(build_stage2_examples(c, model.tokenizer, cfg.include_agent,
                                             cfg.loss_on_history))
    return _run_loop(model, examples, cfg, dev)


def final_finetune(model: SpeechDstModel, corpus, cfg: StageConfig) -> TrainResult:
    """Exactly one epoch over the target corpus."""
    if cfg.stage != "final_ft":
        raise ValueError("final_finetune requires cfg.stage == 'final_ft'")
    apply_freeze(model, cfg.freeze)
    _configure_lm_adaptation(model, cfg)
    examples = build_stage2_examples(corpus, model.tokenizer, cfg.include_agent,
                                     cfg.loss_on_history)
    return _run_loop(model, examples, cfg, exactly_one_epoch=True)


def pretrain_lm(lm: ToyCausalLM, texts: list[str], steps: int = 600,
                batch_size: int = 16, learning_rate: float = 1e-3,
                seed: int = 0, tokenizer: ByteTokenizer | None = None,
                position_jitter: int = 48) -> list[float]:
    """Plain next-byte LM training on raw strings.

    Gives the toy LM the role of a 'pretrained' model before the two-stage
    pipeline; the real system starts from a pretrained checkpoint instead.
    Each batch is trained at a random position offset (up to position_jitter)
    so the LM is robust to the soft prefix shifting token positions later.
    """
    tokenizer = tokenizer or ByteTokenizer()
    torch.manual_seed(seed)
    rng = random.Random(seed)
    recs = []
    for text in texts:
        ids = tokenizer.encode(text, add_bos=True, add_eos=True)
        recs.append(PromptRecord(ids, [False] + [True] * (len(ids) - 1), text))
    opt = AdamW(lm.parameters(), lr=learning_rate, betas=(0.9, 0.999), weight_decay=0.01)
    losses = []
    lm.train()
    for _ in range(steps):
        batch = [(None, rng.choice(recs)) for _ in range(batch_size)]
        offset = rng.randrange(position_jitter + 1) if position_jitter else 0
        loss = batch_loss(lm, batch, pos_offset=offset)
        if not torch.isfinite(loss):
            raise RuntimeError(f"LM pretraining diverged: loss={float(loss)}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    lm.eval()
    return losses


# ---------------------------------------------------------------------------
# checkpointing

def save_checkpoint(model: SpeechDstModel, path: str | Path, step: int = 0,
                    stage_config: StageConfig | None = None,
                    extra: dict | None = None) -> Path:
    """Checkpoint container: manifest.json + one weight blob per module."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    enc = model.encoder
    if isinstance(enc, ToyEncoder):
        enc_meta = {"kind": "toy", "n_symbols": enc.n_symbols,
                    "output_dim": enc.output_dim, "expansion": enc.expansion}
        torch.save(enc.state_dict(), path / "encoder.pt")
    else:
        enc_meta = {"kind": "precomputed", "output_dim": enc.output_dim,
                    "root": str(enc.root)}
    lora_cfg = getattr(model.lm, "_lora_config", None)
    manifest = {
        "step": step,
        "tokenizer": model.tokenizer.spec(),
        "connector_config": model.connector.cfg.to_dict(),
        "lm_spec": model.lm.spec.to_dict(),
        "encoder": enc_meta,
        "lora": lora_cfg.to_dict() if lora_cfg else None,
        "stage_config": stage_config.to_dict() if stage_config else None,
        "seed": stage_config.seed if stage_config else None,
    }
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    torch.save(model.connector.state_dict(), path / "connector.pt")
    torch.save(model.lm.state_dict(), path / "lm.pt")
    return path


def load_checkpoint(path: str | Path) -> tuple[SpeechDstModel, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    tokenizer = ByteTokenizer.from_spec(manifest["tokenizer"])
    connector = Connector(ConnectorConfig(**manifest["connector_config"]))
    connector.load_state_dict(torch.load(path / "connector.pt", weights_only=True))
    lm = ToyCausalLM(LmSpec(**manifest["lm_spec"]))
    if manifest.get("lora"):
        inject_lora(lm, LoraConfig.from_dict(manifest["lora"]))
    lm.load_state_dict(torch.load(path / "lm.pt", weights_only=True))
    enc_meta = manifest["encoder"]
    if enc_meta["kind"] == "toy":
        encoder = ToyEncoder(n_symbols=enc_meta["n_symbols"],
                             output_dim=enc_meta["output_dim"],
                             expansion=enc_meta["expansion"])
        encoder.load_state_dict(torch.load(path / "encoder.pt", weights_only=True))
    else:
        encoder = PrecomputedEncoder(enc_meta["root"], enc_meta["output_dim"])
    model = SpeechDstModel(encoder, connector, lm, tokenizer)
    model.eval_mode()
    return model, manifest
