"""Speech-to-LM dialogue state tracking: a speech encoder bridged into a
causal LM through a small trainable connector, trained in two stages (ASR
alignment, then joint ASR-DST with low-rank adapters), with turn-by-turn
inference, fuzzy slot normalization, and JGA/SER evaluation."""

from .connector import Connector, ConnectorConfig, SoftPromptSequence, stack_downsample
from .encoders import EncoderSpec, PrecomputedEncoder, ToyEncoder
from .inference import (HistoryMode, TurnPrediction, fallback_state,
                        run_corpus, run_dialogue, text_only_run)
from .lm import (GenerationResult, LmSpec, ToyCausalLM, forward_with_prefix,
                 generate)
from .lora import LoraConfig, inject_lora, lora_site_forward, merge_lora
from .metrics import (EvalReport, canonicalize, evaluate_states,
                      joint_goal_accuracy, slot_error_rate)
from .data_io import (CorpusFormatError, Dialogue, DialogueCorpus,
                      DialogueTurn, SynthSpec, derive_ontology, dumps_corpus,
                      generate_synthetic, load_corpus, save_corpus)
from .postprocess import (Ontology, fuzzy_normalize, normalize_prediction,
                          similarity_ratio)
from .prompting import (DialogueState, HistoryTurnText, PromptRecord,
                        build_asr_prompt, build_dst_prompt, parse_turn_output,
                        render_history, serialize_state)
from .tokenizer import ByteTokenizer
from .training import (SpeechDstModel, StageConfig, compute_nll,
                       final_finetune, load_checkpoint, pretrain_lm,
                       save_checkpoint, train_stage1, train_stage2)

__version__ = "0.1.0"
