"""Transformer with randomly initialised, frozen, per-epoch redrawn layers."""
from .data import DialogueExample, Vocab, build_vocab, load_corpus, make_batches, window_context
from .decode import DecodeConfig, beam_search, generate
from .init import InitKind, InitSpec, LayerRole, SeededRng, kaiming_std, reinit_all_frozen
from .metrics import distinct_n, diversity_report
from .model import (LayerPlan, ModelConfig, ParaFormerModel, build_model, count_actual_params,
                    count_paper_params, model_forward)
from .tensor import Tensor, backward, finite_diff_check, no_grad
from .training import AdamState, TrainConfig, adam_step, evaluate_loss, fit, train_epoch

__version__ = "0.1.0"
