"""Dictionary-constrained neural machine translation with candidate disambiguation."""

from .data import (AugmentedInput, ConstraintMatch, Dictionary, Example, Vocabulary, build_augmented_input,
                   build_vocabulary, dictionary_stats, load_dictionary, match_constraints, pad_batch)
from .decoding import DecodeConfig, alpha_boost, beam_decode, greedy_decode
from .evaluation import EvalRecord, corpus_bleu, csr, csr_by_degree, paired_bootstrap
from .model import DictDisModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, gradient_check, label_smoothed_nll, lr_schedule, train, train_step

__version__ = "0.1.0"
