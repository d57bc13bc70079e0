"""Vulnerable-code and vulnerable-line detection over LLVM-IR-derived
text, using binary bag-of-words line vectors and a two-stage BLSTM
detector trained with hand-written backpropagation."""

from .corpus import (Corpus, Program, filter_by_length, load_corpus,
                     prepare_corpus, save_corpus, strip_user_functions)
from .detector import (ModelConfig, Prediction, Stage1Model, Stage2Model,
                       encode_line, load_model, predict, save_model,
                       stage1_forward, stage2_forward, train_stage1,
                       train_stage2)
from .errors import DataError, NumericError
from .evaluate import (ConfusionCounts, MetricsReport, confusion, metrics,
                       run_experiment)
from .synth import SynthConfig, generate_corpus, rule_based_labels
from .vocab import (BowVector, Vocabulary, build_vocabulary, load_vocabulary,
                    save_vocabulary, tokenize, vectorize_line,
                    vectorize_program)

__all__ = [
    "BowVector", "ConfusionCounts", "Corpus", "DataError", "MetricsReport",
    "ModelConfig", "NumericError", "Prediction", "Program", "Stage1Model",
    "Stage2Model", "SynthConfig", "Vocabulary", "build_vocabulary",
    "confusion", "encode_line", "filter_by_length", "generate_corpus",
    "load_corpus", "load_model", "load_vocabulary", "metrics", "predict",
    "prepare_corpus", "rule_based_labels", "run_experiment", "save_corpus",
    "save_model", "save_vocabulary", "stage1_forward", "stage2_forward",
    "strip_user_functions", "tokenize", "train_stage1", "train_stage2",
    "vectorize_line", "vectorize_program",
]

__version__ = "0.1.0"
