"""Billet-number recognition toolkit.

A small, dependency-light pipeline for reading stamped billet numbers:
synthetic dot-matrix data, a numpy frame classifier with hand-derived
gradients, greedy CTC decoding with blank-run repair, encoding-rule
correction, and entropy-minimization test-time adaptation.
"""

from .core import Alphabet, db_binarize, entropy, softmax
from .ctc import (
    DecodeOptions,
    DecodeResult,
    LabelPath,
    ProbLattice,
    Provenance,
    collapse,
    decode,
    find_blank_runs,
    greedy_path,
    read_lattice,
    repair_blanks,
    write_lattice_binary,
    write_lattice_text,
)
from .harness import (
    AblationConfig,
    EvalReport,
    edit_distance,
    entropy_error_report,
    exact_match_accuracy,
    run_ablation,
)
from .model import (
    ModelParams,
    TrainConfig,
    classify_strip,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .rules import DIGIT, LETTER, EncodingRules, FieldSpec, correct, literal, parse_rules
from .synthgen import CorruptionSpec, gen_dataset, render_char, render_strip
from .tta import AdaptConfig, AdaptState, adapt_batch, adapt_stream, reset

__version__ = "0.1.0"
