"""Speech-to-LLM alignment with a single trainable projector."""

from .tensor import (
    CrossEntropyResult,
    GradientError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    no_grad,
    set_default_dtype,
)

from .data import (
    IGNORE_ID,
    SyntheticTaskSpec,
    Tokenizer,
    UtteranceRecord,
    gen_dataset,
    load_features,
    read_features,
    read_manifest,
    write_features,
    write_manifest,
)
from .lm import LMConfig, TinyCausalLM, ToySpeechEncoder
from .projector import Projector, compose, downsample, speech_embedding
from .decoding import beam_search, decode_corpus, decode_utterance
from .metrics import score_corpus, wer, wer_text
from .checkpoint import (
    load_encoder,
    load_lm,
    load_projector,
    save_encoder,
    save_lm,
    save_projector,
)
from .trainer import (
    build_copy_corpus,
    build_pretrain_corpus,
    build_span_corpus,
    instruction_tune,
    pretrain_lm,
    train_projector,
    tune_on_spans,
)
from .estimator import ProjectorAligner

__version__ = "0.1.0"
