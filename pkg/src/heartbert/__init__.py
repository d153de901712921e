"""ECG-to-synthetic-language pipeline: quantizer, BPE tokenizer, MLM encoder, hybrid classifiers."""

from .encoder import EncoderModel, ModelConfig, build_model, tiny_config
from .evaluation import MetricsReport, evaluate
from .quantizer import QuantizerCodebook, decode_symbols, encode_symbols, train_codebook
from .signal import EcgRecord, load_record, normalize, resample, window
from .tokenizer import BpeTokenizer, TokenizedSequence, train_bpe
from .training import FreezePolicy, build_hybrid, count_trainable, finetune, mask_tokens, mlm_loss, pretrain

__version__ = "0.1.0"
