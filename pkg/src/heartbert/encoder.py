"""RoBERTa-shaped encoder with a weight-tied masked-LM head."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, FormatError, MissingArtifactError, DataValidationError
from .tokenizer import PAD

CKPT_MAGIC = b"HBCK01"
INIT_STD = 0.02
LN_EPS = 1e-5


@dataclass
class ModelConfig:
    n_layers: int = 6
    n_heads: int = 12
    d_model: int = 768
    d_ff: int = 3072
    vocab_size: int = 52_000
    max_positions: int = 514
    n_token_types: int = 1
    mask_prob: float = 0.15
    dropout: float = 0.1
    tie_lm_head: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_positions", "n_token_types"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"model.d_model ({self.d_model}) is not divisible by model.n_heads ({self.n_heads})")
        if self.max_positions < 3:
            raise ConfigError("model.max_positions must leave room for the two reserved rows")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("model.mask_prob must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must lie in [0, 1)")
        if not self.tie_lm_head:
            raise ConfigError("model.tie_lm_head=false is not supported")

    @property
    def max_seq_len(self) -> int:
        return self.max_positions - 2

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for ln in text.splitlines():
            if not ln.strip():
                continue
            k, sep, v = ln.partition("=")
            if not sep or k not in types:
                raise FormatError(f"bad config line {ln!r}")
            kw[k] = _coerce(v, types[k])
        return cls(**kw)


def _coerce(v: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if v.lower() not in ("true", "false"):
            raise ValueError(f"expected bool, got {v!r}")
        return v.lower() == "true"
    return {"int": int, "float": float, "str": str}[typ](v)


def tiny_config(**overrides) -> ModelConfig:
    """Small config used for gradient checks and desk-scale runs."""
    kw = dict(n_layers=2, n_heads=2, d_model=8, d_ff=32, vocab_size=20, max_positions=18, dropout=0.0)
    kw.update(overrides)
    return ModelConfig(**kw)


# ---------------------------------------------------------------- modules

class Embeddings(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.word = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.position = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.token_type = nn.Embedding(cfg.n_token_types, cfg.d_model)
        self.norm = nn.LayerNorm(cfg.d_model, eps=LN_EPS)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, ids, mask):
        # real tokens take positions 2, 3, ...; padding shares the reserved row 1
        pos = torch.cumsum(mask, dim=1) * mask + PAD
        types = torch.zeros_like(ids)
        x = self.word(ids) + self.position(pos) + self.token_type(types)
        return self.drop(self.norm(x))


class SelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.query = nn.Linear(cfg.d_model, cfg.d_model)
        self.key = nn.Linear(cfg.d_model, cfg.d_model)
        self.value = nn.Linear(cfg.d_model, cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, x, additive_mask, return_probs=False):
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head) + additive_mask
        probs = scores.softmax(dim=-1)
        ctx = self.drop(probs) @ v
        b, _, t, _ = ctx.shape
        out = self.out(ctx.transpose(1, 2).reshape(b, t, -1))
        return (out, probs) if return_probs else (out, None)


class Block(nn.Module):
    """Post-norm transformer block: attention, add & norm, GELU FFN, add & norm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attention = SelfAttention(cfg)
        self.attn_norm = nn.LayerNorm(cfg.d_model, eps=LN_EPS)
        self.ff_in = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff_out = nn.Linear(cfg.d_ff, cfg.d_model)
        self.ff_norm = nn.LayerNorm(cfg.d_model, eps=LN_EPS)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, additive_mask, return_probs=False):
        a, probs = self.attention(x, additive_mask, return_probs)
        x = self.attn_norm(x + self.drop(a))
        h = self.ff_out(F.gelu(self.ff_in(x)))
        x = self.ff_norm(x + self.drop(h))
        return x, probs


class MlmHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.dense = nn.Linear(cfg.d_model, cfg.d_model)
        self.norm = nn.LayerNorm(cfg.d_model, eps=LN_EPS)
        self.bias = nn.Parameter(torch.zeros(cfg.vocab_size))


class EncoderModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.embeddings = Embeddings(cfg)
        self.layers = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.lm_head = MlmHead(cfg)

    def forward(self, ids, attention_mask=None, return_attentions=False):
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        if attention_mask is None:
            attention_mask = (ids != PAD).long()
        attention_mask = torch.as_tensor(attention_mask, dtype=torch.long).view_as(ids)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size):
            raise DataValidationError(f"token id out of range [0, {self.config.vocab_size})")
        if ids.shape[1] > self.config.max_seq_len:
            raise DataValidationError(f"sequence length {ids.shape[1]} exceeds {self.config.max_seq_len}")
        x = self.embeddings(ids, attention_mask)
        dtype = x.dtype
        additive = torch.zeros(attention_mask.shape, dtype=dtype)
        additive = additive.masked_fill(attention_mask == 0, float("-inf"))[:, None, None, :]
        attns = []
        for layer in self.layers:
            x, p = layer(x, additive, return_attentions)
            attns.append(p)
        return (x, attns) if return_attentions else x

    def mlm_logits(self, hidden, transform=True):
        h = self.lm_head.norm(F.gelu(self.lm_head.dense(hidden))) if transform else hidden
        # decoder weight is the word-embedding table itself
        return F.linear(h, self.embeddings.word.weight) + self.lm_head.bias


def _init_weights(model: nn.Module) -> None:
    for mod in model.modules():
        if isinstance(mod, nn.Linear):
            nn.init.trunc_normal_(mod.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
            nn.init.zeros_(mod.bias)
        elif isinstance(mod, nn.Embedding):
            nn.init.trunc_normal_(mod.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        elif isinstance(mod, nn.LayerNorm):
            nn.init.ones_(mod.weight)
            nn.init.zeros_(mod.bias)
        elif isinstance(mod, MlmHead):
            nn.init.zeros_(mod.bias)


def build_model(config: ModelConfig | None = None, seed: int = 0, device=None,
                dtype=torch.float32) -> EncoderModel:
    config = config or ModelConfig()
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if device is not None:
            with torch.device(device):
                model = EncoderModel(config)
        else:
            model = EncoderModel(config)
        if str(device) != "meta":
            _init_weights(model)
    return model.to(dtype)


def count_parameters(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


# ---------------------------------------------------------------- checkpoints

def tensor_digest(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def save_tensors(tensors: dict[str, torch.Tensor], path, config: ModelConfig | None = None,
                 extra: dict | None = None) -> None:
    """Write tensors as HBCK01: magic, u64 manifest length, JSON manifest, raw f32 payloads."""
    manifest = {"tensors": [], "extra": extra or {}}
    payloads = []
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        manifest["tensors"].append({"name": name, "dtype": "f32le", "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in payloads:
            fh.write(blob)
    if config is not None:
        Path(str(path) + ".config").write_text(config.to_text(), encoding="utf-8")


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing checkpoint: {path}")
    blob = path.read_bytes()
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: not an HBCK01 checkpoint")
    off = len(CKPT_MAGIC)
    (mlen,) = struct.unpack("<Q", blob[off:off + 8])
    off += 8
    manifest = json.loads(blob[off:off + mlen].decode("utf-8"))
    off += mlen
    out = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "f32le":
            raise FormatError(f"unsupported dtype {entry['dtype']}")
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        off += 4 * n
    if off != len(blob):
        raise FormatError(f"{path}: trailing bytes after payloads")
    return out, manifest.get("extra", {})


def load_config(path) -> ModelConfig:
    side = Path(str(path) + ".config")
    if not side.exists():
        raise MissingArtifactError(f"missing checkpoint config sidecar: {side}")
    return ModelConfig.from_text(side.read_text(encoding="utf-8"))


def save_checkpoint(model: EncoderModel, path) -> None:
    save_tensors(model.state_dict(), path, model.config)


def load_checkpoint(path, config: ModelConfig | None = None) -> EncoderModel:
    tensors, _ = load_tensors(path)
    config = config or load_config(path)
    model = EncoderModel(config)
    enc = {k: v for k, v in tensors.items() if not k.startswith("head.")}
    try:
        model.load_state_dict(enc, strict=True)
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint incompatible with config: {exc}") from None
    return model
