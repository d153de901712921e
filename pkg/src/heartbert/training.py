"""MLM pretraining and hybrid encoder + Bi-LSTM fine-tuning."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .encoder import (EncoderModel, ModelConfig, build_model, load_config, load_tensors,
                      save_tensors)
from .errors import ConfigError, DataValidationError, EmptyInputError, NumericalError, ParameterError
from .tokenizer import N_SPECIALS, MASK, PAD, TokenizedSequence, collate

log = logging.getLogger(__name__)

IGNORE_INDEX = -100
LSTM_HIDDEN = 128
FINETUNE_LRS = (3e-5, 4e-3, 5e-3)


def derive_seed(seed: int, *names) -> int:
    """Deterministic sub-stream seed for (seed, name, index, ...)."""
    words = [int(seed) & 0xFFFFFFFF]
    for n in names:
        digest = hashlib.sha256(str(n).encode("utf-8")).digest()
        words.append(int.from_bytes(digest[:4], "little"))
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)


# ---------------------------------------------------------------- freezing

@dataclass(frozen=True)
class FreezePolicy:
    """How many of the top encoder blocks train. Embeddings and the MLM head never do."""

    n_unfrozen: int = 0

    @classmethod
    def all_frozen(cls):
        return cls(0)

    @classmethod
    def last(cls, n: int):
        return cls(n)

    @classmethod
    def all_unfrozen(cls, n_layers: int = 6):
        return cls(n_layers)

    @classmethod
    def parse(cls, text: str, n_layers: int = 6) -> "FreezePolicy":
        t = text.strip().lower()
        if t == "all-frozen":
            return cls(0)
        if t == "all-unfrozen":
            return cls(n_layers)
        if t in ("half", "half-frozen"):
            return cls(n_layers // 2)
        for prefix, suffix in (("last-", ""), ("", "-unfrozen")):
            if t.startswith(prefix) and t.endswith(suffix):
                core = t[len(prefix):len(t) - len(suffix)]
                if core.isdigit():
                    return cls(int(core))
        raise ConfigError(f"unknown freeze policy {text!r}")

    def trainable_layers(self, n_layers: int) -> range:
        if not 0 <= self.n_unfrozen <= n_layers:
            raise ConfigError(f"cannot unfreeze {self.n_unfrozen} of {n_layers} layers")
        return range(n_layers - self.n_unfrozen, n_layers)

    def label(self, n_layers: int = 6) -> str:
        if self.n_unfrozen == 0:
            return "all-frozen"
        if self.n_unfrozen == n_layers:
            return "all-unfrozen"
        return f"last-{self.n_unfrozen}"


# ---------------------------------------------------------------- hybrid model

class ClassifierHead(nn.Module):
    """Dense projection, one-layer Bi-LSTM, linear classifier on the final states."""

    def __init__(self, d_model: int, n_classes: int, hidden: int = LSTM_HIDDEN):
        super().__init__()
        self.projection = nn.Linear(d_model, d_model)
        self.bilstm = nn.LSTM(d_model, hidden, num_layers=1, batch_first=True, bidirectional=True)
        self.classifier = nn.Linear(2 * hidden, n_classes)

    def forward(self, hidden, attention_mask):
        x = torch.tanh(self.projection(hidden))
        lengths = attention_mask.sum(dim=1).cpu()
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        _, (h_n, _) = self.bilstm(packed)
        # h_n: (directions, batch, hidden); final forward and final backward states
        return self.classifier(torch.cat([h_n[0], h_n[1]], dim=-1))


class HybridModel(nn.Module):
    def __init__(self, encoder: EncoderModel, head: ClassifierHead, freeze: FreezePolicy):
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.freeze = freeze
        self.apply_freeze()

    @property
    def n_classes(self) -> int:
        return self.head.classifier.out_features

    def apply_freeze(self) -> None:
        cfg = self.encoder.config
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        for i in self.freeze.trainable_layers(cfg.n_layers):
            for p in self.encoder.layers[i].parameters():
                p.requires_grad_(True)
        for p in self.head.parameters():
            p.requires_grad_(True)

    def forward(self, ids, attention_mask):
        ids = torch.as_tensor(ids, dtype=torch.long)
        attention_mask = torch.as_tensor(attention_mask, dtype=torch.long)
        hidden = self.encoder(ids, attention_mask)
        return self.head(hidden, attention_mask)

    def trainable_names(self) -> set[str]:
        return {n for n, p in self.named_parameters() if p.requires_grad}

    def save(self, path) -> None:
        tensors = dict(self.encoder.state_dict())
        tensors.update({f"head.{k}": v for k, v in self.head.state_dict().items()})
        extra = {"n_classes": self.n_classes, "freeze": self.freeze.n_unfrozen,
                 "lstm_hidden": self.head.bilstm.hidden_size}
        save_tensors(tensors, path, self.encoder.config, extra)


def count_trainable(model: EncoderModel, freeze: FreezePolicy | None = None,
                    head: ClassifierHead | None = None) -> int:
    """Trainable parameter count implied by ``freeze`` (None = pretraining, all of the encoder)."""
    if freeze is None:
        n = sum(p.numel() for p in model.parameters())
    else:
        n = sum(p.numel() for i in freeze.trainable_layers(model.config.n_layers)
                for p in model.layers[i].parameters())
    if head is not None:
        n += sum(p.numel() for p in head.parameters())
    return n


def build_hybrid(checkpoint, n_classes: int, freeze: FreezePolicy, seed: int = 0,
                 expected: ModelConfig | None = None, device=None) -> HybridModel:
    """Attach a fresh classifier head to a pretrained encoder.

    ``checkpoint`` is an EncoderModel or the path of an encoder checkpoint.
    """
    if n_classes < 2:
        raise ParameterError("n_classes must be >= 2")
    if isinstance(checkpoint, EncoderModel):
        encoder = copy.deepcopy(checkpoint)
    else:
        from .encoder import load_checkpoint
        encoder = load_checkpoint(checkpoint)
    if expected is not None and asdict(expected) != asdict(encoder.config):
        raise ConfigError("checkpoint config does not match the expected model config")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "head"))
        if device is not None:
            with torch.device(device):
                head = ClassifierHead(encoder.config.d_model, n_classes)
        else:
            head = ClassifierHead(encoder.config.d_model, n_classes)
    head = head.to(next(encoder.parameters()).dtype)
    return HybridModel(encoder, head, freeze)


def load_hybrid(path) -> HybridModel:
    tensors, extra = load_tensors(path)
    cfg = load_config(path)
    encoder = EncoderModel(cfg)
    enc = {k: v for k, v in tensors.items() if not k.startswith("head.")}
    encoder.load_state_dict(enc, strict=True)
    head = ClassifierHead(cfg.d_model, int(extra["n_classes"]), int(extra.get("lstm_hidden", LSTM_HIDDEN)))
    head.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("head.")}, strict=True)
    return HybridModel(encoder, head, FreezePolicy(int(extra["freeze"])))


# ---------------------------------------------------------------- masking / loss

@dataclass
class MlmBatch:
    input_ids: np.ndarray
    labels: np.ndarray
    attention_mask: np.ndarray

    @property
    def n_masked(self) -> int:
        return int(np.count_nonzero(self.labels != IGNORE_INDEX))


def mask_tokens(ids, attention_mask=None, p: float = 0.15, strategy: str = "80-10-10",
                seed: int = 0, vocab_size: int | None = None) -> MlmBatch:
    """Select each eligible position with probability ``p`` and corrupt it.

    ``strategy`` is ``"80-10-10"`` (MASK / random token / unchanged) or
    ``"always-mask"``. Special tokens and padding are never selected.
    """
    if not 0.0 <= p <= 1.0:
        raise ParameterError("mask probability must lie in [0, 1]")
    ids = np.asarray(ids, dtype=np.int64)
    if attention_mask is None:
        attention_mask = (ids != PAD).astype(np.int64)
    attention_mask = np.asarray(attention_mask, dtype=np.int64)
    rng = np.random.default_rng(seed)
    eligible = (ids >= N_SPECIALS) & (attention_mask == 1)
    selected = (rng.random(ids.shape) < p) & eligible
    labels = np.full_like(ids, IGNORE_INDEX)
    labels[selected] = ids[selected]
    out = ids.copy()
    flat = np.flatnonzero(selected)
    if strategy == "always-mask":
        out.flat[flat] = MASK
    elif strategy == "80-10-10":
        r = rng.random(flat.size)
        out.flat[flat[r < 0.8]] = MASK
        rand_pos = flat[(r >= 0.8) & (r < 0.9)]
        if rand_pos.size:
            if vocab_size is None:
                raise ParameterError("vocab_size is required for random replacement")
            out.flat[rand_pos] = rng.integers(N_SPECIALS, vocab_size, size=rand_pos.size)
    else:
        raise ParameterError(f"unknown masking strategy {strategy!r}")
    return MlmBatch(out, labels, attention_mask)


class NoMaskedTokensWarning(UserWarning):
    pass


def mlm_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy over positions whose label is not the ignore sentinel."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.shape[:-1] != labels.shape:
        raise DataValidationError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    keep = labels != IGNORE_INDEX
    if not bool(keep.any()):
        warnings.warn("batch has no masked positions; loss defined as 0", NoMaskedTokensWarning)
        return logits.sum() * 0.0
    return F.cross_entropy(logits[keep], labels[keep])


# ---------------------------------------------------------------- logs

@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def lines(self) -> str:
        out = []
        for i, loss in enumerate(self.losses):
            acc = self.val_acc[i] if i < len(self.val_acc) else float("nan")
            out.append(f"epoch={i} loss={loss!r} val_acc={acc!r}")
        return "".join(ln + "\n" for ln in out)

    def to_json(self, include_timing: bool = False) -> str:
        d = {"losses": self.losses, "val_acc": self.val_acc, "seed": self.seed, "config": self.config,
             "epochs": len(self.losses)}
        if include_timing:
            d["wall_clock_s"] = self.wall_clock_s
        return json.dumps(d, sort_keys=True, indent=1)

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.lines(), encoding="utf-8")
        Path(str(path) + ".json").write_text(self.to_json(), encoding="utf-8")


def _check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss during {where}")


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainOptions:
    lr: float = 5e-5
    batch_size: int = 64
    epochs: int = 1000
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    strategy: str = "80-10-10"


def make_adamw(params, opts: PretrainOptions) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=opts.lr, betas=tuple(opts.betas), eps=opts.eps,
                             weight_decay=opts.weight_decay)


def pretrain(corpus: Sequence[TokenizedSequence], config: ModelConfig, opts: PretrainOptions | None = None,
             seed: int = 0, model: EncoderModel | None = None,
             dtype=torch.float32) -> tuple[EncoderModel, TrainLog]:
    """Masked-LM pretraining with AdamW at a constant learning rate.

    Each epoch is one shuffled pass over ``corpus``. Shuffling, masking and
    dropout all draw from sub-streams of ``seed``, so the result is a pure
    function of (corpus, config, opts, seed).
    """
    opts = opts or PretrainOptions()
    if not len(corpus):
        raise EmptyInputError("pretraining corpus is empty")
    if model is None:
        model = build_model(config, seed=derive_seed(seed, "init"), dtype=dtype)
    started = time.perf_counter()
    log_ = TrainLog(seed=seed, config={"model": asdict(config), "opt": asdict(opts)})
    optim = make_adamw(model.parameters(), opts)
    n = len(corpus)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "dropout"))
        model.train()
        for epoch in range(opts.epochs):
            order = np.random.default_rng(derive_seed(seed, "shuffle", epoch)).permutation(n)
            total, batches = 0.0, 0
            for b, start in enumerate(range(0, n, opts.batch_size)):
                ids, mask = collate([corpus[i] for i in order[start:start + opts.batch_size]])
                mb = mask_tokens(ids, mask, config.mask_prob, opts.strategy,
                                 derive_seed(seed, "masking", epoch, b), config.vocab_size)
                if mb.n_masked == 0:
                    continue
                hidden = model(mb.input_ids, mb.attention_mask)
                loss = mlm_loss(model.mlm_logits(hidden), mb.labels)
                _check_finite(loss, f"pretraining epoch {epoch}")
                optim.zero_grad()
                loss.backward()
                optim.step()
                total += loss.item()
                batches += 1
            log_.losses.append(total / max(batches, 1))
            log.info("pretrain epoch=%d loss=%.6f", epoch, log_.losses[-1])
    model.eval()
    log_.wall_clock_s = time.perf_counter() - started
    return model, log_


# ---------------------------------------------------------------- fine-tuning

@dataclass
class FinetuneOptions:
    lrs: tuple = FINETUNE_LRS
    batch_size: int = 8
    epochs: int = 10


@dataclass
class FinetuneResult:
    model: HybridModel
    best_lr: float
    best_val_acc: float
    val_acc_by_lr: dict
    logs: dict


def _batches(ids: list, n: int, batch_size: int, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _stack(seqs: list[np.ndarray]):
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros_like(ids)
    for r, s in enumerate(seqs):
        ids[r, :len(s)] = s
        mask[r, :len(s)] = 1
    return ids, mask


@torch.no_grad()
def predict(model: HybridModel, ids: list[np.ndarray], batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for idx in _batches(ids, len(ids), batch_size):
        bid, bmask = _stack([ids[i] for i in idx])
        out.append(model(bid, bmask).argmax(dim=-1).numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _validate_labels(labels: np.ndarray, n_classes: int, name: str) -> None:
    if labels.size == 0:
        raise EmptyInputError(f"{name} set is empty")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataValidationError(f"{name} labels must lie in [0, {n_classes})")


def finetune(hybrid: HybridModel, train: tuple, val: tuple, opts: FinetuneOptions | None = None,
             seed: int = 0) -> FinetuneResult:
    """Train the unfrozen tensors with Adam, once per candidate learning rate.

    ``train`` and ``val`` are ``(list of id arrays, label array)``. For every
    learning rate the epoch with the best validation accuracy is kept; the
    learning rate whose kept model scores best on validation wins (earliest
    candidate on ties).
    """
    opts = opts or FinetuneOptions()
    tr_ids, tr_y = list(train[0]), np.asarray(train[1], dtype=np.int64)
    va_ids, va_y = list(val[0]), np.asarray(val[1], dtype=np.int64)
    k = hybrid.n_classes
    _validate_labels(tr_y, k, "train")
    _validate_labels(va_y, k, "validation")
    missing = set(range(k)) - set(tr_y.tolist())
    if missing:
        warnings.warn(f"classes {sorted(missing)} have no training samples")

    initial = copy.deepcopy(hybrid.state_dict())
    best = None
    scores, logs = {}, {}
    for lr in opts.lrs:
        model = copy.deepcopy(hybrid)
        model.load_state_dict(initial)
        optim = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=lr)
        tlog = TrainLog(seed=seed, config={"lr": lr, "batch_size": opts.batch_size, "epochs": opts.epochs,
                                           "freeze": model.freeze.n_unfrozen})
        started = time.perf_counter()
        kept_acc, kept_state = -1.0, None
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "finetune-dropout", lr))
            for epoch in range(opts.epochs):
                model.train()
                order = np.random.default_rng(derive_seed(seed, "finetune-shuffle", lr, epoch)).permutation(len(tr_ids))
                total, nb = 0.0, 0
                for idx in _batches(tr_ids, len(tr_ids), opts.batch_size, order):
                    bid, bmask = _stack([tr_ids[i] for i in idx])
                    loss = F.cross_entropy(model(bid, bmask), torch.as_tensor(tr_y[idx]))
                    _check_finite(loss, f"fine-tuning lr={lr} epoch {epoch}")
                    optim.zero_grad()
                    loss.backward()
                    optim.step()
                    total += loss.item()
                    nb += 1
                acc = float(np.mean(predict(model, va_ids) == va_y))
                tlog.losses.append(total / max(nb, 1))
                tlog.val_acc.append(acc)
                log.info("finetune lr=%g epoch=%d loss=%.6f val_acc=%.4f", lr, epoch, tlog.losses[-1], acc)
                if acc > kept_acc:
                    kept_acc, kept_state = acc, copy.deepcopy(model.state_dict())
        if kept_state is not None:
            model.load_state_dict(kept_state)
        tlog.wall_clock_s = time.perf_counter() - started
        scores[lr], logs[lr] = kept_acc, tlog
        if best is None or kept_acc > best[1]:
            best = (lr, kept_acc, model)
    return FinetuneResult(best[2], best[0], best[1], scores, logs)
