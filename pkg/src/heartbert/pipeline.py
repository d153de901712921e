"""Pipeline stages behind the CLI. Each stage reads and writes artifacts under ``paths.workdir``."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import encoder as enc
from .config import PipelineConfig
from .errors import ConfigError, DataValidationError, MissingArtifactError
from .evaluation import evaluate, report_render
from .quantizer import QuantizerCodebook, encode_symbols, train_codebook
from .signal import EcgRecord, load_record, normalize, resample, save_record, window
from .tasks import (TASK_CLASSES, BeatAnnotation, SynthProfile, balance_and_split, n_classes,
                    prepare_heartbeat, prepare_sleep, read_beat_annotation, read_dataset, read_stages,
                    rescale_peaks, split_epochs, synth_corpus, profile_dict, write_beat_annotation,
                    write_dataset, write_stages)
from .tokenizer import BpeTokenizer, train_bpe
from .training import (FinetuneOptions, FreezePolicy, PretrainOptions, build_hybrid, count_trainable,
                       derive_seed, finetune, load_hybrid, predict, pretrain, ClassifierHead)

log = logging.getLogger(__name__)

RECORD_SUFFIX = ".hbsig"
SYNTH_STAGE_RATES = {"Wake": 1.35, "REM": 1.15, "S1": 1.0, "S2": 0.9, "S3": 0.8, "S4": 0.8}


class Layout:
    """Artifact locations for one working directory."""

    def __init__(self, cfg: PipelineConfig):
        w = cfg.workdir
        self.workdir = w
        self.raw = Path(cfg.paths.raw_dir) if cfg.paths.raw_dir else w / "raw"
        self.ingested = w / "ingested"
        self.codebook = w / "codebook.hbq"
        self.corpus = w / "corpus.txt"
        self.vocab = w / "vocab.txt"
        self.merges = w / "merges.txt"
        self.encoder = w / "encoder.hbck"
        self.pretrain_log = w / "pretrain.log"
        self.task_dir = w / "task"
        self.hybrid = w / "hybrid.hbck"
        self.finetune_log = w / "finetune.log"
        self.metrics = w / "metrics.json"
        self.metrics_table = w / "metrics.txt"

    def split(self, name: str) -> Path:
        return self.task_dir / f"{name}.tsv"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def require(*paths) -> None:
    for p in paths:
        if not Path(p).exists():
            raise MissingArtifactError(f"missing artifact: {p}")


def write_provenance(artifact, cfg: PipelineConfig, command: str, upstream: dict) -> None:
    """Sidecar recording the config hash, overrides and upstream artifact hashes."""
    prov = {
        "artifact": Path(artifact).name,
        "sha256": sha256_file(artifact),
        "command": command,
        "config_sha256": cfg.sha256(),
        "overrides": dict(sorted(cfg.overrides.items())),
        "seed": cfg.seed,
        "upstream": {k: sha256_file(v) for k, v in sorted(upstream.items())},
    }
    Path(str(artifact) + ".prov").write_text(json.dumps(prov, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _records(directory: Path) -> list[Path]:
    files = sorted(p for p in directory.glob("*") if p.suffix in (RECORD_SUFFIX, ".csv"))
    if not files:
        raise MissingArtifactError(f"no records (*{RECORD_SUFFIX}, *.csv) in {directory}")
    return files


# ---------------------------------------------------------------- stages

def run_synth(cfg: PipelineConfig) -> list[Path]:
    lay = Layout(cfg)
    lay.raw.mkdir(parents=True, exist_ok=True)
    s = cfg.synth
    profile = SynthProfile(n_records=s.n_records, rate=s.rate, duration_s=s.duration_s, base_freq=s.base_freq,
                           noise=s.noise, seed=derive_seed(cfg.seed, "synth") & 0x7FFFFFFF,
                           stage_rate=SYNTH_STAGE_RATES if s.vary_stage_rate else None)
    outputs = []
    for sr in synth_corpus(profile):
        base = lay.raw / sr.record.record_id
        save_record(sr.record, base.with_suffix(RECORD_SUFFIX))
        write_beat_annotation(base.with_suffix(".ann"), sr.annotation)
        write_stages(base.with_suffix(".stages"), sr.stages)
        outputs += [base.with_suffix(RECORD_SUFFIX), base.with_suffix(".ann"), base.with_suffix(".stages")]
    meta = lay.raw / "synth.json"
    meta.write_text(json.dumps(profile_dict(profile), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    outputs.append(meta)
    return outputs


def run_ingest(cfg: PipelineConfig) -> list[Path]:
    """Resample to the target rate and min-max normalize every raw record."""
    lay = Layout(cfg)
    lay.ingested.mkdir(parents=True, exist_ok=True)
    outputs = []
    for path in _records(lay.raw):
        rec = load_record(path)
        out = normalize(resample(rec, cfg.signal.target_hz))
        dst = lay.ingested / (rec.record_id + RECORD_SUFFIX)
        save_record(out, dst)
        write_provenance(dst, cfg, "ingest", {"record": path})
        outputs.append(dst)
        ann = path.with_suffix(".ann")
        if ann.exists():
            a = read_beat_annotation(ann)
            peaks = np.minimum(rescale_peaks(a.r_peaks, rec.sampling_rate_hz, cfg.signal.target_hz),
                               out.samples.size - 1)
            write_beat_annotation(dst.with_suffix(".ann"), BeatAnnotation(peaks, a.labels))
            outputs.append(dst.with_suffix(".ann"))
        stages = path.with_suffix(".stages")
        if stages.exists():
            write_stages(dst.with_suffix(".stages"), read_stages(stages))
            outputs.append(dst.with_suffix(".stages"))
    return outputs


def _ingested(lay: Layout) -> list[EcgRecord]:
    return [load_record(p) for p in _records(lay.ingested)]


def run_train_quantizer(cfg: PipelineConfig) -> list[Path]:
    lay = Layout(cfg)
    records = _ingested(lay)
    x = np.concatenate([r.samples for r in records])
    q = cfg.quantizer
    cb = train_codebook(x, q.levels, q.tol, q.max_iter, seed=derive_seed(cfg.seed, "quantizer"),
                        max_samples=q.max_samples)
    cb.save(lay.codebook)
    QuantizerCodebook.load(lay.codebook)
    write_provenance(lay.codebook, cfg, "train-quantizer",
                     {p.name: p for p in _records(lay.ingested)})
    return [lay.codebook]


def run_prepare_corpus(cfg: PipelineConfig) -> list[Path]:
    lay = Layout(cfg)
    require(lay.codebook)
    cb = QuantizerCodebook.load(lay.codebook)
    lines = []
    for rec in _ingested(lay):
        for w in window(rec, cfg.signal.window):
            lines.append(encode_symbols(w, cb).text)
    lay.corpus.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_provenance(lay.corpus, cfg, "prepare-corpus", {"codebook": lay.codebook})
    return [lay.corpus]


def _corpus_lines(lay: Layout) -> list[str]:
    require(lay.corpus)
    return [ln for ln in lay.corpus.read_text(encoding="utf-8").split("\n") if ln]


def run_train_tokenizer(cfg: PipelineConfig) -> list[Path]:
    lay = Layout(cfg)
    require(lay.codebook, lay.corpus)
    cb = QuantizerCodebook.load(lay.codebook)
    tok = train_bpe(_corpus_lines(lay), cb.alphabet, cfg.tokenizer.vocab_size,
                    seed=derive_seed(cfg.seed, "tokenizer"), max_seq_len=cfg.tokenizer.max_seq_len)
    tok.save(lay.vocab, lay.merges)
    BpeTokenizer.load(lay.vocab, lay.merges)
    for p in (lay.vocab, lay.merges):
        write_provenance(p, cfg, "train-tokenizer", {"corpus": lay.corpus, "codebook": lay.codebook})
    return [lay.vocab, lay.merges]


def _tokenizer(cfg: PipelineConfig, lay: Layout) -> BpeTokenizer:
    require(lay.vocab, lay.merges)
    tok = BpeTokenizer.load(lay.vocab, lay.merges, cfg.tokenizer.max_seq_len)
    if tok.vocab_size > cfg.model.vocab_size:
        raise ConfigError(f"tokenizer has {tok.vocab_size} tokens but model.vocab_size is {cfg.model.vocab_size}")
    return tok


def run_pretrain(cfg: PipelineConfig) -> list[Path]:
    lay = Layout(cfg)
    tok = _tokenizer(cfg, lay)
    corpus = [tok.encode(ln) for ln in _corpus_lines(lay)]
    p = cfg.pretrain
    opts = PretrainOptions(lr=p.lr, batch_size=p.batch_size, epochs=p.epochs, weight_decay=p.weight_decay,
                           strategy=p.strategy)
    model, tlog = pretrain(corpus, cfg.model, opts, seed=derive_seed(cfg.seed, "pretrain"))
    enc.save_checkpoint(model, lay.encoder)
    enc.load_checkpoint(lay.encoder)
    tlog.save(lay.pretrain_log)
    log.info("pretraining took %.1f s", tlog.wall_clock_s)
    up = {"corpus": lay.corpus, "vocab": lay.vocab, "merges": lay.merges}
    write_provenance(lay.encoder, cfg, "pretrain", up)
    write_provenance(lay.pretrain_log, cfg, "pretrain", up)
    return [lay.encoder, Path(str(lay.encoder) + ".config"), lay.pretrain_log]


def run_prepare_task(cfg: PipelineConfig) -> list[Path]:
    lay = Layout(cfg)
    require(lay.codebook)
    cb = QuantizerCodebook.load(lay.codebook)
    tok = _tokenizer(cfg, lay)
    kind = cfg.task.kind
    segments = []
    for path in _records(lay.ingested):
        rec = load_record(path)
        if kind == "heartbeat4":
            ann_path = path.with_suffix(".ann")
            require(ann_path)
            segments += prepare_heartbeat(rec, read_beat_annotation(ann_path))
        else:
            st_path = path.with_suffix(".stages")
            require(st_path)
            epochs = split_epochs(rec, read_stages(st_path))
            segments += prepare_sleep(epochs, "three" if kind == "sleep3" else "five")
    if not segments:
        raise DataValidationError("task preparation produced no segments")
    for s in segments:
        s.token_ids = tok.encode(encode_symbols(s.samples, cb).text).ids
    splits = balance_and_split(segments, cfg.task.per_class or None, cfg.task.ratios,
                               seed=derive_seed(cfg.seed, "split"))
    lay.task_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, segs in splits.items():
        dst = lay.split(name)
        write_dataset(dst, segs, kind, cb.sha256()[:16], tok.sha256()[:16], cfg.seed)
        write_provenance(dst, cfg, "prepare-task", {"codebook": lay.codebook, "vocab": lay.vocab,
                                                    "merges": lay.merges})
        outputs.append(dst)
    return outputs


def run_finetune(cfg: PipelineConfig) -> list[Path]:
    lay = Layout(cfg)
    require(lay.encoder, lay.split("train"), lay.split("val"))
    _, tr_ids, tr_y = read_dataset(lay.split("train"))
    _, va_ids, va_y = read_dataset(lay.split("val"))
    freeze = FreezePolicy.parse(cfg.finetune.freeze, cfg.model.n_layers)
    hybrid = build_hybrid(lay.encoder, n_classes(cfg.task.kind), freeze,
                          seed=derive_seed(cfg.seed, "hybrid"), expected=cfg.model)
    f = cfg.finetune
    res = finetune(hybrid, (tr_ids, tr_y), (va_ids, va_y),
                   FinetuneOptions(lrs=tuple(f.lrs), batch_size=f.batch_size, epochs=f.epochs),
                   seed=derive_seed(cfg.seed, "finetune"))
    res.model.save(lay.hybrid)
    load_hybrid(lay.hybrid)
    tlog = res.logs[res.best_lr]
    tlog.config["selected_lr"] = res.best_lr
    tlog.config["val_acc_by_lr"] = {repr(k): v for k, v in res.val_acc_by_lr.items()}
    tlog.save(lay.finetune_log)
    up = {"encoder": lay.encoder, "train": lay.split("train"), "val": lay.split("val")}
    write_provenance(lay.hybrid, cfg, "finetune", up)
    write_provenance(lay.finetune_log, cfg, "finetune", up)
    return [lay.hybrid, lay.finetune_log]


def run_evaluate(cfg: PipelineConfig) -> list[Path]:
    lay = Layout(cfg)
    require(lay.hybrid, lay.split("test"))
    model = load_hybrid(lay.hybrid)
    _, ids, y = read_dataset(lay.split("test"))
    preds = predict(model, ids)
    report = evaluate(preds, y, model.n_classes, task=cfg.task.kind)
    lay.metrics.write_text(report.to_json() + "\n", encoding="utf-8")
    lay.metrics_table.write_text(report_render(report, "table", TASK_CLASSES[cfg.task.kind]), encoding="utf-8")
    write_provenance(lay.metrics, cfg, "evaluate", {"hybrid": lay.hybrid, "test": lay.split("test")})
    return [lay.metrics, lay.metrics_table]


# ---------------------------------------------------------------- parameter table

def parameter_table(config: enc.ModelConfig | None = None) -> dict:
    """Trainable counts for pretraining and every freeze policy x class count, built on the meta device."""
    config = config or enc.ModelConfig()
    model = enc.build_model(config, device="meta")
    out = {"pretrain": count_trainable(model)}
    half = config.n_layers // 2
    policies = {"all-frozen": 0, "last-1": 1, f"last-{half}": half, "all-unfrozen": config.n_layers}
    for label, n in policies.items():
        for k in (3, 4, 5):
            with torch.device("meta"):
                head = ClassifierHead(config.d_model, k)
            out[(label, k)] = count_trainable(model, FreezePolicy(n), head)
    return out


def trainable_count(config: enc.ModelConfig, freeze: FreezePolicy | None, n_classes_: int | None) -> int:
    model = enc.build_model(config, device="meta")
    head = None
    if freeze is not None:
        with torch.device("meta"):
            head = ClassifierHead(config.d_model, n_classes_ or 3)
    return count_trainable(model, freeze, head)


STAGES = {
    "synth": run_synth,
    "ingest": run_ingest,
    "train-quantizer": run_train_quantizer,
    "prepare-corpus": run_prepare_corpus,
    "train-tokenizer": run_train_tokenizer,
    "pretrain": run_pretrain,
    "prepare-task": run_prepare_task,
    "finetune": run_finetune,
    "evaluate": run_evaluate,
}
END_TO_END = ("synth", "ingest", "train-quantizer", "prepare-corpus", "train-tokenizer", "pretrain",
              "prepare-task", "finetune", "evaluate")
