"""Acceptance gate: one test per criterion, each at its stated tolerance.

Every test records a pass/fail line that the terminal summary prints at the
end of the run (see conftest.py), and also prints it directly.
"""

import shutil

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from heartbert.cli import main
from heartbert.encoder import ModelConfig, build_model, count_parameters, tiny_config
from heartbert.evaluation import evaluate
from heartbert.quantizer import DEFAULT_ALPHABET, encode_symbols, train_codebook
from heartbert.signal import normalize, resample, window
from heartbert.tasks import (EPOCH_SAMPLES, LabeledSegment, SleepEpoch, SynthProfile, balance_and_split,
                             beat_spans, prepare_sleep, synth_corpus)
from heartbert.tokenizer import EOS, N_SPECIALS, PAD, UNK, BOS, train_bpe
from heartbert.training import (IGNORE_INDEX, FinetuneOptions, FreezePolicy, PretrainOptions, build_hybrid,
                                finetune, make_adamw, mask_tokens, mlm_loss, pretrain)


class Checks:
    """Collects named sub-checks so a criterion reports everything that failed, not just the first."""

    def __init__(self):
        self.failed = []

    def __call__(self, ok, what):
        if not ok:
            self.failed.append(what)

    def finish(self, record, number, title, detail=""):
        passed = not self.failed
        info = detail if passed else "failed: " + "; ".join(self.failed)
        record(number, title, passed, info)
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({info})")
        assert passed, info


# ---------------------------------------------------------------- 1

TABLE = {
    "all-frozen": (1_510_915, 1_511_172, 1_511_429),
    "last-1": (8_598_787, 8_599_044, 8_599_301),
    "last-3": (22_774_531, 22_774_788, 22_775_045),
    "all-unfrozen": (44_038_147, 44_038_404, 44_038_661),
}


def test_criterion_1_parameter_counts(record_criterion):
    check = Checks()
    enc = build_model(ModelConfig(), device="meta")
    total = count_parameters(enc)
    check(total == 83_504_416, f"pretraining total {total:,}")
    five = build_model(ModelConfig(n_layers=5), device="meta")
    delta = total - count_parameters(five)
    check(delta == 7_087_872, f"per-layer delta {delta:,}")
    n_cells = 0
    for label, expected in TABLE.items():
        policy = FreezePolicy.parse(label)
        for k, want in zip((3, 4, 5), expected):
            hybrid = build_hybrid(enc, k, policy, device="meta")
            got = sum(p.numel() for p in hybrid.parameters() if p.requires_grad)
            check(got == want, f"{label}/{k} classes {got:,} != {want:,}")
            n_cells += got == want
    check.finish(record_criterion, 1, "parameter-count exactness",
                 f"total {total:,}, delta {delta:,}, {n_cells}/12 table cells exact")


# ---------------------------------------------------------------- 2

def test_criterion_2_lloyd_max(record_criterion):
    check = Checks()
    x = np.random.default_rng(0).uniform(0, 1, 1_000_000)
    cb = train_codebook(x, levels=4)
    err = float(np.max(np.abs(cb.centroids - [0.125, 0.375, 0.625, 0.875])))
    check(err <= 5e-3, f"uniform centroid error {err:.2e}")
    worst = -np.inf
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        kind = seed % 4
        n = int(rng.integers(2000, 20000))
        if kind == 0:
            data = rng.uniform(0, 1, n)
        elif kind == 1:
            data = rng.beta(rng.uniform(0.5, 5), rng.uniform(0.5, 5), n)
        elif kind == 2:
            data = np.clip(rng.normal(rng.uniform(0.2, 0.8), rng.uniform(0.02, 0.3), n), 0, 1)
        else:
            centres = rng.uniform(0, 1, rng.integers(2, 6))
            data = np.clip(rng.choice(centres, n) + rng.normal(0, 0.01, n), 0, 1)
        levels = int(rng.integers(2, 101))
        hist = np.array(train_codebook(data, levels=levels, seed=seed).history)
        rise = float(np.max(np.diff(hist))) if hist.size > 1 else -np.inf
        worst = max(worst, rise)
        check(rise <= 0.0, f"dataset {seed}: distortion rose by {rise:.3e}")
    check.finish(record_criterion, 2, "Lloyd-Max optimality",
                 f"max centroid error {err:.2e}, largest per-iteration change {worst:.2e} over 100 datasets")


# ---------------------------------------------------------------- 3

def test_criterion_3_tokenizer(record_criterion):
    check = Checks()
    alpha = DEFAULT_ALPHABET
    rng = np.random.default_rng(0)
    p = np.linspace(1, 4, len(alpha)) ** 3
    p /= p.sum()
    corpus = ["".join(rng.choice(list(alpha), size=int(rng.integers(200, 2000)), p=p)) for _ in range(60)]
    a = train_bpe(corpus, alpha, vocab_size=600, seed=0)
    b = train_bpe(corpus, alpha, vocab_size=600, seed=0)
    check(a.merges == b.merges and a.vocab_text() == b.vocab_text(), "merges differ between runs")

    bad_round = n_unk = 0
    for i in range(10_000):
        r = np.random.default_rng(i)
        text = "".join(r.choice(list(alpha), size=int(r.integers(0, 511))))
        seq = a.encode(text)
        bad_round += a.decode(seq.ids) != text or seq.overflow
        n_unk += int(np.count_nonzero(seq.ids == UNK))
    check(bad_round == 0, f"{bad_round} round-trip failures")
    check(n_unk == 0, f"{n_unk} UNK ids")

    law_fail = 0
    for i in range(200):
        r = np.random.default_rng(50_000 + i)
        text = "".join(r.choice(list(alpha), size=int(r.integers(0, 3000))))
        body = a.tokenize_ids(text)
        seq = a.encode(text)
        want = min(len(body), 510) + 2
        ok = len(seq) == want and seq.overflow == (len(body) > 510)
        ok &= seq.ids[0] == BOS and seq.ids[-1] == EOS and text.startswith(a.decode(seq.ids))
        pad_to = int(r.integers(len(seq), 513))
        padded = a.encode(text, pad_to=pad_to)
        ok &= len(padded) == pad_to and np.all(padded.ids[len(seq):] == PAD)
        ok &= int(padded.attention_mask.sum()) == len(seq)
        law_fail += not ok
    check(law_fail == 0, f"{law_fail} truncation/padding law violations")
    check.finish(record_criterion, 3, "tokenizer properties",
                 f"10,000 round trips exact, 0 UNK, {len(a.merges)} merges identical across runs")


# ---------------------------------------------------------------- 4

def test_criterion_4_gradients(record_criterion):
    check = Checks()
    model = build_model(tiny_config(), seed=1, dtype=torch.float64)
    ids = torch.tensor([[BOS, 5, 9, 13, 17, EOS, PAD, PAD], [BOS, 6, 7, 8, 19, 11, 12, EOS]])
    mask = (ids != PAD).long()
    mb = mask_tokens(ids.numpy(), mask.numpy(), p=0.5, strategy="always-mask", seed=3)
    labels = torch.as_tensor(mb.labels)
    inputs = torch.as_tensor(mb.input_ids)

    def loss_fn():
        return mlm_loss(model.mlm_logits(model(inputs, mask)), labels)

    loss_fn().backward()
    eps = 1e-4
    worst = 0.0
    zero_tensors = []
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        num = np.empty(flat.numel())
        for i in range(flat.numel()):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                lp = loss_fn().item()
                flat[i] = old - eps
                lm = loss_fn().item()
                flat[i] = old
            num[i] = (lp - lm) / (2 * eps)
        ana = p.grad.view(-1).numpy()
        if np.linalg.norm(ana) < 1e-15:
            # softmax ignores a shift shared by all keys, so the key bias has an exactly zero
            # gradient; relative error is undefined there and the difference must vanish instead
            zero_tensors.append(name)
            noise = float(np.max(np.abs(num)))
            check(noise <= 1e-9, f"{name}: zero analytic gradient but finite difference {noise:.2e}")
            continue
        rel = float(np.linalg.norm(num - ana) / (np.linalg.norm(num) + np.linalg.norm(ana)))
        worst = max(worst, rel)
        check(rel <= 1e-4, f"{name}: relative error {rel:.2e}")
    check(model.embeddings.word.weight.grad.abs().sum() > 0, "tied decoder received no gradient")
    check.finish(record_criterion, 4, "finite-difference gradients",
                 f"worst per-tensor relative error {worst:.2e} over "
                 f"{len(list(model.parameters())) - len(zero_tensors)} tensors; "
                 f"{len(zero_tensors)} exactly-zero key-bias gradients confirmed by finite differences")


# ---------------------------------------------------------------- 5

def test_criterion_5_masking(record_criterion):
    check = Checks()
    n = 100_000
    rng = np.random.default_rng(0)
    ids = rng.integers(N_SPECIALS, 1000, size=(1, n))
    # sprinkle specials and padding to confirm they are never selected
    special_pos = rng.choice(n, size=2000, replace=False)
    ids[0, special_pos] = rng.integers(0, N_SPECIALS, size=special_pos.size)
    eligible = np.count_nonzero(ids >= N_SPECIALS)
    masked = special_hits = 0
    for seed in range(10_000):
        mb = mask_tokens(ids, p=0.15, seed=seed, vocab_size=1000)
        sel = mb.labels != IGNORE_INDEX
        masked += int(np.count_nonzero(sel))
        special_hits += int(np.count_nonzero(sel[0, special_pos]))
    frac = masked / (eligible * 10_000)
    check(0.148 <= frac <= 0.152, f"masked fraction {frac:.5f}")
    check(special_hits == 0, f"{special_hits} special positions masked")

    torch.manual_seed(0)
    logits = torch.randn(4, 50, 30)
    mb = mask_tokens(np.random.default_rng(1).integers(N_SPECIALS, 30, (4, 50)), p=0.15, seed=2, vocab_size=30)
    other = logits.clone()
    other[torch.as_tensor(mb.labels) == IGNORE_INDEX] = torch.randn(int((mb.labels == IGNORE_INDEX).sum()), 30) * 100
    check(torch.equal(mlm_loss(logits, mb.labels), mlm_loss(other, mb.labels)), "loss depends on unmasked logits")
    check.finish(record_criterion, 5, "masking statistics",
                 f"pooled masked fraction {frac:.5f} over 10^4 seeds x 10^5 positions, specials never masked")


# ---------------------------------------------------------------- 6

def _synthetic_lm_corpus():
    recs = [normalize(resample(r.record, 360)) for r in synth_corpus(SynthProfile(n_records=4, duration_s=60, seed=1))]
    cb = train_codebook(np.concatenate([r.samples for r in recs]), 100)
    lines = [encode_symbols(w, cb).text for r in recs for w in window(r, 1000)]
    tok = train_bpe(lines, cb.alphabet, 300)
    return [tok.encode(ln) for ln in lines], tok.vocab_size


def _separable(n_per_class, seed, k=3):
    rng = np.random.default_rng(seed)
    ids, y = [], []
    for c in range(k):
        for _ in range(n_per_class):
            body = rng.integers(N_SPECIALS + 5 * c, N_SPECIALS + 5 * c + 5, size=rng.integers(3, 10))
            ids.append(np.concatenate([[BOS], body, [EOS]]))
            y.append(c)
    return ids, np.array(y)


@pytest.mark.slow
def test_criterion_6_learning_signal(record_criterion):
    check = Checks()
    # overfit one batch
    model = build_model(tiny_config(d_model=32, d_ff=64), seed=0)
    ids = np.array([[BOS, 5, 6, 7, 8, 9, 10, 11, 12, EOS]] * 4)
    mb = mask_tokens(ids, p=0.5, strategy="always-mask", seed=2)
    optim = make_adamw(model.parameters(), PretrainOptions(lr=3e-3))
    model.train()
    first = last = None
    for step in range(300):
        loss = mlm_loss(model.mlm_logits(model(mb.input_ids, mb.attention_mask)), mb.labels)
        optim.zero_grad()
        loss.backward()
        optim.step()
        first = loss.item() if first is None else first
        last = loss.item()
    check(last < 0.1, f"overfit loss {last:.4f}")

    # smoothed pretraining curve
    corpus, vocab = _synthetic_lm_corpus()
    cfg = tiny_config(d_model=32, d_ff=64, vocab_size=vocab, max_positions=514, dropout=0.1)
    _, log = pretrain(corpus, cfg, PretrainOptions(lr=1e-3, batch_size=8, epochs=20), seed=0)
    smooth = np.convolve(log.losses, np.ones(5) / 5, mode="valid")
    check(len(log.losses) == 20 and bool(np.all(np.diff(smooth) < 0)),
          f"smoothed loss not strictly decreasing: {np.round(smooth, 4).tolist()}")

    # separable fine-tuning task and frozen tensors
    enc = build_model(tiny_config(d_model=16, d_ff=32), seed=0)
    hybrid = build_hybrid(enc, 3, FreezePolicy.last(1), seed=0)
    before = {n: p.detach().clone() for n, p in hybrid.named_parameters()}
    res = finetune(hybrid, _separable(20, 0), _separable(10, 1),
                   FinetuneOptions(lrs=(5e-3,), batch_size=8, epochs=6), seed=0)
    check(res.best_val_acc > 0.9, f"separable val accuracy {res.best_val_acc:.3f}")
    trainable = res.model.trainable_names()
    changed = [n for n, p in res.model.named_parameters() if n not in trainable and not torch.equal(p, before[n])]
    check(not changed, f"frozen tensors changed: {changed[:3]}")
    check.finish(record_criterion, 6, "learning-signal checks",
                 f"overfit {first:.3f}->{last:.4f}; smoothed loss {smooth[0]:.3f}->{smooth[-1]:.3f}; "
                 f"val acc {res.best_val_acc:.3f}; frozen tensors identical")


# ---------------------------------------------------------------- 7

def test_criterion_7_dataset_arithmetic(record_criterion):
    check = Checks()
    totals = []
    for counts, task, want in (((31_030, 7_000, 63_600), "sleep3", 21_000),
                               ((31_030, 7_000, 18_140, 38_830, 6_630), "sleep5", 33_150)):
        segs = [LabeledSegment(c, task) for c, n in enumerate(counts) for _ in range(n)]
        got = sum(len(v) for v in balance_and_split(segs, seed=0).values())
        totals.append(got)
        check(got == want, f"{task} total {got} != {want}")
    segs = prepare_sleep([SleepEpoch(np.arange(EPOCH_SAMPLES, dtype=float), "S2")], "five")
    check(len(segs) == 10 and all(s.samples.size == 1080 for s in segs), "epoch segmentation")
    bad = 0
    for i in range(1000):
        r = np.random.default_rng(i)
        peaks = int(r.integers(3, 200))
        rp = np.cumsum(r.integers(2, 700, size=peaks)) + int(r.integers(0, 1000))
        sp = beat_spans(rp)
        ok = sp[0, 0] == (rp[0] + rp[1]) // 2 and sp[-1, 1] == (rp[-2] + rp[-1]) // 2
        ok &= bool(np.all(sp[1:, 0] == sp[:-1, 1])) and bool(np.all(sp[:, 1] > sp[:, 0]))
        covered = np.zeros(rp[-1] + 1, dtype=int)
        for a, b in sp:
            covered[a:b] += 1
        ok &= bool(np.all(covered[sp[0, 0]:sp[-1, 1]] == 1)) and covered.sum() == sp[-1, 1] - sp[0, 0]
        bad += not ok
    check(bad == 0, f"{bad} peak trains violate the partition property")
    check.finish(record_criterion, 7, "dataset arithmetic",
                 f"totals {totals[0]:,} and {totals[1]:,}; 10 x 1,080 segments; 1,000 peak trains partitioned")


# ---------------------------------------------------------------- 8

def test_criterion_8_metrics(record_criterion):
    check = Checks()
    worst = 0.0
    for i in range(1000):
        r = np.random.default_rng(i)
        k = int(r.integers(2, 8))
        n = int(r.integers(1, 500))
        y, pred = r.integers(0, k, n), r.integers(0, k, n)
        if i % 3 == 0:
            pred = np.where(r.random(n) < 0.7, y, pred)
        rep = evaluate(pred, y, k)
        acc = float(np.mean(pred == y))
        worst = max(worst, *(abs(rep.micro[m] - acc) for m in ("p", "r", "f1")), abs(rep.accuracy - acc))
    check(worst <= 1e-12, f"micro/accuracy gap {worst:.2e}")
    rep = evaluate([0, 1, 1, 1], [0, 0, 1, 1], 2)
    hand = {"acc": 0.75, "p0": 1.0, "r0": 0.5, "f0": 2 / 3, "p1": 2 / 3, "r1": 1.0, "f1": 0.8,
            "macro_f1": (2 / 3 + 0.8) / 2, "macro_p": (1 + 2 / 3) / 2, "macro_r": 0.75}
    got = {"acc": rep.accuracy, "p0": rep.per_class[0]["p"], "r0": rep.per_class[0]["r"], "f0": rep.per_class[0]["f1"],
           "p1": rep.per_class[1]["p"], "r1": rep.per_class[1]["r"], "f1": rep.per_class[1]["f1"],
           "macro_f1": rep.macro["f1"], "macro_p": rep.macro["p"], "macro_r": rep.macro["r"]}
    hand_err = max(abs(got[k] - v) for k, v in hand.items())
    check(hand_err <= 1e-12 and rep.confusion.tolist() == [[1, 1], [0, 2]], f"hand oracle error {hand_err:.2e}")
    check.finish(record_criterion, 8, "metrics identity",
                 f"max |micro - accuracy| {worst:.1e} over 1,000 sets; hand oracle error {hand_err:.1e}")


# ---------------------------------------------------------------- 9

E2E = ["run.seed=3", "synth.n_records=3", "synth.duration_s=30", "quantizer.levels=40",
       "tokenizer.vocab_size=120", "model.n_layers=2", "model.n_heads=2", "model.d_model=16", "model.d_ff=32",
       "model.vocab_size=120", "pretrain.epochs=2", "pretrain.batch_size=8", "pretrain.lr=1e-3",
       "finetune.lrs=5e-3", "finetune.epochs=2", "task.kind=heartbeat4"]


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_criterion_9_reproducibility(record_criterion, tmp_path):
    check = Checks()
    work = tmp_path / "work"
    args = ["run-all", "--set", f"paths.workdir={work}"] + [a for s in E2E for a in ("--set", s)]
    # same path both times so the recorded config (and its hash) is identical
    check(main(args) == 0, "first run failed")
    first = _snapshot(work)
    shutil.move(str(work), str(tmp_path / "first"))
    check(main(args) == 0, "second run failed")
    second = _snapshot(work)
    diff = sorted(k for k in set(first) | set(second) if first.get(k) != second.get(k))
    check(not diff, f"differing artifacts: {diff[:5]}")
    needed = {"codebook.hbq", "vocab.txt", "merges.txt", "encoder.hbck", "hybrid.hbck", "metrics.json"}
    check(needed <= set(first), f"missing artifacts {needed - set(first)}")
    check.finish(record_criterion, 9, "end-to-end reproducibility",
                 f"{len(first)} artifacts byte-identical across two runs")
