"""Byte-pair-encoding tokenizer over the synthetic ECG alphabet."""

from __future__ import annotations

import hashlib
import heapq
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import EmptyInputError, FormatError, MissingArtifactError, ParameterError, SymbolError, TokenIdError

BOS, PAD, EOS, UNK, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<s>", "<pad>", "</s>", "<unk>", "<mask>")
N_SPECIALS = len(SPECIAL_TOKENS)
DEFAULT_VOCAB_SIZE = 52_000
MAX_SEQ_LEN = 512


@dataclass
class TokenizedSequence:
    ids: np.ndarray
    attention_mask: np.ndarray
    overflow: bool = False

    def __len__(self):
        return self.ids.size


class BpeTokenizer:
    """Learned merges plus id tables. Specials occupy ids 0..4."""

    def __init__(self, alphabet: str, merges: list[tuple[str, str]] | None = None,
                 max_seq_len: int = MAX_SEQ_LEN):
        if len(set(alphabet)) != len(alphabet):
            raise ParameterError("alphabet characters must be unique")
        self.alphabet = alphabet
        self.max_seq_len = max_seq_len
        self.id_to_token: list[str] = list(SPECIAL_TOKENS) + list(alphabet)
        # specials live outside this map so a learned token that happens to
        # spell "<s>" never aliases BOS
        self.token_to_id: dict[str, int] = {ch: N_SPECIALS + i for i, ch in enumerate(alphabet)}
        self.merges: list[tuple[str, str]] = []
        self.merge_ranks: dict[tuple[int, int], tuple[int, int]] = {}
        for left, right in merges or []:
            self._add_merge(left, right)

    def _add_merge(self, left: str, right: str) -> int:
        try:
            a, b = self.token_to_id[left], self.token_to_id[right]
        except KeyError as exc:
            raise FormatError(f"merge references unknown token {exc.args[0]!r}") from None
        merged = left + right
        new_id = self.token_to_id.get(merged)
        if new_id is None:
            new_id = len(self.id_to_token)
            self.id_to_token.append(merged)
            self.token_to_id[merged] = new_id
        if (a, b) not in self.merge_ranks:
            self.merge_ranks[(a, b)] = (len(self.merges), new_id)
        self.merges.append((left, right))
        return new_id

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    # -------------------------------------------------------------- encoding

    def _char_ids(self, text: str) -> list[int]:
        t2i = self.token_to_id
        try:
            return [t2i[ch] for ch in text]
        except KeyError as exc:
            raise SymbolError(f"character {exc.args[0]!r} is not in the tokenizer alphabet") from None

    def tokenize_ids(self, text: str) -> list[int]:
        """Body token ids of ``text`` (no specials, no truncation)."""
        sym = self._char_ids(text)
        n = len(sym)
        if n < 2 or not self.merge_ranks:
            return sym
        ranks = self.merge_ranks
        nxt = list(range(1, n)) + [-1]
        prv = list(range(-1, n - 1))
        alive = [True] * n
        heap = []
        for i in range(n - 1):
            r = ranks.get((sym[i], sym[i + 1]))
            if r is not None:
                heap.append((r[0], i, sym[i], sym[i + 1]))
        heapq.heapify(heap)
        while heap:
            rank, i, a, b = heapq.heappop(heap)
            j = nxt[i] if alive[i] else -1
            if j < 0 or sym[i] != a or sym[j] != b:
                continue
            sym[i] = ranks[(a, b)][1]
            alive[j] = False
            k = nxt[j]
            nxt[i] = k
            if k >= 0:
                prv[k] = i
                r = ranks.get((sym[i], sym[k]))
                if r is not None:
                    heapq.heappush(heap, (r[0], i, sym[i], sym[k]))
            p = prv[i]
            if p >= 0:
                r = ranks.get((sym[p], sym[i]))
                if r is not None:
                    heapq.heappush(heap, (r[0], p, sym[p], sym[i]))
        out, i = [], 0
        while i >= 0:
            out.append(sym[i])
            i = nxt[i]
        return out

    def encode(self, text: str, pad_to: int | None = None) -> TokenizedSequence:
        body = self.tokenize_ids(text)
        limit = self.max_seq_len - 2
        overflow = len(body) > limit
        ids = [BOS] + body[:limit] + [EOS]
        mask = [1] * len(ids)
        if pad_to is not None:
            if pad_to > self.max_seq_len:
                raise ParameterError(f"pad_to {pad_to} exceeds max_seq_len {self.max_seq_len}")
            extra = max(0, pad_to - len(ids))
            ids += [PAD] * extra
            mask += [0] * extra
        return TokenizedSequence(np.array(ids, dtype=np.int64), np.array(mask, dtype=np.int64), overflow)

    def decode(self, ids) -> str:
        parts = []
        n = len(self.id_to_token)
        for i in np.asarray(ids, dtype=np.int64).ravel().tolist():
            if not 0 <= i < n:
                raise TokenIdError(f"unknown token id {i}")
            if i >= N_SPECIALS:
                parts.append(self.id_to_token[i])
        return "".join(parts)

    def token_stats(self) -> dict:
        lengths = np.array([len(t) for t in self.id_to_token[N_SPECIALS:]])
        return {"min_len": int(lengths.min()), "max_len": int(lengths.max()),
                "mean_len": float(lengths.mean()), "n_tokens": int(lengths.size)}

    # ---------------------------------------------------------- persistence

    def vocab_text(self) -> str:
        lines = [f"HBT v1 vocab={self.vocab_size}"]
        lines += [f"{tok}\t{i}" for i, tok in enumerate(self.id_to_token)]
        return "\n".join(lines) + "\n"

    def merges_text(self) -> str:
        lines = [f"HBT v1 vocab={self.vocab_size}"]
        lines += [f"{a}\t{b}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    def save(self, vocab_path, merges_path) -> None:
        Path(vocab_path).write_text(self.vocab_text(), encoding="utf-8")
        Path(merges_path).write_text(self.merges_text(), encoding="utf-8")

    def sha256(self) -> str:
        h = hashlib.sha256(self.vocab_text().encode("utf-8"))
        h.update(self.merges_text().encode("utf-8"))
        return h.hexdigest()

    @classmethod
    def load(cls, vocab_path, merges_path, max_seq_len: int = MAX_SEQ_LEN) -> "BpeTokenizer":
        for p in (vocab_path, merges_path):
            if not Path(p).exists():
                raise MissingArtifactError(f"missing tokenizer file: {p}")
        vlines = Path(vocab_path).read_text(encoding="utf-8").split("\n")
        mlines = Path(merges_path).read_text(encoding="utf-8").split("\n")
        n = _parse_header(vlines[0])
        if _parse_header(mlines[0]) != n:
            raise FormatError("vocab and merges headers disagree on vocab size")
        table = []
        for ln in vlines[1:]:
            if ln:
                tok, _, idx = ln.rpartition("\t")
                table.append((int(idx), tok))
        table.sort()
        if [i for i, _ in table] != list(range(n)):
            raise FormatError("vocab ids are not dense")
        if tuple(t for _, t in table[:N_SPECIALS]) != SPECIAL_TOKENS:
            raise FormatError("special tokens missing or out of place")
        # base alphabet = the leading run of single characters after the specials
        alphabet = []
        for _, tok in table[N_SPECIALS:]:
            if len(tok) != 1 or tok in alphabet:
                break
            alphabet.append(tok)
        merges = []
        for ln in mlines[1:]:
            if ln:
                left, sep, right = ln.partition("\t")
                if not sep:
                    raise FormatError(f"bad merge line {ln!r}")
                merges.append((left, right))
        tok = cls("".join(alphabet), merges, max_seq_len)
        if tok.id_to_token != [t for _, t in table]:
            raise FormatError("replaying merges does not reproduce the stored vocab")
        return tok


def _parse_header(line: str) -> int:
    if not line.startswith("HBT v1 vocab="):
        raise FormatError(f"bad tokenizer header {line!r}")
    return int(line[len("HBT v1 vocab="):])


def train_bpe(corpus: Iterable[str], alphabet: str, vocab_size: int = DEFAULT_VOCAB_SIZE,
              seed: int = 0, max_seq_len: int = MAX_SEQ_LEN) -> BpeTokenizer:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Pair counts are maintained incrementally over a linked list of symbols, so
    each merge touches only the occurrences it rewrites. Ties on frequency go
    to the lexicographically smallest concatenation, then the smallest left
    token. ``seed`` is accepted for provenance only; training is deterministic.
    """
    del seed
    tok = BpeTokenizer(alphabet, max_seq_len=max_seq_len)
    if vocab_size < tok.vocab_size:
        raise ParameterError(f"vocab_size {vocab_size} < specials + alphabet ({tok.vocab_size})")

    sym: list[int] = []
    nxt: list[int] = []
    prv: list[int] = []
    n_lines = 0
    for line in corpus:
        text = line.text if hasattr(line, "text") else line
        text = text.rstrip("\n")
        n_lines += 1
        ids = tok._char_ids(text)
        base = len(sym)
        sym.extend(ids)
        m = len(ids)
        nxt.extend(range(base + 1, base + m))
        if m:
            nxt.append(-1)
            prv.append(-1)
            prv.extend(range(base, base + m - 1))
    if n_lines == 0 or not sym:
        raise EmptyInputError("tokenizer corpus is empty")

    alive = bytearray(b"\x01") * len(sym)
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for i, j in enumerate(nxt):
        if j >= 0:
            where[(sym[i], sym[j])].add(i)

    names = tok.id_to_token
    heap = [(-len(pos), names[a] + names[b], names[a], a, b) for (a, b), pos in where.items()]
    heapq.heapify(heap)

    def touch(pair):
        a, b = pair
        cnt = len(where.get(pair, ()))
        if cnt:
            heapq.heappush(heap, (-cnt, names[a] + names[b], names[a], a, b))

    while tok.vocab_size < vocab_size and heap:
        negc, _, _, a, b = heapq.heappop(heap)
        pair = (a, b)
        occ = where.get(pair)
        if not occ or len(occ) != -negc:
            continue
        if -negc < 2:
            break
        new_id = tok._add_merge(names[a], names[b])
        names = tok.id_to_token
        changed = set()
        for i in sorted(occ):
            if not alive[i] or sym[i] != a:
                continue
            j = nxt[i]
            if j < 0 or sym[j] != b:
                continue
            p, k = prv[i], nxt[j]
            where[pair].discard(i)
            if p >= 0:
                where[(sym[p], a)].discard(p)
                changed.add((sym[p], a))
            if k >= 0:
                where[(b, sym[k])].discard(j)
                changed.add((b, sym[k]))
            sym[i] = new_id
            alive[j] = 0
            nxt[i] = k
            if k >= 0:
                prv[k] = i
                where[(new_id, sym[k])].add(i)
                changed.add((new_id, sym[k]))
            if p >= 0:
                where[(sym[p], new_id)].add(p)
                changed.add((sym[p], new_id))
        del where[pair]
        changed.discard(pair)
        for c in changed:
            if c in where and not where[c]:
                del where[c]
            touch(c)
    return tok


def collate(seqs: list[TokenizedSequence], pad_to: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequences into (ids, mask) arrays padded to the longest (or ``pad_to``)."""
    width = max(len(s) for s in seqs)
    if pad_to is not None:
        width = max(width, pad_to)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, :len(s)] = s.ids
        mask[r, :len(s)] = s.attention_mask
    return ids, mask
