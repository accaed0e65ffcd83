"""Byte-level BPE tokenizer reading GPT-2 style ``vocab.json`` + ``merges.txt``."""

from __future__ import annotations

import json
from collections import Counter
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import regex as re

# GPT-2 pre-tokenization pattern
PAT = re.compile(r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+""")

DEFAULT_BOS = "<|endoftext|>"


@lru_cache(maxsize=1)
def bytes_to_unicode() -> dict[int, str]:
    """Reversible map from bytes to printable unicode characters (the GPT-2 table)."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


class TokenizerError(ValueError):
    pass


class Tokenizer:
    def __init__(
        self,
        vocab: dict[str, int],
        merges: list[tuple[str, str]],
        bos_token: str | None = DEFAULT_BOS,
        add_bos: bool = True,
    ):
        self.vocab = dict(vocab)
        self.id_to_token = {i: t for t, i in self.vocab.items()}
        if len(self.id_to_token) != len(self.vocab):
            raise TokenizerError("vocabulary ids are not unique")
        self.merges = list(merges)
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        if bos_token is not None and bos_token not in self.vocab:
            raise TokenizerError(f"bos token {bos_token!r} not in vocabulary")
        self.bos_token = bos_token
        self.add_bos = add_bos and bos_token is not None
        self.special_ids = {self.vocab[bos_token]} if bos_token is not None else set()
        self._byte_enc = bytes_to_unicode()
        self._byte_dec = {c: b for b, c in self._byte_enc.items()}
        self._cache: dict[str, tuple[str, ...]] = {}

    @property
    def bos_token_id(self) -> int | None:
        return None if self.bos_token is None else self.vocab[self.bos_token]

    @property
    def vocab_size(self) -> int:
        return max(self.id_to_token) + 1

    def _bpe(self, word: str) -> tuple[str, ...]:
        if word in self._cache:
            return self._cache[word]
        parts = list(word)
        while len(parts) > 1:
            best = min(
                ((self.ranks.get(p, None), i) for i, p in enumerate(zip(parts, parts[1:]))),
                key=lambda x: (x[0] is None, x[0] if x[0] is not None else 0),
            )
            if best[0] is None:
                break
            a, b = self.merges[best[0]]
            merged = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and parts[i] == a and parts[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        out = tuple(parts)
        self._cache[word] = out
        return out

    def tokenize(self, text: str | bytes) -> list[str]:
        if isinstance(text, bytes):
            text = text.decode("utf-8", errors="surrogateescape")
        pieces = []
        for chunk in PAT.findall(text):
            mapped = "".join(self._byte_enc[b] for b in chunk.encode("utf-8", errors="surrogateescape"))
            pieces.extend(self._bpe(mapped))
        return pieces

    def encode(self, text: str | bytes, add_bos: bool | None = None) -> list[int]:
        ids = [self.bos_token_id] if (self.add_bos if add_bos is None else add_bos) else []
        for piece in self.tokenize(text):
            try:
                ids.append(self.vocab[piece])
            except KeyError:
                raise TokenizerError(f"token {piece!r} missing from vocabulary") from None
        return ids

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        out = bytearray()
        for i in ids:
            i = int(i)
            if i not in self.id_to_token:
                raise TokenizerError(f"unknown token id {i}")
            if i in self.special_ids:
                continue
            out.extend(self._byte_dec[c] for c in self.id_to_token[i])
        return bytes(out)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def token_str(self, i: int) -> str:
        """Human-readable form of one token."""
        i = int(i)
        if i in self.special_ids:
            return self.id_to_token[i]
        return self.decode([i])

    def piece(self, i: int) -> str:
        """Vocabulary entry for one token, byte-level encoded so always printable."""
        return self.id_to_token[int(i)]

    def first_token(self, word: str) -> int:
        """Id of the first sub-token of ``word`` (no bos)."""
        ids = self.encode(word, add_bos=False)
        if not ids:
            raise TokenizerError(f"{word!r} encodes to no tokens")
        return ids[0]

    # -- files ---------------------------------------------------------------

    @classmethod
    def from_files(cls, vocab_path, merges_path, bos_token: str | None = DEFAULT_BOS, add_bos: bool = True) -> "Tokenizer":
        vocab = json.loads(Path(vocab_path).read_text(encoding="utf-8"))
        merges = []
        for line in Path(merges_path).read_text(encoding="utf-8").splitlines():
            if not line.strip() or line.startswith("#version"):
                continue
            a, b = line.split(" ")
            merges.append((a, b))
        if bos_token is not None and bos_token not in vocab:
            bos_token = None
        return cls(vocab, merges, bos_token=bos_token, add_bos=add_bos)

    @classmethod
    def from_dir(cls, path) -> "Tokenizer":
        path = Path(path)
        opts = {}
        cfg = path / "tokenizer_config.json"
        if cfg.exists():
            raw = json.loads(cfg.read_text())
            opts = {k: raw[k] for k in ("bos_token", "add_bos") if k in raw}
        return cls.from_files(path / "vocab.json", path / "merges.txt", **opts)

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "vocab.json").write_text(json.dumps(self.vocab, ensure_ascii=False, indent=0, sort_keys=True), encoding="utf-8")
        lines = ["#version: 0.2"] + [f"{a} {b}" for a, b in self.merges]
        (path / "merges.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        (path / "tokenizer_config.json").write_text(
            json.dumps({"bos_token": self.bos_token, "add_bos": self.add_bos}, indent=2) + "\n"
        )


def train_bpe(
    corpus: Iterable[str],
    n_merges: int,
    force: Iterable[str] = (),
    bos_token: str = DEFAULT_BOS,
) -> Tokenizer:
    """Train a small byte-level BPE vocabulary.

    Strings in ``force`` (e.g. ``" woman"``) are guaranteed to encode as single
    tokens: their merges are placed first. Ties between equally frequent pairs
    break lexicographically, so training is deterministic.
    """
    enc = bytes_to_unicode()
    vocab = {enc[b]: i for i, b in enumerate(sorted(enc))}
    merges: list[tuple[str, str]] = []

    def add_merge(a: str, b: str) -> None:
        if (a, b) in merges:
            return
        merges.append((a, b))
        if a + b not in vocab:
            vocab[a + b] = len(vocab)

    for word in force:
        parts = [enc[b] for b in word.encode("utf-8")]
        acc = parts[0]
        for nxt in parts[1:]:
            add_merge(acc, nxt)
            acc += nxt

    tok = Tokenizer(dict(vocab), list(merges), bos_token=None)
    counts: Counter[tuple[str, ...]] = Counter()
    for text in corpus:
        for chunk in PAT.findall(text):
            mapped = "".join(enc[b] for b in chunk.encode("utf-8"))
            counts[tok._bpe(mapped)] += 1

    words = dict(counts)
    for _ in range(n_merges):
        pairs: Counter[tuple[str, str]] = Counter()
        for w, c in words.items():
            for p in zip(w, w[1:]):
                pairs[p] += c
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        add_merge(*best)
        a, b = best
        new_words: dict[tuple[str, ...], int] = {}
        for w, c in words.items():
            out, i = [], 0
            while i < len(w):
                if i < len(w) - 1 and w[i] == a and w[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            key = tuple(out)
            new_words[key] = new_words.get(key, 0) + c
        words = new_words

    vocab[bos_token] = len(vocab)
    return Tokenizer(vocab, merges, bos_token=bos_token, add_bos=True)
