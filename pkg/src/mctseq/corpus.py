"""Token inventories, id-sequence encoding, and parallel-corpus handling.

Everything here is immutable after construction and safe to share across
concurrent search workers.
"""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
NUM_SPECIALS = len(SPECIAL_TOKENS)


@dataclass(frozen=True)
class Vocab:
    """Dense token inventory. Ids 0..3 are PAD/BOS/EOS/UNK, always present."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIALS]) != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the four special tokens")
        object.__setattr__(self, "_id_of", {t: i for i, t in enumerate(self.tokens)})
        if len(self._id_of) != len(self.tokens):
            raise ValueError("duplicate token in vocab")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._id_of.get(token, UNK_ID)

    def encode(self, words) -> list[int]:
        """Map strings to ids; unknown words become UNK. Length preserved."""
        return [self._id_of.get(w, UNK_ID) for w in words]

    def decode(self, ids) -> list[str]:
        """Inverse of encode on in-vocab tokens; specials render as '<pad>' etc."""
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise ValueError(f"id out of range: {i}")
            out.append(self.tokens[i])
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256("\n".join(self.tokens).encode("utf-8"))
        return h.hexdigest()[:16]


def build_vocab(sentences, max_size: int) -> Vocab:
    """Vocab of the four specials plus the most frequent tokens.

    Frequency ties break lexicographically. max_size bounds the total size,
    specials included.
    """
    if max_size < NUM_SPECIALS + 1:
        raise ValueError("max_size must be at least 5")
    counts: Counter[str] = Counter()
    for sent in sentences:
        counts.update(sent)
    if not counts:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - NUM_SPECIALS]]
    return Vocab(SPECIAL_TOKENS + tuple(kept))


@dataclass(frozen=True)
class SentencePair:
    """Source ids (no BOS/EOS) and reference ids ending in EOS."""

    src: tuple[int, ...]
    ref: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "src", tuple(self.src))
        object.__setattr__(self, "ref", tuple(self.ref))
        if not self.ref or self.ref[-1] != EOS_ID:
            raise ValueError("ref must be non-empty and end in EOS")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Mirror-substitution toy task: each source token maps through a seeded
    bijection, emitted in `reorder` order, with EOS appended."""

    src_vocab_size: int
    min_len: int
    max_len: int
    mapping_seed: int = 0
    reorder: str = "reverse"  # or "identity"

    def __post_init__(self):
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.src_vocab_size < 1:
            raise ValueError("src_vocab_size must be positive")
        if self.reorder not in ("reverse", "identity"):
            raise ValueError(f"unknown reorder: {self.reorder}")


def synthetic_vocab(spec: SyntheticTaskSpec) -> Vocab:
    """Deterministic vocab for a synthetic task: specials + w0..w{n-1}."""
    return Vocab(SPECIAL_TOKENS + tuple(f"w{i}" for i in range(spec.src_vocab_size)))


def token_mapping(spec: SyntheticTaskSpec) -> dict[int, int]:
    """The seeded bijection on source token ids (ids 4..4+n-1)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.mapping_seed, spec.src_vocab_size]))
    ids = np.arange(NUM_SPECIALS, NUM_SPECIALS + spec.src_vocab_size)
    image = rng.permutation(ids)
    return {int(a): int(b) for a, b in zip(ids, image)}

def gen_synthetic(spec: SyntheticTaskSpec, n: int, seed: int) -> list[SentencePair]:
    """n random pairs; pure function of (spec, n, seed)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, spec.mapping_seed, n]))
    mapping = token_mapping(spec)
    lo, hi = NUM_SPECIALS, NUM_SPECIALS + spec.src_vocab_size
    pairs = []
    for _ in range(n):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = tuple(int(t) for t in rng.integers(lo, hi, size=length))
        ordered = src[::-1] if spec.reorder == "reverse" else src
        ref = tuple(mapping[t] for t in ordered) + (EOS_ID,)
        pairs.append(SentencePair(src, ref))
    return pairs


def load_parallel(src_path, tgt_path, vocab: Vocab) -> list[SentencePair]:
    """Read two line-aligned whitespace-tokenized files; EOS appended to targets."""
    with open(src_path, encoding="utf-8") as f:
        src_lines = f.read().splitlines()
    with open(tgt_path, encoding="utf-8") as f:
        tgt_lines = f.read().splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValueError(
            f"line count mismatch: {src_path} has {len(src_lines)}, {tgt_path} has {len(tgt_lines)}"
        )
    pairs = []
    for s, t in zip(src_lines, tgt_lines):
        src = tuple(vocab.encode(s.split()))
        ref = tuple(vocab.encode(t.split())) + (EOS_ID,)
        pairs.append(SentencePair(src, ref))
    return pairs


def save_dataset(pairs, path) -> None:
    """One pair per line: space-separated src ids, TAB, space-separated ref ids."""
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(" ".join(map(str, p.src)) + "\t" + " ".join(map(str, p.ref)) + "\n")


def load_dataset(path) -> list[SentencePair]:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                src_part, ref_part = line.split("\t")
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'src TAB ref'") from None
            src = tuple(int(x) for x in src_part.split()) if src_part else ()
            ref = tuple(int(x) for x in ref_part.split())
            pairs.append(SentencePair(src, ref))
    return pairs
