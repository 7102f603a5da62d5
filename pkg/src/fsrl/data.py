"""Character tokenizer, toy corpus grammar and synthetic preference triplets.

Every document has the shape ``word=`` + response, where the response wraps
the word in delimiters: ``abc=[abc].``. Delimiters and the terminator are the
*style* tokens; the copied letters are *content*. A good response uses the
``[`` ``]`` ``.`` style and copies the word exactly. Rejected responses swap
style tokens for ``(`` ``)`` ``!`` and/or perturb copied letters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ALPHABET = " abcdefghijklmnopqrstuvwxyz[](){}<>=:;.,!?|"
PAD_ID = 0
STOI = {c: i for i, c in enumerate(ALPHABET)}

# (good, bad) character per style slot: open, close, terminator
STYLE_SLOTS = (("[", "("), ("]", ")"), (".", "!"))
SEPARATOR = "="
CLASSES = ("style", "content", "other")


def vocab_size() -> int:
    return len(ALPHABET)


def encode(text: str) -> np.ndarray:
    try:
        return np.array([STOI[c] for c in text], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"character {exc.args[0]!r} is outside the alphabet") from None


def decode(ids: Iterable[int]) -> str:
    return "".join(ALPHABET[int(i)] for i in ids)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus a per-token role: True for response tokens, False for prompt."""

    tokens: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        response = np.asarray(self.response, dtype=bool)
        if tokens.ndim != 1 or tokens.shape != response.shape:
            raise ValueError(f"tokens {tokens.shape} and role mask {response.shape} must be equal-length 1-D")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size()):
            raise ValueError("token id outside vocabulary")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "response", response)

    @classmethod
    def from_text(cls, prompt: str, response: str) -> "TokenSequence":
        ids = encode(prompt + response)
        roles = np.zeros(ids.size, dtype=bool)
        roles[len(prompt):] = True
        return cls(ids, roles)

    @property
    def roles(self) -> list[str]:
        return ["response" if r else "prompt" for r in self.response]

    @property
    def n_response(self) -> int:
        return int(self.response.sum())

    def __len__(self) -> int:
        return int(self.tokens.size)


@dataclass(frozen=True)
class Batch:
    tokens: np.ndarray  # [B, T] int, right-padded with PAD_ID
    response: np.ndarray  # [B, T] bool
    valid: np.ndarray  # [B, T] bool, False on padding


def pad_batch(seqs: Sequence[TokenSequence]) -> Batch:
    if not seqs:
        raise ValueError("empty batch")
    T = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), T), PAD_ID, dtype=np.int64)
    response = np.zeros((len(seqs), T), dtype=bool)
    valid = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        tokens[i, :n] = s.tokens
        response[i, :n] = s.response
        valid[i, :n] = True
    return Batch(tokens, response, valid)


@dataclass(frozen=True)
class DataSpec:
    letters: str = "abcdefghijkl"
    min_len: int = 3
    max_len: int = 6
    style_corruption_rate: float = 0.5
    content_corruption_rate: float = 0.2
    corpus_bad_style_prob: float = 0.7
    corpus_noise_rate: float = 0.1

    def validate(self) -> None:
        if len(set(self.letters)) != len(self.letters) or len(self.letters) < 2:
            raise ValueError("letters must be >= 2 distinct characters")
        if any(c not in STOI or not c.isalpha() for c in self.letters):
            raise ValueError("letters must be lowercase alphabet characters")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        for name in ("style_corruption_rate", "content_corruption_rate", "corpus_bad_style_prob", "corpus_noise_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.style_corruption_rate == 0 and self.content_corruption_rate == 0:
            raise ValueError("both corruption rates are 0: chosen would equal rejected")


@dataclass(frozen=True)
class PreferenceTriplet:
    prompt: str
    chosen: str
    rejected: str
    prompt_labels: tuple[str, ...]
    response_labels: tuple[str, ...]
    corruptions: tuple[tuple[int, str], ...] = field(default=())

    def __post_init__(self):
        if not self.chosen or not self.rejected:
            raise ValueError("chosen and rejected must be non-empty")
        if self.chosen == self.rejected:
            raise ValueError("chosen equals rejected")

    def sequences(self) -> tuple[TokenSequence, TokenSequence]:
        return TokenSequence.from_text(self.prompt, self.chosen), TokenSequence.from_text(self.prompt, self.rejected)

    def labels(self) -> list[str]:
        return list(self.prompt_labels) + list(self.response_labels)

    def to_record(self) -> dict:
        return {
            "prompt": self.prompt,
            "chosen": self.chosen,
            "rejected": self.rejected,
            "labels": {"prompt": list(self.prompt_labels), "response": list(self.response_labels)},
            "corruptions": [list(c) for c in self.corruptions],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PreferenceTriplet":
        return cls(
            prompt=rec["prompt"],
            chosen=rec["chosen"],
            rejected=rec["rejected"],
            prompt_labels=tuple(rec["labels"]["prompt"]),
            response_labels=tuple(rec["labels"]["response"]),
            corruptions=tuple((int(p), str(c)) for p, c in rec.get("corruptions", [])),
        )


def _word(rng: np.random.Generator, spec: DataSpec) -> str:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    return "".join(spec.letters[i] for i in rng.integers(0, len(spec.letters), size=n))


def _other_letter(rng: np.random.Generator, spec: DataSpec, c: str) -> str:
    choices = [x for x in spec.letters if x != c]
    return choices[int(rng.integers(0, len(choices)))]


def _response_labels(n: int) -> tuple[str, ...]:
    return ("style",) + ("content",) * n + ("style", "style")


def gen_preference_data(seed: int | np.random.Generator, n: int, spec: DataSpec | None = None) -> list[PreferenceTriplet]:
    """Synthesize ``n`` triplets; chosen is well styled and correct, rejected is corrupted.

    With probability ``style_corruption_rate`` the rejected response switches
    all three style slots to the alternate style (a consistent but dispreferred
    format); each response letter is independently replaced with probability
    ``content_corruption_rate``. If nothing fires, one of the two corruption
    kinds is forced so chosen never equals rejected.
    """
    spec = spec or DataSpec()
    spec.validate()
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for _ in range(n):
        word = _word(rng, spec)
        L = len(word)
        prompt = word + SEPARATOR
        chosen = list(STYLE_SLOTS[0][0] + word + STYLE_SLOTS[1][0] + STYLE_SLOTS[2][0])
        rejected = list(chosen)
        labels = _response_labels(L)
        style_pos = (0, L + 1, L + 2)
        bad = {0: STYLE_SLOTS[0][1], L + 1: STYLE_SLOTS[1][1], L + 2: STYLE_SLOTS[2][1]}
        style_hit = bool(rng.random() < spec.style_corruption_rate)
        content_hits = rng.random(L) < spec.content_corruption_rate
        if not style_hit and not content_hits.any():
            site = int(rng.integers(0, 1 + L))
            if site == 0:
                style_hit = True
            else:
                content_hits[site - 1] = True
        corruptions = []
        if style_hit:
            for pos in style_pos:
                rejected[pos] = bad[pos]
                corruptions.append((pos, "style"))
        for k in range(L):
            if content_hits[k]:
                rejected[1 + k] = _other_letter(rng, spec, word[k])
                corruptions.append((1 + k, "content"))
        corruptions.sort()
        out.append(
            PreferenceTriplet(
                prompt=prompt,
                chosen="".join(chosen),
                rejected="".join(rejected),
                prompt_labels=("content",) * L + ("other",),
                response_labels=labels,
                corruptions=tuple(corruptions),
            )
        )
    return out


def gen_corpus(seed: int | np.random.Generator, n_docs: int, spec: DataSpec | None = None) -> list[str]:
    """Pretraining documents: style chosen per document, letters copied with noise."""
    spec = spec or DataSpec()
    spec.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        word = _word(rng, spec)
        col = 1 if rng.random() < spec.corpus_bad_style_prob else 0
        copy = "".join(
            _other_letter(rng, spec, c) if rng.random() < spec.corpus_noise_rate else c for c in word
        )
        docs.append(word + SEPARATOR + STYLE_SLOTS[0][col] + copy + STYLE_SLOTS[1][col] + STYLE_SLOTS[2][col])
    return docs


def corpus_sequences(docs: Iterable[str]) -> list[TokenSequence]:
    """Whole documents as sequences; the part after the separator is the response."""
    out = []
    for doc in docs:
        cut = doc.index(SEPARATOR) + 1 if SEPARATOR in doc else len(doc)
        out.append(TokenSequence.from_text(doc[:cut], doc[cut:]))
    return out


def write_corpus(path: str | Path, docs: Sequence[str]) -> None:
    Path(path).write_text("".join(d + "\n" for d in docs), encoding="utf-8")


def read_corpus(path: str | Path) -> list[str]:
    docs = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    if not docs:
        raise ValueError(f"corpus {path} is empty")
    return docs


def write_dataset(path: str | Path, triplets: Sequence[PreferenceTriplet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps(t.to_record(), sort_keys=True) + "\n")


def read_dataset(path: str | Path) -> list[PreferenceTriplet]:
    with open(path, encoding="utf-8") as fh:
        return [PreferenceTriplet.from_record(json.loads(line)) for line in fh if line.strip()]
