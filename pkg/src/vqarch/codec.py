"""Code sequences as text: "generate:" / "fill:" tasks with [tok-i] sentinels."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

GENERATE = "generate:"
FILL = "fill:"
_SENTINEL = re.compile(r"^\[tok-(\d+)\]$")

CodeSequence = tuple[int, ...]


def sentinel(i: int) -> str:
    return f"[tok-{i}]"


def sentinel_index(token: str) -> int | None:
    m = _SENTINEL.match(token)
    return int(m.group(1)) if m else None


@dataclass(frozen=True)
class ParseError:
    kind: str  # wrong_length | non_numeric | out_of_range
    text: str
    detail: str = ""

    KINDS = ("wrong_length", "non_numeric", "out_of_range")

    def __bool__(self) -> bool:
        return False


ParseResult = Union[CodeSequence, ParseError]


def is_sequence(result: ParseResult) -> bool:
    return not isinstance(result, ParseError)


def to_sentence(seq: Sequence[int]) -> str:
    return " ".join(str(int(i)) for i in seq)


def parse_sequence(text: str, n_positions: int, codebook_size: int) -> ParseResult:
    tokens = text.split()
    values = []
    for tok in tokens:
        if not tok.isdigit() or not tok.isascii():
            return ParseError("non_numeric", text, f"token {tok!r}")
        values.append(int(tok))
    if len(values) != n_positions:
        return ParseError("wrong_length", text, f"{len(values)} values, expected {n_positions}")
    for v in values:
        if v >= codebook_size:
            return ParseError("out_of_range", text, f"{v} >= {codebook_size}")
    return tuple(values)


@dataclass(frozen=True)
class MaskedExample:
    input_text: str
    target_text: str
    mask_positions: tuple[int, ...]


def mask_sequence(seq: Sequence[int], positions: Iterable[int]) -> MaskedExample:
    positions = tuple(sorted(set(int(p) for p in positions)))
    tokens = [str(int(v)) for v in seq]
    target = []
    for k, pos in enumerate(positions):
        target += [sentinel(k), tokens[pos]]
        tokens[pos] = sentinel(k)
    return MaskedExample(f"{FILL} " + " ".join(tokens), " ".join(target), positions)


def make_fill_example(seq: Sequence[int], rng: np.random.Generator) -> MaskedExample:
    """Mask between 1 and N-1 random positions of ``seq``."""
    n = len(seq)
    if n < 2:
        raise ValueError("fill examples need sequences of length >= 2")
    count = int(rng.integers(1, n))
    positions = rng.choice(n, size=count, replace=False)
    return mask_sequence(seq, positions)


def merge_fill(input_text: str, target_text: str, n_positions: int, codebook_size: int) -> ParseResult:
    """Put the sentinel values of ``target_text`` back into ``input_text``.

    The target must list sentinels in ascending order, each followed by one value.
    """
    if not input_text.startswith(FILL):
        raise ValueError(f"fill input must start with {FILL!r}")
    body = input_text[len(FILL):].split()
    target = target_text.split()
    expected = [sentinel_index(t) for t in body if sentinel_index(t) is not None]
    if expected != list(range(len(expected))):
        return ParseError("non_numeric", input_text, "sentinels in input not gapless and ascending")
    if len(target) != 2 * len(expected):
        return ParseError("non_numeric", target_text, "target does not pair every sentinel with a value")
    values = {}
    for k in range(len(expected)):
        tok, val = target[2 * k], target[2 * k + 1]
        if sentinel_index(tok) != k:
            return ParseError("non_numeric", target_text, f"expected {sentinel(k)}, got {tok!r}")
        values[k] = val
    merged = [values[sentinel_index(t)] if sentinel_index(t) is not None else t for t in body]
    return parse_sequence(" ".join(merged), n_positions, codebook_size)


@dataclass(frozen=True)
class CorpusExample:
    task: str  # "generate" | "fill"
    input: str
    target: str

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "input": self.input, "target": self.target})


def generate_example(seq: Sequence[int]) -> CorpusExample:
    return CorpusExample("generate", f"{GENERATE} ", to_sentence(seq))


def build_corpus(
    sequences: Iterable[Sequence[int]], seed: int = 0, fills_per_sequence: int = 1
) -> list[CorpusExample]:
    """One generate example and ``fills_per_sequence`` fill examples per sequence."""
    rng = np.random.default_rng(seed)
    corpus = []
    for seq in sequences:
        corpus.append(generate_example(seq))
        for _ in range(fills_per_sequence):
            ex = make_fill_example(seq, rng)
            corpus.append(CorpusExample("fill", ex.input_text, ex.target_text))
    return corpus


def write_corpus(path: str | Path, corpus: Iterable[CorpusExample]) -> None:
    with open(path, "w") as fh:
        for ex in corpus:
            fh.write(ex.to_json() + "\n")


def read_corpus(path: str | Path) -> list[CorpusExample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                if d["task"] not in ("generate", "fill"):
                    raise ValueError(f"unknown task {d['task']!r}")
                out.append(CorpusExample(d["task"], d["input"], d["target"]))
    return out


class Vocabulary:
    """Closed token set: K codes, N sentinels, two task tokens, end and pad."""

    EOS = "</s>"
    PAD = "<pad>"

    def __init__(self, codebook_size: int, n_positions: int):
        self.codebook_size = codebook_size
        self.n_positions = n_positions
        self.tokens = (
            [str(i) for i in range(codebook_size)]
            + [sentinel(i) for i in range(n_positions)]
            + [GENERATE, FILL, self.EOS, self.PAD]
        )
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.eos_id = self.index[self.EOS]
        self.pad_id = self.index[self.PAD]

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str, add_eos: bool = False) -> list[int]:
        try:
            ids = [self.index[t] for t in text.split()]
        except KeyError as exc:
            raise ValueError(f"token {exc.args[0]!r} not in vocabulary") from None
        return ids + [self.eos_id] if add_eos else ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i != self.pad_id:
                out.append(self.tokens[i])
        return " ".join(out)
