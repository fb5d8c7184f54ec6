"""Generation quality metrics and latent-space analyses."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codec import ParseError, ParseResult
from .space import CellGraph, SearchSpaceSpec, canonical_hash, validate_cell


def _pct(num: int, den: int) -> float:
    return round(100.0 * num / den, 2) if den else 0.0


@dataclass
class GenerationReport:
    n_requested: int
    n_parsed: int
    n_valid: int
    n_unique: int
    n_novel: int
    validity: float
    uniqueness: float
    novelty: float
    absolute_uniqueness: float
    absolute_novelty: float

    @classmethod
    def from_counts(cls, n_requested: int, n_parsed: int, n_valid: int, n_unique: int, n_novel: int):
        return cls(
            n_requested, n_parsed, n_valid, n_unique, n_novel,
            validity=_pct(n_valid, n_requested),
            uniqueness=_pct(n_unique, n_valid),
            novelty=_pct(n_novel, n_valid),
            # validity * uniqueness / 100, computed from the exact counts
            absolute_uniqueness=_pct(n_unique, n_requested),
            absolute_novelty=_pct(n_novel, n_requested),
        )

    def to_dict(self) -> dict:
        keys = ["n_requested", "validity", "uniqueness", "novelty", "absolute_uniqueness",
                "absolute_novelty", "n_parsed", "n_valid", "n_unique", "n_novel"]
        d = asdict(self)
        return {k: d[k] for k in keys}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _decode(decoder, sequences: list) -> list[CellGraph]:
    if not sequences:
        return []
    if hasattr(decoder, "decode_sequences"):
        return decoder.decode_sequences(sequences)
    return list(decoder(sequences))


def _identity_key(graph: CellGraph, space: SearchSpaceSpec, dedup: str) -> str:
    if dedup == "matrix":
        return graph.adjacency.tobytes().hex() + "|" + ",".join(graph.ops)
    return canonical_hash(graph)


def generation_metrics(
    samples: Sequence[ParseResult],
    decoder,
    training_hashes: set[str] | frozenset[str],
    space: SearchSpaceSpec,
    dedup: str = "hash",
) -> GenerationReport:
    """Validity, uniqueness and novelty of a batch of generated samples.

    ``decoder`` is a vqvae checkpoint (anything with ``decode_sequences``) or a
    callable mapping a list of code sequences to graphs. Parse failures count
    as invalid samples. ``dedup="matrix"`` compares exact matrices instead of
    canonical hashes when judging uniqueness.
    """
    parsed = [s for s in samples if not isinstance(s, ParseError)]
    graphs = _decode(decoder, parsed)
    valid = [g for g in graphs if validate_cell(g, space).is_valid]
    keys = [_identity_key(g, space, dedup) for g in valid]
    hashes = keys if dedup == "hash" else [canonical_hash(g) for g in valid]
    n_novel = sum(h not in training_hashes for h in hashes)
    return GenerationReport.from_counts(len(samples), len(parsed), len(valid), len(set(keys)), n_novel)


def reconstruction_accuracy(checkpoint, graphs: Sequence[CellGraph]) -> float:
    """Percent of ``graphs`` whose reconstruction has the same canonical hash."""
    if not graphs:
        raise ValueError("empty validation set")
    space = checkpoint.space
    rebuilt = checkpoint.reconstruct_many(list(graphs))
    hits = 0
    for original, new in zip(graphs, rebuilt):
        if validate_cell(new, space).is_valid and canonical_hash(new) == canonical_hash(original):
            hits += 1
    return _pct(hits, len(graphs))


@dataclass
class PositionHistogram:
    position: int
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def distribution(self) -> np.ndarray:
        return self.counts / max(self.total, 1)


def position_histograms(sequences: Sequence[Sequence[int]], codebook_size: int) -> list[PositionHistogram]:
    if len(sequences) == 0:
        return []
    lengths = {len(s) for s in sequences}
    if len(lengths) != 1:
        raise ValueError(f"sequences have mixed lengths {sorted(lengths)}")
    arr = np.asarray(sequences, dtype=np.int64)
    return [
        PositionHistogram(p, np.bincount(arr[:, p], minlength=codebook_size))
        for p in range(arr.shape[1])
    ]


def total_variation(a: Sequence[PositionHistogram], b: Sequence[PositionHistogram]) -> list[float]:
    """Per-position total-variation distance between two histogram sets."""
    if len(a) != len(b):
        raise ValueError("histogram sets cover different numbers of positions")
    return [0.5 * float(np.abs(x.distribution() - y.distribution()).sum()) for x, y in zip(a, b)]


def uniform_total_variation(hists: Sequence[PositionHistogram]) -> list[float]:
    """TV distance from each position's distribution to the uniform one over all K codes."""
    return [0.5 * float(np.abs(h.distribution() - 1.0 / len(h.counts)).sum()) for h in hists]


def write_histograms_csv(path: str | Path, hists: Iterable[PositionHistogram]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "index", "count"])
        for h in hists:
            for idx in np.flatnonzero(h.counts):
                w.writerow([h.position, int(idx), int(h.counts[idx])])


def token_entropy(token_rows: Sequence[Sequence[str]], n_positions: int) -> float:
    """Mean over positions of the plug-in Shannon entropy (nats) of the token at that position.

    Rows shorter than ``n_positions`` contribute an end marker.
    """
    if not token_rows:
        return 0.0
    entropies = []
    for p in range(n_positions):
        counts = Counter(row[p] if p < len(row) else "</s>" for row in token_rows)
        freq = np.array(list(counts.values()), dtype=np.float64) / len(token_rows)
        entropies.append(float(-(freq * np.log(freq)).sum()))
    return float(np.mean(entropies))


def _non_identity_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        perm = rng.permutation(n)
        if not np.array_equal(perm, np.arange(n)):
            return perm


def permutation_sensitivity(checkpoint, sequences: Sequence[Sequence[int]], n_perms: int, seed: int = 0) -> float:
    """Fraction of sequences for which some random reordering decodes to the same architecture.

    Sequences that do not decode to a valid cell are skipped.
    """
    space = checkpoint.space
    rng = np.random.default_rng(seed)
    seqs = np.asarray(sequences, dtype=np.int64)
    if len(seqs) == 0 or seqs.shape[1] < 2:
        return 0.0
    originals = checkpoint.decode_sequences(seqs)
    flagged = considered = 0
    for seq, graph in zip(seqs, originals):
        if not validate_cell(graph, space).is_valid:
            continue
        considered += 1
        target = canonical_hash(graph)
        perms = np.stack([_non_identity_permutation(len(seq), rng) for _ in range(n_perms)])
        for g in checkpoint.decode_sequences(seq[perms]):
            if validate_cell(g, space).is_valid and canonical_hash(g) == target:
                flagged += 1
                break
    return flagged / considered if considered else 0.0
