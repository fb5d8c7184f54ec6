"""Sequence prior over code sentences.

Any backend that maps prompt text to completion text can act as the prior
(:class:`SequenceModel`). The built-in backend is a small encoder-decoder
transformer over a closed vocabulary, trained from scratch with teacher forcing.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive, save_archive
from .codec import (
    FILL,
    GENERATE,
    CorpusExample,
    ParseError,
    ParseResult,
    Vocabulary,
    merge_fill,
    parse_sequence,
    sentinel_index,
)

logger = logging.getLogger(__name__)

# below this temperature sampling degenerates to argmax
GREEDY_TEMPERATURE = 1e-4


@dataclass
class SamplingConfig:
    temperature: float = 1.0
    max_new_tokens: int | None = None
    num_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass
class PriorConfig:
    d_model: int = 128
    n_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ff_dim: int = 512
    dropout: float = 0.1
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    max_len: int = 32


class SequenceModel(Protocol):
    """Text-in/text-out contract every prior backend satisfies."""

    backend_id: str

    def train(self, corpus: Sequence[CorpusExample]) -> list[float]: ...

    def complete(self, prompts: Sequence[str], sampling: SamplingConfig) -> list[str]: ...


def apply_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / t) along the last axis, in float64."""
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def sample_tokens(logits: np.ndarray, temperature: float, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling of one token per row using the supplied uniforms."""
    if temperature < GREEDY_TEMPERATURE:
        return np.argmax(logits, axis=-1)
    cdf = np.cumsum(apply_temperature(logits, temperature), axis=-1)
    idx = (cdf < uniforms[:, None] * cdf[:, -1:]).sum(axis=-1)
    return np.minimum(idx, logits.shape[-1] - 1)


def sample_uniforms(seed: int, n: int, steps: int, offset: int = 0) -> np.ndarray:
    # one stream per (seed, sample index): results do not depend on batching
    return np.stack([np.random.default_rng([seed, offset + i]).random(steps) for i in range(n)]) \
        if n else np.zeros((0, steps))


class Seq2SeqNet(nn.Module):
    def __init__(self, vocab_size: int, config: PriorConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Embedding(vocab_size, config.d_model)
        self.src_pos = nn.Embedding(config.max_len, config.d_model)
        self.tgt_pos = nn.Embedding(config.max_len, config.d_model)
        self.transformer = nn.Transformer(
            d_model=config.d_model,
            nhead=config.n_heads,
            num_encoder_layers=config.encoder_layers,
            num_decoder_layers=config.decoder_layers,
            dim_feedforward=config.ff_dim,
            dropout=config.dropout,
            batch_first=True,
        )
        self.out = nn.Linear(config.d_model, vocab_size)

    def _embed(self, ids: torch.Tensor, pos: nn.Embedding) -> torch.Tensor:
        positions = torch.arange(ids.shape[1], device=ids.device)
        return self.embed(ids) * math.sqrt(self.config.d_model) + pos(positions)

    def encode(self, src: torch.Tensor, src_pad: torch.Tensor) -> torch.Tensor:
        return self.transformer.encoder(self._embed(src, self.src_pos), src_key_padding_mask=src_pad)

    def decode(self, tgt: torch.Tensor, memory: torch.Tensor, src_pad: torch.Tensor) -> torch.Tensor:
        causal = nn.Transformer.generate_square_subsequent_mask(tgt.shape[1], dtype=memory.dtype)
        h = self.transformer.decoder(
            self._embed(tgt, self.tgt_pos), memory, tgt_mask=causal, tgt_is_causal=True,
            memory_key_padding_mask=src_pad,
        )
        return self.out(h)

    def forward(self, src, src_pad, tgt_in):
        return self.decode(tgt_in, self.encode(src, src_pad), src_pad)


def _pad(rows: Sequence[Sequence[int]], pad_id: int) -> torch.Tensor:
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), pad_id, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.as_tensor(r, dtype=torch.long)
    return out


class TransformerPrior:
    """Built-in encoder-decoder prior. The decoder start token is the pad token."""

    backend_id = "builtin-transformer"

    def __init__(self, codebook_size: int, n_positions: int, config: PriorConfig | None = None, seed: int = 0):
        self.vocab = Vocabulary(codebook_size, n_positions)
        self.config = config or PriorConfig()
        self.seed = seed
        torch.manual_seed(seed)
        self.net = Seq2SeqNet(len(self.vocab), self.config)
        self.history: list[dict] = []

    @property
    def codebook_size(self) -> int:
        return self.vocab.codebook_size

    @property
    def n_positions(self) -> int:
        return self.vocab.n_positions

    def _batch(self, examples: Sequence[CorpusExample]):
        src = [self.vocab.encode(ex.input) for ex in examples]
        tgt = [self.vocab.encode(ex.target, add_eos=True) for ex in examples]
        pad = self.vocab.pad_id
        src_t = _pad(src, pad)
        labels = _pad(tgt, pad)
        tgt_in = torch.cat([torch.full((len(tgt), 1), pad, dtype=torch.long), labels[:, :-1]], dim=1)
        return src_t, src_t == pad, tgt_in, labels

    def train(
        self,
        corpus: Sequence[CorpusExample],
        epochs: int | None = None,
        callback: Callable[[int, "TransformerPrior"], None] | None = None,
    ) -> list[float]:
        """Teacher-forced next-token cross-entropy; returns the mean loss of each epoch."""
        if not corpus:
            raise ValueError("empty training corpus")
        tasks = {ex.task for ex in corpus}
        if tasks != {"generate", "fill"}:
            warnings.warn(f"corpus only contains {sorted(tasks)} examples", stacklevel=2)
        cfg = self.config
        epochs = cfg.epochs if epochs is None else epochs
        torch.manual_seed(self.seed)
        gen = torch.Generator().manual_seed(self.seed)
        opt = torch.optim.Adam(self.net.parameters(), lr=cfg.learning_rate)
        losses = []
        for epoch in range(epochs):
            self.net.train()
            order = torch.randperm(len(corpus), generator=gen).tolist()
            total, count = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                src, src_pad, tgt_in, labels = self._batch([corpus[i] for i in order[start:start + cfg.batch_size]])
                logits = self.net(src, src_pad, tgt_in)
                loss = F.cross_entropy(
                    logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=self.vocab.pad_id
                )
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(src)
                count += len(src)
            losses.append(total / count)
            self.history.append({"epoch": len(self.history), "loss": losses[-1]})
            logger.info("prior epoch %d: loss %.4f", epoch, losses[-1])
            if callback is not None:
                callback(epoch, self)
        self.net.eval()
        return losses

    @torch.no_grad()
    def token_accuracy(self, corpus: Sequence[CorpusExample], batch_size: int = 1024) -> float:
        """Teacher-forced next-token accuracy over all target tokens (end token included)."""
        self.net.eval()
        hits = total = 0
        for start in range(0, len(corpus), batch_size):
            src, src_pad, tgt_in, labels = self._batch(corpus[start:start + batch_size])
            pred = self.net(src, src_pad, tgt_in).argmax(-1)
            mask = labels != self.vocab.pad_id
            hits += int((pred == labels)[mask].sum())
            total += int(mask.sum())
        return hits / max(total, 1)

    def _default_budget(self, prompt: str) -> int:
        if prompt.strip().startswith(FILL):
            return 2 * sum(sentinel_index(t) is not None for t in prompt.split())
        return self.n_positions + 2

    @torch.no_grad()
    def complete(self, prompts: Sequence[str], sampling: SamplingConfig, chunk: int = 2048) -> list[str]:
        """Sample one completion per prompt; the i-th prompt uses rng stream (seed, i)."""
        self.net.eval()
        budgets = [sampling.max_new_tokens or self._default_budget(p) for p in prompts]
        steps = max(budgets, default=0)
        uniforms = sample_uniforms(sampling.seed, len(prompts), steps)
        out: list[str] = []
        pad, eos = self.vocab.pad_id, self.vocab.eos_id
        for start in range(0, len(prompts), chunk):
            part = prompts[start:start + chunk]
            src = _pad([self.vocab.encode(p) for p in part], pad)
            src_pad = src == pad
            memory = self.net.encode(src, src_pad)
            tgt = torch.full((len(part), 1), pad, dtype=torch.long)
            done = np.zeros(len(part), dtype=bool)
            limit = np.array(budgets[start:start + chunk])
            for step in range(steps):
                logits = self.net.decode(tgt, memory, src_pad)[:, -1].double().numpy()
                nxt = sample_tokens(logits, sampling.temperature, uniforms[start:start + chunk, step])
                nxt[done | (step >= limit)] = pad
                done |= (nxt == eos) | (step >= limit)
                tgt = torch.cat([tgt, torch.as_tensor(nxt, dtype=torch.long)[:, None]], dim=1)
                if done.all():
                    break
            out.extend(self.vocab.decode(row[1:].tolist()) for row in tgt)
        return out

    def save(self, path: str | Path) -> None:
        manifest = {
            "kind": "prior",
            "backend": self.backend_id,
            "codebook_size": self.codebook_size,
            "n_positions": self.n_positions,
            "config": asdict(self.config),
            "seed": self.seed,
            "history": self.history,
        }
        save_archive(path, manifest, {k: v.detach().numpy() for k, v in self.net.state_dict().items()})

    @classmethod
    def load(cls, path: str | Path) -> "TransformerPrior":
        manifest, tensors = load_archive(path)
        if manifest.get("kind") != "prior":
            raise ValueError(f"{path} is not a prior checkpoint")
        model = cls(manifest["codebook_size"], manifest["n_positions"], PriorConfig(**manifest["config"]), manifest["seed"])
        model.net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
        model.net.eval()
        model.history = manifest.get("history", [])
        return model


class CallableTextModel:
    """Adapter for an external text-to-text model.

    ``sample_fn(prompt, temperature, seed) -> str`` produces one completion;
    ``train_fn(corpus)`` (optional) fine-tunes the backend and returns losses.
    """

    def __init__(self, sample_fn, train_fn=None, backend_id: str = "external"):
        self.sample_fn = sample_fn
        self.train_fn = train_fn
        self.backend_id = backend_id

    def train(self, corpus: Sequence[CorpusExample]) -> list[float]:
        if self.train_fn is None:
            raise NotImplementedError(f"backend {self.backend_id!r} cannot be trained from here")
        return list(self.train_fn(corpus))

    def complete(self, prompts: Sequence[str], sampling: SamplingConfig) -> list[str]:
        seeds = np.random.SeedSequence(sampling.seed).generate_state(max(len(prompts), 1))
        return [str(self.sample_fn(p, sampling.temperature, int(s))) for p, s in zip(prompts, seeds)]


def train_prior(
    corpus: Sequence[CorpusExample],
    codebook_size: int,
    n_positions: int,
    config: PriorConfig | None = None,
    seed: int = 0,
    callback=None,
) -> TransformerPrior:
    model = TransformerPrior(codebook_size, n_positions, config, seed)
    model.train(corpus, callback=callback)
    return model


def generate(
    model: SequenceModel, sampling: SamplingConfig, n_positions: int, codebook_size: int
) -> list[ParseResult]:
    """``sampling.num_samples`` generate-prompt completions, parsed; parse failures are kept."""
    texts = model.complete([f"{GENERATE} "] * sampling.num_samples, sampling)
    return [parse_sequence(t, n_positions, codebook_size) for t in texts]


def fill_many(
    model: SequenceModel, masked_inputs: Sequence[str], sampling: SamplingConfig,
    n_positions: int, codebook_size: int,
) -> list[ParseResult]:
    results: list[ParseResult | None] = [None] * len(masked_inputs)
    todo = []
    for i, text in enumerate(masked_inputs):
        if any(sentinel_index(t) is not None for t in text.split()):
            todo.append(i)
        else:
            results[i] = merge_fill(text, "", n_positions, codebook_size)
    if todo:
        targets = model.complete([masked_inputs[i] for i in todo], sampling)
        for i, target in zip(todo, targets):
            results[i] = merge_fill(masked_inputs[i], target, n_positions, codebook_size)
    return results  # type: ignore[return-value]


def fill(model: SequenceModel, masked_input: str, sampling: SamplingConfig,
         n_positions: int, codebook_size: int) -> ParseResult:
    return fill_many(model, [masked_input], sampling, n_positions, codebook_size)[0]


def parse_failures(results: Sequence[ParseResult]) -> int:
    return sum(isinstance(r, ParseError) for r in results)
