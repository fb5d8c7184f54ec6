"""
Sampling new cells from the sequence prior
==========================================

Turn the training cells into a text corpus ("generate:" and "fill:" tasks),
train the built-in encoder-decoder prior and sample at a few temperatures.
Expects the checkpoint written by 01_nb201_codes.py.

    python demos/02_generate.py --vqvae nb201_vqvae.ckpt --epochs 5
"""

import argparse

import numpy as np

from vqarch.codec import build_corpus, make_fill_example
from vqarch.evaluation import generation_metrics
from vqarch.prior import PriorConfig, SamplingConfig, TransformerPrior, fill, generate
from vqarch.space import NB201, canonical_hash, enumerate_nb201, split_indices
from vqarch.vqvae import Checkpoint

parser = argparse.ArgumentParser()
parser.add_argument("--vqvae", default="nb201_vqvae.ckpt")
parser.add_argument("--epochs", type=int, default=5)
parser.add_argument("--samples", type=int, default=2000)
parser.add_argument("--out", default="nb201_prior.ckpt")
args = parser.parse_args()

ckpt = Checkpoint.load(args.vqvae)
graphs = list(enumerate_nb201())
train = [graphs[i] for i in split_indices(len(graphs), seed=0)[0]]
seqs = [tuple(int(v) for v in s) for s in ckpt.encode_graphs(train)]
corpus = build_corpus(seqs, seed=0, fills_per_sequence=1)
print(len(corpus), "examples, e.g.")
for ex in corpus[:2]:
    print(f"  {ex.input!r} -> {ex.target!r}")

prior = TransformerPrior(ckpt.codebook_size, ckpt.n_positions, PriorConfig(epochs=args.epochs, batch_size=128), seed=0)
losses = prior.train(corpus, callback=lambda e, m: print(f"  epoch {e}: loss {m.history[-1]['loss']:.4f}"))
prior.save(args.out)

hashes = {canonical_hash(g) for g in train}
for t in (0.7, 1.2, 1.8, 2.0):
    samples = generate(prior, SamplingConfig(t, num_samples=args.samples, seed=0), ckpt.n_positions, ckpt.codebook_size)
    r = generation_metrics(samples, ckpt, hashes, NB201)
    print(f"t={t}: validity {r.validity:6.2f}  uniqueness {r.uniqueness:6.2f}  novelty {r.novelty:6.2f}  "
          f"abs. uniqueness {r.absolute_uniqueness:6.2f}")

# mutation: mask two positions of a training cell and let the prior refill them
ex = make_fill_example(seqs[0], np.random.default_rng(1))
print("masked:", ex.input_text)
print("filled:", fill(prior, ex.input_text, SamplingConfig(0.7), ckpt.n_positions, ckpt.codebook_size))
print("original:", seqs[0])
