"""
NB201 cells as discrete code sequences
======================================

Enumerate the 15,625 NB201 cells, train the graph VQ-VAE on 90% of them and
check how many held-out cells come back exactly from their 8 codes.
A few epochs on one CPU core are enough to get close to 100%.

    python demos/01_nb201_codes.py --epochs 3 --out nb201_vqvae.ckpt
"""

import argparse
import time

import numpy as np

from vqarch.evaluation import position_histograms, reconstruction_accuracy, uniform_total_variation
from vqarch.space import NB201, enumerate_nb201, split_indices
from vqarch.vqvae import VqVaeConfig, train_vqvae

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=3)
parser.add_argument("--out", default="nb201_vqvae.ckpt")
args = parser.parse_args()

graphs = list(enumerate_nb201())
train_idx, val_idx = split_indices(len(graphs), seed=0)
train = [graphs[i] for i in train_idx]
val = [graphs[i] for i in val_idx]
print(f"{len(graphs)} cells: {len(train)} train / {len(val)} held out")

# one cell, node-op form: nodes carry the operations, 0 is input and 7 output
g = graphs[1234]
print("example cell ops:", g.ops)
print(g.adjacency)

start = time.time()
ckpt = train_vqvae(train, NB201, VqVaeConfig(epochs=args.epochs), seed=0,
                   callback=lambda e, c: print(f"  epoch {e} done ({time.time() - start:.0f}s)"))
ckpt.save(args.out)

print(f"held-out reconstruction accuracy: {reconstruction_accuracy(ckpt, val):.2f}%")

# the same cell as a sentence of codebook indices
codes = ckpt.encode_graphs([g])[0]
print("codes:", codes.tolist())
back = ckpt.decode_sequences([codes])[0]
print("decoded ops:", back.ops)

# how many of the 512 codes each position actually uses
seqs = ckpt.encode_graphs(train)
hists = position_histograms(seqs.tolist(), ckpt.codebook_size)
for p, h in enumerate(hists):
    print(f"position {p}: {np.count_nonzero(h.counts):3d} distinct codes")
print("TV distance to uniform per position:", np.round(uniform_total_variation(hists), 3))
