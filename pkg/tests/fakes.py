"""Small stand-ins for trained models, used by several test modules."""

import numpy as np

from vqarch.codec import FILL, sentinel_index
from vqarch.space import NB201, NB201_EDGES, NB201_OPS, CellGraph, nb201_to_node_graph

# code -> node label; position 0 and 7 must carry the input/output codes
CODE_LABELS = ["input", "output", *NB201_OPS]
OP_CODES = list(range(2, 2 + len(NB201_OPS)))


class CodeTableCheckpoint:
    """Decodes a length-8 code sequence straight into an NB201 node graph."""

    space = NB201
    n_positions = 8
    codebook_size = len(CODE_LABELS)

    def decode_sequences(self, sequences):
        out = []
        for seq in sequences:
            labels = [CODE_LABELS[int(c)] for c in seq]
            base = nb201_to_node_graph(["conv3x3"] * len(NB201_EDGES))
            out.append(CellGraph(base.adjacency, labels))
        return out

    def encode_graphs(self, graphs):
        return np.array([[CODE_LABELS.index(op) for op in g.ops] for g in graphs])


def random_sentence(rng):
    return " ".join(["0", *(str(c) for c in rng.choice(OP_CODES, size=6)), "1"])


class ScriptedPrior:
    """Text prior that emits random valid sentences, with an optional share of junk."""

    backend_id = "scripted"

    def __init__(self, junk_rate=0.0):
        self.junk_rate = junk_rate
        self.calls = 0

    def train(self, corpus):
        return []

    def complete(self, prompts, sampling):
        out = []
        for i, prompt in enumerate(prompts):
            rng = np.random.default_rng([sampling.seed, i])
            self.calls += 1
            if rng.random() < self.junk_rate:
                out.append("junk 9 9")
                continue
            if prompt.startswith(FILL):
                k = sum(sentinel_index(t) is not None for t in prompt.split())
                out.append(" ".join(f"[tok-{j}] {rng.choice(OP_CODES)}" for j in range(k)))
            else:
                out.append(random_sentence(rng))
        return out
