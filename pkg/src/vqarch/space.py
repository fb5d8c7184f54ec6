"""Cell search spaces: graph data model, validity rules, hashing and dataset ingestion."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

INPUT = "input"
OUTPUT = "output"
NULL = "null"

DATASETS = ("cifar10", "cifar100", "imagenet16-120")


@dataclass(frozen=True)
class SearchSpaceSpec:
    space_id: str
    max_nodes: int
    max_edges: int
    op_vocabulary: tuple[str, ...]
    fixed_topology: bool = False
    padding_label: str | None = None

    @property
    def n_ops(self) -> int:
        return len(self.op_vocabulary)

    @property
    def intermediate_ops(self) -> tuple[str, ...]:
        return tuple(
            op for op in self.op_vocabulary if op not in (INPUT, OUTPUT, self.padding_label)
        )

    def op_index(self, label: str) -> int:
        return self.op_vocabulary.index(label)


NB101 = SearchSpaceSpec(
    space_id="NB101",
    max_nodes=7,
    max_edges=9,
    op_vocabulary=(INPUT, OUTPUT, "conv1x1", "conv3x3", "maxpool3x3", NULL),
    padding_label=NULL,
)

NB201 = SearchSpaceSpec(
    space_id="NB201",
    max_nodes=8,
    max_edges=10,
    op_vocabulary=(INPUT, OUTPUT, "conv1x1", "conv3x3", "avgpool3x3", "skip", "zero"),
    fixed_topology=True,
)

SPACES = {"nb101": NB101, "nb201": NB201}

# NB201 edges of the 4-node cell, in the order they become op nodes 1..6.
NB201_EDGES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
NB201_OPS = ("conv1x1", "conv3x3", "avgpool3x3", "skip", "zero")

# Native label spellings of the two benchmark releases.
OP_ALIASES = {
    "conv1x1-bn-relu": "conv1x1",
    "conv3x3-bn-relu": "conv3x3",
    "nor_conv_1x1": "conv1x1",
    "nor_conv_3x3": "conv3x3",
    "avg_pool_3x3": "avgpool3x3",
    "skip_connect": "skip",
    "none": "zero",
}


def get_space(name: str | SearchSpaceSpec) -> SearchSpaceSpec:
    if isinstance(name, SearchSpaceSpec):
        return name
    try:
        return SPACES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown search space {name!r}; expected one of {sorted(SPACES)}") from None


def _nb201_template() -> np.ndarray:
    # op node of edge (a, b) reads the feature map of cell node a, which is the
    # sum of all op nodes whose edge ends in a (cell node 0 is the input node).
    adj = np.zeros((8, 8), dtype=np.int8)
    for k, (src, dst) in enumerate(NB201_EDGES, start=1):
        if src == 0:
            adj[0, k] = 1
        else:
            for j, (_, d) in enumerate(NB201_EDGES, start=1):
                if d == src:
                    adj[j, k] = 1
        if dst == 3:
            adj[k, 7] = 1
    return adj


NB201_TEMPLATE = _nb201_template()


@dataclass(frozen=True, eq=False)
class CellGraph:
    """A cell as an upper-triangular adjacency matrix plus one op label per node.

    Trailing nodes labelled ``null`` are padding.
    """

    adjacency: np.ndarray
    ops: tuple[str, ...]

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=np.int8)
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "ops", tuple(self.ops))

    @property
    def n_nodes(self) -> int:
        return len(self.ops)

    @property
    def n_real_nodes(self) -> int:
        n = len(self.ops)
        while n > 0 and self.ops[n - 1] == NULL:
            n -= 1
        return n

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum())

    def op_indices(self, space: SearchSpaceSpec) -> np.ndarray:
        return np.array([space.op_index(op) for op in self.ops], dtype=np.int64)

    def one_hot(self, space: SearchSpaceSpec) -> np.ndarray:
        x = np.zeros((len(self.ops), space.n_ops), dtype=np.float32)
        x[np.arange(len(self.ops)), self.op_indices(space)] = 1.0
        return x

    def __eq__(self, other):
        if not isinstance(other, CellGraph):
            return NotImplemented
        return self.ops == other.ops and np.array_equal(self.adjacency, other.adjacency)

    def __hash__(self):
        return hash((self.ops, self.adjacency.tobytes()))

    def to_dict(self) -> dict:
        return {"adj": self.adjacency.tolist(), "ops": list(self.ops)}


def pad_graph(graph: CellGraph, n_nodes: int) -> CellGraph:
    n = graph.n_nodes
    if n > n_nodes:
        raise ValueError(f"graph has {n} nodes, cannot pad to {n_nodes}")
    adj = np.zeros((n_nodes, n_nodes), dtype=np.int8)
    adj[:n, :n] = graph.adjacency
    return CellGraph(adj, graph.ops + (NULL,) * (n_nodes - n))


def strip_padding(graph: CellGraph) -> CellGraph:
    n = graph.n_real_nodes
    return CellGraph(graph.adjacency[:n, :n], graph.ops[:n])


@dataclass
class ValidityReport:
    failures: list[str] = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.failures

    def __bool__(self) -> bool:
        return self.is_valid


def _reaches(adj: np.ndarray, start: int, forward: bool) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        v = stack.pop()
        nbrs = np.flatnonzero(adj[v] if forward else adj[:, v])
        for w in nbrs:
            if int(w) not in seen:
                seen.add(int(w))
                stack.append(int(w))
    return seen


def validate_cell(graph: CellGraph, space: SearchSpaceSpec) -> ValidityReport:
    """Check ``graph`` against the structural rules of ``space``.

    Problems are collected into the report; nothing is raised.
    """
    failures: list[str] = []

    def fail(kind: str) -> None:
        if kind not in failures:
            failures.append(kind)

    adj = graph.adjacency
    n = len(graph.ops)
    if adj.ndim != 2 or adj.shape != (n, n) or n > space.max_nodes or n < 2:
        return ValidityReport(["bad_shape"])
    if space.fixed_topology and n != space.max_nodes:
        return ValidityReport(["bad_shape"])
    if not np.isin(adj, (0, 1)).all():
        return ValidityReport(["bad_shape"])

    if np.tril(adj).any():
        fail("not_dag")

    n_real = graph.n_real_nodes
    ops = graph.ops
    if n_real < 2:
        return ValidityReport(failures + ["bad_op_label"])
    if any(op not in space.op_vocabulary for op in ops):
        fail("bad_op_label")
    if any(op == NULL for op in ops[:n_real]):
        fail("bad_op_label")
    # padding nodes must be isolated
    if adj[n_real:].any() or adj[:, n_real:].any():
        fail("bad_op_label")

    if ops[0] != INPUT or any(op == INPUT for op in ops[1:n_real]):
        fail("multiple_inputs")
    if ops[n_real - 1] != OUTPUT or any(op == OUTPUT for op in ops[: n_real - 1]):
        fail("multiple_outputs")

    real = np.triu(adj[:n_real, :n_real], 1)
    on_path = _reaches(real, 0, True) & _reaches(real, n_real - 1, False)
    if len(on_path) != n_real:
        fail("disconnected_node")

    if graph.n_edges > space.max_edges:
        fail("edge_count_exceeded")

    # any other wiring of a fixed-topology cell is outside the space
    if space.fixed_topology and not np.array_equal(adj, NB201_TEMPLATE):
        fail("bad_shape")
    return ValidityReport(failures)


def is_valid(graph: CellGraph, space: SearchSpaceSpec) -> bool:
    return validate_cell(graph, space).is_valid


# Integer labels for the NB101 ops so fingerprints follow that benchmark's convention.
_HASH_LABELS = {INPUT: -1, OUTPUT: -2, "conv3x3": 0, "conv1x1": 1, "maxpool3x3": 2}


def _fingerprint(adj: np.ndarray, ops: Sequence[str]) -> str:
    n = adj.shape[0]
    in_deg = adj.sum(axis=0).tolist()
    out_deg = adj.sum(axis=1).tolist()
    labels = [_HASH_LABELS.get(op, op) for op in ops]
    hashes = [
        hashlib.md5(str(h).encode("utf-8")).hexdigest()
        for h in zip(out_deg, in_deg, labels)
    ]
    preds = [np.flatnonzero(adj[:, v]).tolist() for v in range(n)]
    succs = [np.flatnonzero(adj[v]).tolist() for v in range(n)]
    for _ in range(n):
        hashes = [
            hashlib.md5(
                (
                    "".join(sorted(hashes[w] for w in preds[v]))
                    + "|"
                    + "".join(sorted(hashes[w] for w in succs[v]))
                    + "|"
                    + hashes[v]
                ).encode("utf-8")
            ).hexdigest()
            for v in range(n)
        ]
    return hashlib.md5(str(sorted(hashes)).encode("utf-8")).hexdigest()


def canonical_hash(graph: CellGraph, space: SearchSpaceSpec | None = None) -> str:
    """Isomorphism-aware fingerprint of a cell (iterated neighbourhood hashing).

    Padding is stripped first. If ``space`` is given the graph must be valid in it;
    without a space only the DAG property is enforced.
    """
    if space is not None:
        report = validate_cell(graph, space)
        if not report.is_valid:
            raise ValueError(f"cannot hash invalid cell: {report.failures}")
    g = strip_padding(graph)
    if g.adjacency.shape != (g.n_nodes, g.n_nodes) or np.tril(g.adjacency).any():
        raise ValueError("cannot hash a graph that is not an upper-triangular DAG")
    return _fingerprint(g.adjacency, g.ops)


def _normalize_op(label: str) -> str:
    return OP_ALIASES.get(label, label)


def nb201_to_node_graph(edge_ops: Sequence[str]) -> CellGraph:
    """Convert the six edge operations of an NB201 cell into the 8-node node-op graph."""
    if len(edge_ops) != len(NB201_EDGES):
        raise ValueError(f"expected {len(NB201_EDGES)} edge ops, got {len(edge_ops)}")
    ops = [_normalize_op(op) for op in edge_ops]
    bad = [op for op in ops if op not in NB201_OPS]
    if bad:
        raise ValueError(f"unknown NB201 op label(s): {bad}")
    return CellGraph(NB201_TEMPLATE.copy(), (INPUT, *ops, OUTPUT))


def node_graph_to_nb201(graph: CellGraph) -> list[str]:
    if not np.array_equal(graph.adjacency, NB201_TEMPLATE) or len(graph.ops) != 8:
        raise ValueError("graph is not an NB201 node-op cell")
    return list(graph.ops[1:7])


_ARCH_STR_NODE = re.compile(r"\|([^|~]+)~(\d+)")


def parse_nb201_arch_str(arch_str: str) -> list[str]:
    """Edge ops from a string like ``|nor_conv_3x3~0|+|none~0|skip_connect~1|+|...|``."""
    by_edge = {}
    for target, node in enumerate(arch_str.split("+"), start=1):
        for op, src in _ARCH_STR_NODE.findall(node):
            by_edge[(int(src), target)] = op
    try:
        return [by_edge[e] for e in NB201_EDGES]
    except KeyError as exc:
        raise ValueError(f"malformed NB201 arch string {arch_str!r}") from exc


def enumerate_nb201() -> Iterator[CellGraph]:
    """All 5**6 NB201 cells in lexicographic op order."""
    for combo in itertools.product(NB201_OPS, repeat=len(NB201_EDGES)):
        yield nb201_to_node_graph(combo)


def prune(adj: np.ndarray, ops: Sequence[str]) -> CellGraph | None:
    """Drop nodes that are not on an input->output path (NB101 convention)."""
    adj = np.triu(np.asarray(adj, dtype=np.int8), 1)
    n = adj.shape[0]
    keep = sorted(_reaches(adj, 0, True) & _reaches(adj, n - 1, False))
    if 0 not in keep or n - 1 not in keep:
        return None
    return CellGraph(adj[np.ix_(keep, keep)], [ops[i] for i in keep])


def random_nb101_cell(rng: np.random.Generator, space: SearchSpaceSpec = NB101) -> CellGraph:
    """Rejection-sample a valid NB101 cell the way the benchmark's random spec does."""
    n = space.max_nodes
    inner = space.intermediate_ops
    while True:
        adj = np.triu(rng.integers(0, 2, size=(n, n)), 1)
        ops = [INPUT, *(inner[i] for i in rng.integers(0, len(inner), size=n - 2)), OUTPUT]
        graph = prune(adj, ops)
        if graph is not None and validate_cell(graph, space).is_valid:
            return graph


def random_cell(space: SearchSpaceSpec, rng: np.random.Generator) -> CellGraph:
    """One valid cell, uniform over the space up to isomorphism."""
    if space.fixed_topology:
        ops = [NB201_OPS[i] for i in rng.integers(0, len(NB201_OPS), size=len(NB201_EDGES))]
        return nb201_to_node_graph(ops)
    while True:
        cells = draw_uniform_cells(rng, space, batch=256)
        if cells:
            return cells[0]


def _on_io_paths(adj: np.ndarray) -> np.ndarray:
    """Per batch item: is every node on some input->output path? ``adj`` is (B, n, n)."""
    b, n, _ = adj.shape
    a = adj.astype(np.float32)
    fwd = np.zeros((b, 1, n), np.float32)
    fwd[:, 0, 0] = 1
    bwd = np.zeros((b, 1, n), np.float32)
    bwd[:, 0, n - 1] = 1
    at = a.transpose(0, 2, 1)
    for _ in range(n):
        fwd = np.minimum(fwd + fwd @ a, 1)
        bwd = np.minimum(bwd + bwd @ at, 1)
    return ((fwd > 0) & (bwd > 0)).all(axis=(1, 2))


def _n_representations(adj: np.ndarray, ops: np.ndarray) -> np.ndarray:
    """Number of distinct upper-triangular labelings of each graph in the batch.

    ``ops`` holds intermediate op codes (B, n - 2). Only the intermediate nodes
    may be permuted, so this counts reorderings that stay upper triangular,
    modulo automorphisms.
    """
    b, n, _ = adj.shape
    inner = np.array(list(itertools.permutations(range(1, n - 1))), dtype=np.int64).reshape(-1, n - 2)
    perms = np.concatenate([np.zeros((len(inner), 1), np.int64), inner, np.full((len(inner), 1), n - 1)], axis=1)
    permuted = adj[:, perms[:, :, None], perms[:, None, :]]          # (B, P, n, n)
    upper = ~np.tril(permuted, -1).any(axis=(2, 3))
    iu = np.triu_indices(n, 1)
    bits = permuted[:, :, iu[0], iu[1]].astype(np.int64)
    key = (bits << np.arange(bits.shape[-1], dtype=np.int64)).sum(-1)
    op_perm = ops[:, perms[:, 1:-1] - 1].astype(np.int64)          # (B, P, n - 2)
    key = (key << (2 * (n - 2))) + (op_perm << (2 * np.arange(n - 2, dtype=np.int64))).sum(-1)
    key = np.where(upper, key, -1)
    key.sort(axis=1)
    distinct = (np.diff(key, axis=1) != 0) & (key[:, 1:] >= 0)
    return distinct.sum(axis=1) + (key[:, 0] >= 0)


def draw_uniform_cells(rng: np.random.Generator, space: SearchSpaceSpec = NB101, batch: int = 4096) -> list[CellGraph]:
    """One batch of independent draws, uniform over isomorphism classes (with repeats).

    A labeled graph is drawn uniformly from all (size, matrix, ops) triples, kept
    if it is a valid cell, then accepted with probability 1 / (number of labelings
    of its isomorphism class).
    """
    inner_ops = space.intermediate_ops
    sizes = np.arange(2, space.max_nodes + 1)
    weight = 2.0 ** (sizes * (sizes - 1) / 2) * float(len(inner_ops)) ** (sizes - 2)
    drawn = rng.choice(sizes, size=batch, p=weight / weight.sum())
    accepted: list[CellGraph] = []
    for n in sizes:
        count = int((drawn == n).sum())
        if count == 0:
            continue
        adj = np.triu(rng.integers(0, 2, size=(count, n, n), dtype=np.int8), 1)
        ops = rng.integers(0, len(inner_ops), size=(count, n - 2))
        ok = (adj.sum(axis=(1, 2)) <= space.max_edges) & _on_io_paths(adj)
        adj, ops = adj[ok], ops[ok]
        if len(adj) == 0:
            continue
        keep = rng.random(len(adj)) * _n_representations(adj, ops) < 1.0
        for a, o in zip(adj[keep], ops[keep]):
            accepted.append(CellGraph(a, [INPUT, *(inner_ops[i] for i in o), OUTPUT]))
    return [accepted[i] for i in rng.permutation(len(accepted))]


def sample_nb101(n_cells: int, seed: int = 0, space: SearchSpaceSpec = NB101, batch: int = 4096) -> list[CellGraph]:
    """``n_cells`` distinct cells, a uniform subsample of the NB101 space up to isomorphism."""
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    out: list[CellGraph] = []
    while len(out) < n_cells:
        for g in draw_uniform_cells(rng, space, batch):
            h = canonical_hash(g)
            if h not in seen:
                seen.add(h)
                out.append(g)
                if len(out) == n_cells:
                    break
    return out


@dataclass
class BenchmarkRecord:
    graph: CellGraph
    canonical_hash: str
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        record = {
            "hash": self.canonical_hash,
            "adj": strip_padding(self.graph).adjacency.tolist(),
            "ops": list(strip_padding(self.graph).ops),
            "metrics": self.metrics,
        }
        return json.dumps(record)


@dataclass
class Benchmark:
    records: list[BenchmarkRecord]
    train: list[int]
    validation: list[int]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def train_records(self) -> list[BenchmarkRecord]:
        return [self.records[i] for i in self.train]

    def validation_records(self) -> list[BenchmarkRecord]:
        return [self.records[i] for i in self.validation]


def split_indices(n: int, seed: int, train_fraction: float = 0.9) -> tuple[list[int], list[int]]:
    if n == 0:
        return [], []
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(train_fraction * n))
    return sorted(perm[:n_train].tolist()), sorted(perm[n_train:].tolist())


def _check_metrics(metrics: dict) -> dict[str, dict[str, float]]:
    out = {}
    for dataset, values in metrics.items():
        entry = {}
        for key, value in values.items():
            value = float(value)
            if key in ("val_acc", "test_acc"):
                if value > 1.0:  # percentages
                    value /= 100.0
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"{dataset}.{key}={value} outside [0, 1]")
            entry[key] = value
        out[dataset] = entry
    return out


def record_from_dict(raw: dict, space: SearchSpaceSpec) -> BenchmarkRecord:
    if space.fixed_topology and "arch_str" in raw:
        graph = nb201_to_node_graph(parse_nb201_arch_str(raw["arch_str"]))
    else:
        ops = [_normalize_op(op) for op in raw["ops"]]
        if space.fixed_topology and len(ops) == len(NB201_EDGES):
            graph = nb201_to_node_graph(ops)
        else:
            graph = CellGraph(np.asarray(raw["adj"], dtype=np.int8), ops)
    report = validate_cell(graph, space)
    if not report.is_valid:
        raise ValueError(f"invalid cell: {report.failures}")
    return BenchmarkRecord(
        graph=pad_graph(graph, space.max_nodes),
        canonical_hash=canonical_hash(graph),
        metrics=_check_metrics(raw.get("metrics", {})),
    )


def ingest_benchmark(
    path: str | Path,
    space: SearchSpaceSpec | str,
    seed: int = 0,
    max_malformed_fraction: float = 0.01,
) -> Benchmark:
    """Read a normalized JSONL benchmark file.

    Graphs come back padded to the space's node count, in file order, with a
    seeded 90/10 train/validation split. Malformed lines are skipped and
    counted; if more than ``max_malformed_fraction`` of lines are bad the
    whole file is rejected.
    """
    space = get_space(space)
    records: list[BenchmarkRecord] = []
    n_lines = 0
    skipped = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            n_lines += 1
            try:
                records.append(record_from_dict(json.loads(line), space))
            except (ValueError, KeyError, TypeError) as exc:
                skipped += 1
                logger.warning("%s:%d: skipping malformed record (%s)", path, lineno, exc)
    if n_lines and skipped / n_lines > max_malformed_fraction:
        raise ValueError(
            f"{path}: {skipped} of {n_lines} records malformed "
            f"(> {max_malformed_fraction:.0%}), aborting"
        )
    train, val = split_indices(len(records), seed)
    return Benchmark(records, train, val, skipped)


def write_records(path: str | Path, records: Iterable[BenchmarkRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def make_records(
    graphs: Iterable[CellGraph], space: SearchSpaceSpec, metrics_fn=None
) -> list[BenchmarkRecord]:
    out = []
    for g in graphs:
        h = canonical_hash(g, space)
        metrics = metrics_fn(g, h) if metrics_fn is not None else {}
        out.append(BenchmarkRecord(pad_graph(g, space.max_nodes), h, metrics))
    return out
