"""Vector-quantized graph autoencoder over cell architectures.

A GIN encoder maps each node to a D-dimensional vector, the quantizer snaps
every node vector to its nearest codebook row, and a dot-product/linear
decoder reconstructs the symmetrised adjacency and the node operations.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive, save_archive
from .space import NULL, CellGraph, SearchSpaceSpec, canonical_hash, get_space, pad_graph

logger = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    gin_layers: int = 5
    mlp_hidden_dim: int = 128
    latent_dim: int = 16
    epsilon_trainable: bool = True
    mlp_layers: int = 2

    def __post_init__(self):
        if self.gin_layers < 1 or self.latent_dim < 1 or self.mlp_layers < 1:
            raise ValueError("gin_layers, latent_dim and mlp_layers must be >= 1")


@dataclass
class VqVaeConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    codebook_size: int = 512
    beta: float = 0.25
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    codebook_init: str = "data"  # "data" or "uniform" in [-1/K, 1/K]

    @classmethod
    def from_dict(cls, d: dict) -> "VqVaeConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        return cls(encoder=enc, **d)


@dataclass
class LatentEncoding:
    z_e: torch.Tensor
    z_q: torch.Tensor
    indices: torch.Tensor


@dataclass
class VqVaeLoss:
    reconstruction: torch.Tensor
    codebook_term: torch.Tensor
    commitment_term: torch.Tensor
    beta: float
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "recon": float(self.reconstruction.detach()),
            "codebook": float(self.codebook_term.detach()),
            "commit": float(self.commitment_term.detach()),
            "total": float(self.total.detach()),
        }


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: "Checkpoint | None"):
        super().__init__(message)
        self.checkpoint = checkpoint


def gin_aggregate(adj_sym: torch.Tensor, h: torch.Tensor, eps: torch.Tensor | float) -> torch.Tensor:
    """(1 + eps) * H + Ã H, batched over leading dimensions."""
    return (1.0 + eps) * h + adj_sym @ h


def _mlp(in_dim: int, hidden: int, n_layers: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(n_layers):
        layers += [nn.Linear(in_dim if i == 0 else hidden, hidden), nn.BatchNorm1d(hidden), nn.ReLU()]
    return nn.Sequential(*layers)


class GINEncoder(nn.Module):
    def __init__(self, n_ops: int, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.eps = nn.ParameterList(
            nn.Parameter(torch.zeros(1), requires_grad=config.epsilon_trainable)
            for _ in range(config.gin_layers)
        )
        self.mlps = nn.ModuleList(
            _mlp(n_ops if k == 0 else config.mlp_hidden_dim, config.mlp_hidden_dim, config.mlp_layers)
            for k in range(config.gin_layers)
        )
        self.fc = nn.Linear(config.mlp_hidden_dim, config.latent_dim)

    def forward(self, adj: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """adj (B, N, N) directed, x (B, N, n_ops) one-hot -> Z_e (B, N, D)."""
        adj_sym = adj + adj.transpose(-1, -2)
        h = x
        batch, n = x.shape[0], x.shape[1]
        for k, (eps, mlp) in enumerate(zip(self.eps, self.mlps)):
            h = gin_aggregate(adj_sym, h, eps)
            h = mlp(h.reshape(batch * n, -1)).reshape(batch, n, -1)
            if not torch.isfinite(h).all():
                raise FloatingPointError(
                    f"non-finite activations after GIN layer {k} "
                    f"(eps={float(eps):.4g}, max|h|={h.abs().nan_to_num(0).max():.4g})"
                )
        return self.fc(h)


def quantize(z_e: torch.Tensor, codebook: torch.Tensor) -> LatentEncoding:
    """Nearest codebook row for each vector of ``z_e`` (..., D); ties go to the lower index."""
    z_e = torch.as_tensor(z_e)
    codebook = torch.as_tensor(codebook, dtype=z_e.dtype)
    flat = z_e.detach().reshape(-1, z_e.shape[-1])
    dist = ((flat[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
    # torch.argmin returns the first minimal index
    idx = torch.argmin(dist, dim=1).reshape(z_e.shape[:-1])
    return LatentEncoding(z_e=z_e, z_q=codebook[idx], indices=idx)


def decode(z_q: torch.Tensor, decoder: nn.Linear) -> tuple[torch.Tensor, torch.Tensor]:
    """Edge probabilities sigmoid(z_i . z_j) and row-wise op softmax."""
    edge_logits, op_logits = decoder_logits(z_q, decoder)
    return torch.sigmoid(edge_logits), torch.softmax(op_logits, dim=-1)


def decoder_logits(z_q: torch.Tensor, decoder: nn.Linear) -> tuple[torch.Tensor, torch.Tensor]:
    return z_q @ z_q.transpose(-1, -2), decoder(z_q)


def discretize_output(edge_probs, op_probs, space: SearchSpaceSpec) -> CellGraph:
    edge_probs = np.asarray(edge_probs)
    op_probs = np.asarray(op_probs)
    adj = np.triu(edge_probs > 0.5, 1).astype(np.int8)
    ops = [space.op_vocabulary[i] for i in np.argmax(op_probs, axis=-1)]
    n = len(ops)
    while n > 0 and ops[n - 1] == NULL and not adj[n - 1].any() and not adj[:, n - 1].any():
        n -= 1
    return CellGraph(adj[:n, :n], ops[:n])


def objective(
    edge_logits: torch.Tensor,
    op_logits: torch.Tensor,
    adj_target: torch.Tensor,
    op_target: torch.Tensor,
    z_e: torch.Tensor,
    selected: torch.Tensor,
    beta: float,
) -> VqVaeLoss:
    """VQ-VAE objective on a (B, N, ...) batch.

    adj_target is the symmetric Ã. Reconstruction terms are per-entry means,
    the two quantization terms per-node means of squared L2 distances.
    """
    n = adj_target.shape[-1]
    off = ~torch.eye(n, dtype=torch.bool)
    if n > 1:
        edge_nll = F.binary_cross_entropy_with_logits(edge_logits[..., off], adj_target[..., off])
    else:
        edge_nll = edge_logits.sum() * 0.0
    op_nll = F.cross_entropy(op_logits.reshape(-1, op_logits.shape[-1]), op_target.reshape(-1))
    reconstruction = edge_nll + op_nll
    codebook_term = ((z_e.detach() - selected) ** 2).sum(-1).mean()
    commitment_term = ((z_e - selected.detach()) ** 2).sum(-1).mean()
    total = reconstruction + codebook_term + beta * commitment_term
    return VqVaeLoss(reconstruction, codebook_term, commitment_term, beta, total)


def loss(graph: CellGraph, encoding: LatentEncoding, decoded, beta: float, space: SearchSpaceSpec) -> VqVaeLoss:
    """Objective for one graph given decoder probabilities (edge_probs, op_probs)."""
    edge_probs, op_probs = (torch.as_tensor(p) for p in decoded)
    g = pad_graph(graph, edge_probs.shape[-1])
    adj = torch.as_tensor(np.array(g.adjacency), dtype=edge_probs.dtype)
    target = torch.as_tensor(g.op_indices(space))
    return objective(
        torch.logit(edge_probs), torch.log(op_probs), adj + adj.T, target,
        encoding.z_e, encoding.z_q, beta,
    )


class VQVAE(nn.Module):
    def __init__(self, n_ops: int, config: VqVaeConfig):
        super().__init__()
        self.config = config
        k, d = config.codebook_size, config.encoder.latent_dim
        self.encoder = GINEncoder(n_ops, config.encoder)
        self.codebook = nn.Parameter(torch.empty(k, d).uniform_(-1.0 / k, 1.0 / k))
        self.decoder = nn.Linear(d, n_ops)

    def forward(self, adj: torch.Tensor, x: torch.Tensor, bypass_quantizer: bool = False) -> dict:
        z_e = self.encoder(adj, x)
        if bypass_quantizer:
            z_dec = z_e
            enc = LatentEncoding(z_e, z_e, torch.full(z_e.shape[:-1], -1))
        else:
            enc = quantize(z_e, self.codebook)
            enc.z_q = self.codebook[enc.indices]
            # straight-through: forward uses z_q, backward copies dL/dz_q onto z_e
            z_dec = z_e + (enc.z_q - z_e).detach()
        edge_logits, op_logits = decoder_logits(z_dec, self.decoder)
        return {"encoding": enc, "z_dec": z_dec, "edge_logits": edge_logits, "op_logits": op_logits}

    def compute_loss(self, out: dict, adj: torch.Tensor, op_target: torch.Tensor) -> VqVaeLoss:
        enc = out["encoding"]
        return objective(
            out["edge_logits"], out["op_logits"], adj + adj.transpose(-1, -2), op_target,
            enc.z_e, enc.z_q, self.config.beta,
        )


def graphs_to_tensors(graphs: Sequence[CellGraph], space: SearchSpaceSpec, dtype=torch.float32):
    n = space.max_nodes
    padded = [pad_graph(g, n) for g in graphs]
    adj = torch.as_tensor(np.stack([g.adjacency for g in padded]), dtype=dtype)
    ops = torch.as_tensor(np.stack([g.op_indices(space) for g in padded]))
    x = F.one_hot(ops, space.n_ops).to(dtype)
    return adj, x, ops


def _encode_state(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


@dataclass
class Checkpoint:
    model: VQVAE
    space: SearchSpaceSpec
    epoch: int = 0
    seed: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def config(self) -> VqVaeConfig:
        return self.model.config

    @property
    def codebook_size(self) -> int:
        return self.config.codebook_size

    @property
    def n_positions(self) -> int:
        return self.space.max_nodes

    def save(self, path: str | Path) -> None:
        manifest = {
            "kind": "vqvae",
            "space": self.space.space_id,
            "config": asdict(self.config),
            "epoch": self.epoch,
            "seed": self.seed,
            "history": self.history,
        }
        save_archive(path, manifest, _encode_state(self.model))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        manifest, tensors = load_archive(path)
        if manifest.get("kind") != "vqvae":
            raise ValueError(f"{path} is not a vqvae checkpoint")
        space = get_space(manifest["space"])
        model = VQVAE(space.n_ops, VqVaeConfig.from_dict(manifest["config"]))
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
        model.eval()
        return cls(model, space, manifest["epoch"], manifest["seed"], manifest.get("history", []))

    @torch.no_grad()
    def encode_graphs(self, graphs: Sequence[CellGraph], batch_size: int = 4096) -> np.ndarray:
        """Code sequences (len(graphs), N) for ``graphs``."""
        self.model.eval()
        dtype = self.model.codebook.dtype
        out = []
        for i in range(0, len(graphs), batch_size):
            adj, x, _ = graphs_to_tensors(graphs[i:i + batch_size], self.space, dtype)
            z_e = self.model.encoder(adj, x)
            out.append(quantize(z_e, self.model.codebook).indices.numpy())
        if not out:
            return np.zeros((0, self.n_positions), dtype=np.int64)
        return np.concatenate(out)

    @torch.no_grad()
    def decode_probs(self, sequences) -> tuple[np.ndarray, np.ndarray]:
        idx = torch.as_tensor(np.asarray(sequences, dtype=np.int64))
        z_q = self.model.codebook[idx].double()
        edge_probs, op_probs = decode(z_q, _as_double(self.model.decoder))
        return edge_probs.numpy(), op_probs.numpy()

    def decode_sequences(self, sequences) -> list[CellGraph]:
        sequences = np.asarray(sequences, dtype=np.int64)
        if sequences.size == 0:
            return []
        edge_probs, op_probs = self.decode_probs(sequences)
        return [discretize_output(e, o, self.space) for e, o in zip(edge_probs, op_probs)]

    def reconstruct_many(self, graphs: Sequence[CellGraph]) -> list[CellGraph]:
        return self.decode_sequences(self.encode_graphs(graphs))


def _as_double(linear: nn.Linear) -> nn.Linear:
    out = nn.Linear(linear.in_features, linear.out_features).double()
    with torch.no_grad():
        out.weight.copy_(linear.weight)
        out.bias.copy_(linear.bias)
    return out


def reconstruct(graph: CellGraph, checkpoint: Checkpoint) -> CellGraph:
    return checkpoint.reconstruct_many([graph])[0]


def reconstruction_matches(original: CellGraph, rebuilt: CellGraph, space: SearchSpaceSpec) -> bool:
    try:
        return canonical_hash(rebuilt, space) == canonical_hash(original, space)
    except ValueError:
        return False


@torch.no_grad()
def _init_codebook_from_data(model: VQVAE, adj: torch.Tensor, x: torch.Tensor, gen: torch.Generator) -> None:
    # rows drawn from initial encoder outputs, so every row starts inside the data cloud
    k = model.codebook.shape[0]
    n_graphs = min(len(adj), max(4 * k // adj.shape[1], 32))
    pick = torch.randperm(len(adj), generator=gen)[:n_graphs]
    model.train()
    z = model.encoder(adj[pick], x[pick]).reshape(-1, model.codebook.shape[1])
    rows = torch.randint(len(z), (k,), generator=gen)
    noise = torch.empty_like(model.codebook).uniform_(-1.0 / k, 1.0 / k, generator=gen)
    model.codebook.copy_(z[rows] + noise)


@torch.no_grad()
def _calibrate_batchnorm(model: VQVAE, adj: torch.Tensor, x: torch.Tensor, limit: int = 8192) -> None:
    """Replace BatchNorm running averages with the exact statistics of the training set.

    Running averages lag the weights and use the unbiased variance; both matter
    when the dataset (and hence each batch) is small. At most ``limit`` evenly
    spaced graphs are used.
    """
    bns = [m for m in model.encoder.modules() if isinstance(m, nn.BatchNorm1d)]
    seen: dict[nn.Module, torch.Tensor] = {}
    hooks = [bn.register_forward_hook(lambda mod, inp, out: seen.__setitem__(mod, inp[0])) for bn in bns]
    idx = torch.linspace(0, len(adj) - 1, min(len(adj), limit)).round().long()
    try:
        model.train()
        model.encoder(adj[idx], x[idx])
    finally:
        for h in hooks:
            h.remove()
    for bn in bns:
        bn.running_mean.copy_(seen[bn].mean(0))
        bn.running_var.copy_(seen[bn].var(0, unbiased=False))


def train_vqvae(
    graphs: Sequence[CellGraph],
    space: SearchSpaceSpec | str,
    config: VqVaeConfig | None = None,
    seed: int = 0,
    metrics_path: str | Path | None = None,
    callback=None,
) -> Checkpoint:
    """Minibatch Adam on the VQ-VAE objective; returns the final checkpoint.

    One JSON line per epoch goes to ``metrics_path`` if given. ``callback``
    is called as ``callback(epoch, checkpoint)`` after each epoch.
    """
    if not graphs:
        raise ValueError("cannot train on an empty dataset")
    space = get_space(space)
    config = config or VqVaeConfig()
    torch.manual_seed(seed)
    model = VQVAE(space.n_ops, config)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    adj_all, x_all, ops_all = graphs_to_tensors(graphs, space)
    shuffle = torch.Generator().manual_seed(seed)
    if config.codebook_init == "data":
        _init_codebook_from_data(model, adj_all, x_all, shuffle)
    ckpt = Checkpoint(model, space, 0, seed, [])
    last_good = {k: v.clone() for k, v in model.state_dict().items()}
    log = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(config.epochs):
            model.train()
            perm = torch.randperm(len(graphs), generator=shuffle)
            sums = {"recon": 0.0, "codebook": 0.0, "commit": 0.0, "total": 0.0}
            used = torch.zeros(config.codebook_size, dtype=torch.bool)
            n_batches = 0
            for start in range(0, len(graphs), config.batch_size):
                b = perm[start:start + config.batch_size]
                out = model(adj_all[b], x_all[b])
                terms = model.compute_loss(out, adj_all[b], ops_all[b])
                if not torch.isfinite(terms.total):
                    model.load_state_dict(last_good)
                    model.eval()
                    raise TrainingDiverged(f"loss became {float(terms.total.detach())} in epoch {epoch}", ckpt)
                opt.zero_grad()
                terms.total.backward()
                opt.step()
                used[out["encoding"].indices.reshape(-1)] = True
                for k, v in terms.as_floats().items():
                    sums[k] += v
                n_batches += 1
            row = {"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()},
                   "codebook_utilization": float(used.float().mean())}
            ckpt.history.append(row)
            ckpt.epoch = epoch + 1
            last_good = {k: v.clone() for k, v in model.state_dict().items()}
            logger.info("vqvae epoch %d: %s", epoch, row)
            if log:
                log.write(json.dumps(row) + "\n")
                log.flush()
            if callback is not None:
                callback(epoch, ckpt)
    finally:
        if log:
            log.close()
    _calibrate_batchnorm(model, adj_all, x_all)
    model.eval()
    return ckpt
