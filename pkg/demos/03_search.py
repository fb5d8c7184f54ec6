"""
Query-budgeted search with the prior as mutation operator
=========================================================

Keep the best 4 of 16 cells, refill masked code positions of the survivors,
top up with fresh samples, and pay only for new architectures. 400 queries
in total, compared with random search under the same budget.

Without a benchmark table the oracle is a deterministic synthetic accuracy
function of the cell; pass --benchmark with a normalized NB201 JSONL file
(metrics per dataset) to use real accuracies.

    python demos/03_search.py --vqvae nb201_vqvae.ckpt --prior nb201_prior.ckpt
"""

import argparse

from vqarch.prior import TransformerPrior
from vqarch.search import SearchConfig, SyntheticOracle, TabularOracle, random_search_baseline, run_search, summarize
from vqarch.space import NB201, ingest_benchmark
from vqarch.vqvae import Checkpoint

parser = argparse.ArgumentParser()
parser.add_argument("--vqvae", default="nb201_vqvae.ckpt")
parser.add_argument("--prior", default="nb201_prior.ckpt")
parser.add_argument("--benchmark")
parser.add_argument("--trials", type=int, default=5)
args = parser.parse_args()

ckpt = Checkpoint.load(args.vqvae)
prior = TransformerPrior.load(args.prior)
records = ingest_benchmark(args.benchmark, NB201).records if args.benchmark else None


def oracle():
    return TabularOracle(records) if records else SyntheticOracle(NB201)


runs = {"sequence": [], "random": []}
for seed in range(args.trials):
    cfg = SearchConfig(seed=seed)
    runs["sequence"].append(run_search(cfg, oracle(), prior, ckpt, NB201))
    runs["random"].append(random_search_baseline(cfg, oracle(), NB201))
    s, r = runs["sequence"][-1], runs["random"][-1]
    print(f"seed {seed}: sequence {s.best_val_acc:.4f} (resampled {s.resampled})  random {r.best_val_acc:.4f}")

for name, traces in runs.items():
    summary = summarize(traces)
    print(f"{name:8s} mean best val {summary['best_val_acc_mean']:.4f} +- {summary['best_val_acc_std']:.4f}")

# best-so-far after 50, 100, 200, 400 queries, first trial
for name, traces in runs.items():
    curve = traces[0].best_curve
    print(name, [round(curve[q - 1], 4) for q in (50, 100, 200, 400)])
