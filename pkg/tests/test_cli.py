import json

import pytest

from vqarch.cli import main
from vqarch.space import NB201, enumerate_nb201, make_records, write_records
from vqarch.search import synthetic_accuracy

SMALL = {
    "space": "nb201",
    "vqvae": {"epochs": 2, "codebook_size": 32, "encoder": {"gin_layers": 2, "mlp_hidden_dim": 32}},
    "prior": {"d_model": 32, "n_heads": 2, "encoder_layers": 1, "decoder_layers": 1, "ff_dim": 64,
              "epochs": 1, "batch_size": 64},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    graphs = list(enumerate_nb201())[:400]
    write_records(d / "bench.jsonl", make_records(graphs, NB201, lambda g, h: {"cifar10": synthetic_accuracy(g)}))
    (d / "cfg.json").write_text(json.dumps(SMALL))

    def run(*args):
        return main([*args, "--config", str(d / "cfg.json"), "--out-dir", str(d)])

    steps = [
        ("ingest", "--input", str(d / "bench.jsonl"), "--out", str(d / "dataset.jsonl")),
        ("train-vqvae", "--dataset", str(d / "dataset.jsonl")),
        ("encode", "--vqvae", str(d / "vqvae.ckpt"), "--dataset", str(d / "dataset.jsonl")),
        ("train-prior", "--corpus", str(d / "corpus.jsonl"), "--vqvae", str(d / "vqvae.ckpt")),
        ("generate", "--prior", str(d / "prior.ckpt"), "--vqvae", str(d / "vqvae.ckpt"), "--n", "40",
         "--temperature", "1.2", "--seed", "3"),
        ("evaluate", "--generated", str(d / "generated.jsonl"), "--train-hashes", str(d / "dataset.train_hashes.txt"),
         "--vqvae", str(d / "vqvae.ckpt")),
        ("search", "--method", "random", "--benchmark", str(d / "dataset.jsonl"), "--trials", "2", "--budget", "30"),
        ("analyze", "--vqvae", str(d / "vqvae.ckpt"), "--dataset", str(d / "dataset.jsonl"),
         "--generated", str(d / "generated.jsonl"), "--perms", "3", "--perm-sequences", "20"),
    ]
    codes = [run(*s) for s in steps]
    return d, codes, run


def test_pipeline_runs_end_to_end(pipeline):
    d, codes, _ = pipeline
    assert codes == [0] * 8
    for name in ("dataset.jsonl", "vqvae.ckpt", "corpus.jsonl", "prior.ckpt", "generated.jsonl", "report.json",
                 "trace.json", "analysis.json", "histograms_train.csv", "vqvae_metrics.jsonl"):
        assert (d / name).exists(), name
    assert len((d / "dataset.train_hashes.txt").read_text().split()) == 360


def test_generated_and_report_consistent(pipeline):
    d, _, _ = pipeline
    recs = [json.loads(l) for l in (d / "generated.jsonl").read_text().splitlines()]
    assert [r["index"] for r in recs] == list(range(40))
    report = json.loads((d / "report.json").read_text())
    assert report["n_requested"] == 40
    assert report["validity"] == round(100 * sum(r["valid"] for r in recs) / 40, 2)


def test_search_trace(pipeline):
    d, _, _ = pipeline
    trace = json.loads((d / "trace.json").read_text())
    assert len(trace["trials"]) == 2
    assert trace["summary"]["oracle"] == "tabular" and trace["summary"]["queries"] == [30, 30]


def test_run_log_records_resolved_config(pipeline):
    d, _, _ = pipeline
    log = json.loads((d / "run-generate.json").read_text())
    assert log["command"] == "generate" and log["seed"] == 3
    # the flag wins over the default; the config file set the prior size
    assert log["config"]["sampling"]["temperature"] == 1.2
    assert log["config"]["sampling"]["num_samples"] == 40
    assert log["config"]["prior"]["d_model"] == 32
    vq = json.loads((d / "run-train-vqvae.json").read_text())
    assert vq["config"]["vqvae"]["codebook_size"] == 32
    assert vq["result"]["reconstruction_accuracy"] is not None


def test_flag_overrides_config_file(pipeline):
    d, _, run = pipeline
    assert run("train-vqvae", "--dataset", str(d / "dataset.jsonl"), "--epochs", "1",
               "--out", str(d / "v1.ckpt")) == 0
    log = json.loads((d / "run-train-vqvae.json").read_text())
    assert log["config"]["vqvae"]["epochs"] == 1


def test_user_errors_exit_one(pipeline, tmp_path):
    d, _, run = pipeline
    assert main(["train-vqvae", "--dataset", str(tmp_path / "missing.jsonl"), "--out-dir", str(tmp_path)]) == 1
    assert main(["generate"]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["search", "--n", "10", "--m", "4", "--method", "random", "--out-dir", str(tmp_path)]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"vqvae": {"no_such_key": 1}}))
    assert main(["ingest", "--config", str(bad), "--out-dir", str(tmp_path)]) == 1
    bad.write_text("{not json")
    assert main(["ingest", "--config", str(bad), "--out-dir", str(tmp_path)]) == 1
    assert main(["ingest", "--space", "nb101", "--out-dir", str(tmp_path)]) == 1
    junk = tmp_path / "junk.jsonl"
    junk.write_text('{"sequence": [999, 0, 0, 0, 0, 0, 0, 0]}\n')
    assert run("evaluate", "--generated", str(junk), "--train-hashes", str(d / "dataset.train_hashes.txt"),
               "--vqvae", str(d / "vqvae.ckpt")) == 1


def test_version_exits_zero(capsys):
    assert main(["--version"]) == 0
