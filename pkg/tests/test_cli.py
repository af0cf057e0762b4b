"""End-to-end checks of the command-line interface.

Every test drives ``speeder.cli.main`` in-process with a tiny config so
the whole suite stays fast.  A shared dataset and trained run are built
once per session.
"""

import json
import os

import numpy as np
import pytest

from speeder.cli import main
from speeder.config import config_hash, load_config
from speeder.corpus import dataset_hash, load_dataset

TINY = {
    "d_f": 16, "mome_heads": 2, "lm_layers": 2, "lm_heads": 2,
    "lm_context": 160, "catalog_size": 40, "num_sequences": 24,
    "n_range": [9, 11], "stage_epochs": [1, 1, 1], "batch_size": 8,
    "n_max": 12,
}


@pytest.fixture(scope="session")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(cfg_path), "--seed", "7",
                 "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg_path), "--seed", "7",
                 "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def _tsv_log(path, users=4, events=30, spread=20, per_user=8):
    rng = np.random.default_rng(0)
    lines = []
    for u in range(users):
        t0 = 1_600_000_000 + u * 10
        for k in range(events):
            item = f"it{(u * 4 + k % per_user) % spread}"
            feat = ",".join(f"{v:.3f}" for v in rng.normal(size=4))
            lines.append(f"u{u}\t{item}\t{t0 + k * 60}\tnice {item} thing\t{feat}")
    lines.append("broken line without tabs")
    path.write_text("\n".join(lines) + "\n")


# -- config plumbing ---------------------------------------------------------


def test_gen_data_writes_dataset(work, capsys):
    out = capsys.readouterr()
    data = load_dataset(work / "data")
    assert len(data.catalog) == 40
    assert len(data.sequences) == 24
    assert data.manifest["seed"] == 7


def test_set_flag_overrides_config_file(work, tmp_path, capsys):
    rc = main(["gen-data", "--config", str(work / "tiny.json"),
               "--set", "catalog_size=30", "--seed", "7",
               "--out", str(tmp_path / "d")])
    assert rc == 0
    assert len(load_dataset(tmp_path / "d").catalog) == 30


def test_env_seed_applies_only_without_flag_or_file(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SPEEDER_SEED", "99")
    base = {k: v for k, v in TINY.items()}
    cfg_path = tmp_path / "noseed.json"
    cfg_path.write_text(json.dumps(base))
    assert main(["gen-data", "--config", str(cfg_path),
                 "--out", str(tmp_path / "env")]) == 0
    assert load_dataset(tmp_path / "env").manifest["seed"] == 99

    assert main(["gen-data", "--config", str(cfg_path), "--seed", "3",
                 "--out", str(tmp_path / "flag")]) == 0
    assert load_dataset(tmp_path / "flag").manifest["seed"] == 3

    cfg_path.write_text(json.dumps({**base, "seed": 5}))
    assert main(["gen-data", "--config", str(cfg_path),
                 "--out", str(tmp_path / "file")]) == 0
    assert load_dataset(tmp_path / "file").manifest["seed"] == 5


def test_bad_env_seed_exits_2(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SPEEDER_SEED", "not-a-number")
    rc = main(["gen-data", "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "SPEEDER_SEED" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    rc = main(["gen-data", "--set", "not_a_key=1", "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "not_a_key" in capsys.readouterr().err


def test_malformed_set_pair_exits_2(tmp_path, capsys):
    rc = main(["gen-data", "--set", "justakey", "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "key=value" in capsys.readouterr().err


# -- train -------------------------------------------------------------------


def test_train_artifacts(work):
    run = work / "run"
    for name in ("s1.ckpt", "s2.ckpt", "s3.ckpt", "final.ckpt",
                 "config.json", "train_log.jsonl"):
        assert (run / name).exists(), name
    cfg = json.loads((run / "config.json").read_text())
    rows = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
    steps = [r for r in rows if r.get("event") is None]
    assert steps and all(r["config_hash"] == config_hash(cfg) for r in steps)


def test_train_variant_merges_stages(work, tmp_path, capsys):
    rc = main(["train", "--config", str(work / "tiny.json"), "--seed", "7",
               "--variant", "wo_mpo_s1s2",
               "--data", str(work / "data"), "--out", str(tmp_path / "run")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "stages=['s1']" in out
    assert "variant=wo_mpo_s1s2" in out
    cfg = json.loads((tmp_path / "run" / "config.json").read_text())
    assert cfg["variant"] == "wo_mpo_s1s2"
    assert not (tmp_path / "run" / "s2.ckpt").exists()


def test_train_missing_data_dir_exits_2(work, tmp_path, capsys):
    rc = main(["train", "--config", str(work / "tiny.json"),
               "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")])
    assert rc == 2


# -- eval / ppt-eval ---------------------------------------------------------


def test_eval_writes_csv_and_table(work, tmp_path, capsys):
    rc = main(["eval", "--ckpt", str(work / "run" / "final.ckpt"),
               "--data", str(work / "data"), "--split", "valid",
               "--out", str(tmp_path), "--with-reference"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "gpt4-reference" in out
    csv_text = (tmp_path / "eval_valid.csv").read_text()
    assert csv_text.startswith("name,split,total,valid,correct")
    assert "gpt4-reference" in csv_text
    assert (tmp_path / "eval_valid.md").read_text().startswith("| name |")


def test_eval_embeds_config_hash(work, tmp_path):
    main(["eval", "--ckpt", str(work / "run" / "final.ckpt"),
          "--data", str(work / "data"), "--split", "valid",
          "--out", str(tmp_path)])
    cfg = load_config(str(work / "tiny.json"), {"seed": 7})
    assert config_hash(cfg)[:12] in (tmp_path / "eval_valid.csv").read_text()


def test_eval_rejects_foreign_dataset(work, tmp_path, capsys):
    assert main(["gen-data", "--config", str(work / "tiny.json"), "--seed", "8",
                 "--out", str(tmp_path / "other")]) == 0
    rc = main(["eval", "--ckpt", str(work / "run" / "final.ckpt"),
               "--data", str(tmp_path / "other")])
    assert rc == 2
    assert "different dataset" in capsys.readouterr().err


def test_ppt_eval_reports_base_rate(work, capsys):
    rc = main(["ppt-eval", "--ckpt", str(work / "run" / "final.ckpt"),
               "--data", str(work / "data"), "--split", "valid"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "valid_ratio=" in out
    assert "base rate=" in out


# -- bench -------------------------------------------------------------------


def test_bench_outputs(work, tmp_path, capsys):
    rc = main(["bench", "--out", str(tmp_path), "--points", "24",
               "--empirical", "--set", "d_f=16",
               "--set", 'modalities=["text","vision","seq"]'])
    assert rc == 0
    out = capsys.readouterr().out
    assert "train=99 infer=199" in out
    for name in ("cost_closed_form.csv", "cost_closed_form.png",
                 "cost_empirical.csv", "cost_empirical.png"):
        assert (tmp_path / name).exists(), name
    first = (tmp_path / "cost_closed_form.csv").read_text().splitlines()[0]
    assert first.startswith("# config_hash=")


# -- infer / inspect ---------------------------------------------------------


def test_infer_prints_parse_and_dumps_logits(work, tmp_path, capsys):
    dump = tmp_path / "logits.npz"
    rc = main(["infer", "--ckpt", str(work / "run" / "final.ckpt"),
               "--data", str(work / "data"), "--index", "3",
               "--dump-logits", str(dump)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "output tokens:" in out
    assert "valid=" in out
    with np.load(dump) as z:
        assert z["logits"].ndim == 2
        assert z["logits"].shape[0] == len(z["tokens"])


def test_infer_index_out_of_range(work, capsys):
    rc = main(["infer", "--ckpt", str(work / "run" / "final.ckpt"),
               "--data", str(work / "data"), "--index", "4000"])
    assert rc == 2
    assert "--index" in capsys.readouterr().err


def test_inspect_and_diff(work, capsys):
    run = work / "run"
    assert main(["inspect", "--ckpt", str(run / "s1.ckpt")]) == 0
    out = capsys.readouterr().out
    assert "format=speeder-checkpoint" in out
    assert "tensors=" in out

    assert main(["inspect", "--ckpt", str(run / "s3.ckpt"),
                 "--diff", str(run / "final.ckpt")]) == 0
    assert "identical arrays" in capsys.readouterr().out

    assert main(["inspect", "--ckpt", str(run / "s1.ckpt"),
                 "--diff", str(run / "s2.ckpt")]) == 0
    out = capsys.readouterr().out
    assert "only in" in out
    assert "differs" in out


# -- ingest ------------------------------------------------------------------


def test_ingest_builds_dataset_and_reports(work, tmp_path, capsys):
    log = tmp_path / "log.tsv"
    _tsv_log(log)
    rc = main(["ingest", "--input", str(log), "--out", str(tmp_path / "ing"),
               "--min-item-interactions", "2", "--set", "pool_negatives=3"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "malformed=1" in out
    assert "malformed line" in out
    data = load_dataset(tmp_path / "ing")
    assert data.manifest["kind"] == "ingested"
    assert dataset_hash(data)


def test_ingest_rejects_unusable_log(work, tmp_path, capsys):
    log = tmp_path / "sparse.tsv"
    _tsv_log(log, users=1, events=4)
    rc = main(["ingest", "--input", log.as_posix(),
               "--out", str(tmp_path / "ing")])
    assert rc == 2
    assert capsys.readouterr().err.startswith("error:")
