"""Command-line contract: config parsing and hashing, exit codes, artifact
layout, end-to-end reproducibility, prerequisite checks, ablation flags."""

import json
import os
import subprocess
import sys
from types import SimpleNamespace

import numpy as np
import pytest

from fedunshare.cli import (
    EXIT_CONFIG,
    EXIT_MISSING,
    EXIT_OK,
    EXIT_RUNTIME,
    RunConfig,
    config_hash,
    data_hash,
    main,
    parse_config_text,
    serialize_config,
)
from fedunshare.synthetic import generate_interactions, write_interactions

CFG_TEMPLATE = """\
interactions = {data}
split_ratios = 0.8,0.1,0.1
group_ratios = 0.2,0.3,0.5
partial_ratio = 0.5
unshare_ratio = 0.4
dim = 8
rounds = 3
learning_rate = 0.1
snapshots = 2
cl_batch_size = 8
unlearn_rounds = 1
unlearn_learning_rate = 0.1
eval_ks = 5,10
seed = 7
"""


@pytest.fixture()
def ws(tmp_path):
    data = tmp_path / "synth.tsv"
    write_interactions(
        str(data), generate_interactions(30, 20, 4, 10, 0.85, seed=1)
    )
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CFG_TEMPLATE.format(data=data))
    return SimpleNamespace(cfg=str(cfg), out=str(tmp_path / "run"),
                           data=str(data), tmp=tmp_path)


def run(ws, command, *extra):
    return main([command, "--config", ws.cfg, "--out", ws.out, *extra])


# -- config parsing and hashing ---------------------------------------------------

def test_config_defaults_and_comments():
    cfg = parse_config_text("dim = 16  # embedding width\n\n# blank ok\n")
    assert cfg.dim == 16
    assert cfg.rounds == RunConfig().rounds


def test_config_unknown_key_fails():
    from fedunshare.cli import CliError
    with pytest.raises(CliError) as err:
        parse_config_text("dimension = 16\n", source="x.cfg")
    assert err.value.code == EXIT_CONFIG
    assert "x.cfg:1" in err.value.message


def test_config_duplicate_and_malformed_lines_fail():
    from fedunshare.cli import CliError
    with pytest.raises(CliError, match="duplicate"):
        parse_config_text("dim = 8\ndim = 9\n")
    with pytest.raises(CliError, match="key = value"):
        parse_config_text("just words\n")
    with pytest.raises(CliError, match="boolean"):
        parse_config_text("server_bpr = maybe\n")
    with pytest.raises(CliError, match="expected int"):
        parse_config_text("rounds = many\n")


def test_config_round_trips_unchanged():
    cfg = parse_config_text(
        "dim = 12\ntau = 0.05\neval_ks = 1,5,25\nserver_bpr = false\n"
        "local_data_mode = all\nsplit_ratios = 0.7,0.2,0.1\n"
    )
    again = parse_config_text(serialize_config(cfg))
    for name in ("dim", "tau", "eval_ks", "server_bpr", "local_data_mode",
                 "split_ratios", "rounds", "lambda_cl"):
        assert getattr(again, name) == getattr(cfg, name)


def test_config_hash_ignores_plumbing_only():
    a = RunConfig()
    b = RunConfig(out="elsewhere", threads=8)
    c = RunConfig(lambda_cl=0.0)
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)


def test_data_hash_tracks_preparation_fields_only():
    a = RunConfig()
    assert data_hash(a) == data_hash(RunConfig(learning_rate=9.9))
    assert data_hash(a) != data_hash(RunConfig(unshare_ratio=0.9))
    assert data_hash(a) != data_hash(RunConfig(seed=1))


def test_missing_config_file_is_a_config_error(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "nope.cfg"),
                 "--out", str(tmp_path / "run")])
    assert code == EXIT_CONFIG
    assert "nope.cfg" in capsys.readouterr().err


def test_invalid_config_value_is_a_config_error(ws, capsys):
    bad = ws.tmp / "bad.cfg"
    bad.write_text(CFG_TEMPLATE.format(data=ws.data) + "tau = -1.0\n")
    code = main(["prepare", "--config", str(bad), "--out", ws.out])
    assert code == EXIT_CONFIG


# -- prepare ----------------------------------------------------------------------

def test_prepare_writes_artifacts_and_requests(ws, capsys):
    assert run(ws, "prepare") == EXIT_OK
    out = capsys.readouterr().out
    assert "30 users" in out
    prepared = os.path.join(ws.out, "prepared")
    for name in ("users.txt", "items.txt", "train.txt", "valid.txt",
                 "test.txt", "local.txt", "share.txt", "unlearn.txt",
                 "groups.txt", "manifest.json"):
        assert os.path.exists(os.path.join(prepared, name))
    assert os.path.exists(os.path.join(ws.out, "requests.ndjson"))
    assert os.path.exists(os.path.join(ws.out, "config.cfg"))
    assert not os.path.exists(os.path.join(ws.out, ".lock"))


def test_prepare_manifest_matches_independent_recount(ws):
    run(ws, "prepare")
    prepared = os.path.join(ws.out, "prepared")
    with open(os.path.join(prepared, "manifest.json")) as fh:
        manifest = json.load(fh)

    # recount from the raw input and the written split files
    raw_pairs = set()
    with open(ws.data) as fh:
        for line in fh:
            u, i = line.split("\t")
            raw_pairs.add((u.strip(), i.strip()))
    count = lambda n: sum(
        1 for line in open(os.path.join(prepared, n)) if line.strip()
    )
    assert manifest["users"] == count("users.txt") == 30
    assert manifest["items"] == count("items.txt") == 20
    split_total = count("train.txt") + count("valid.txt") + count("test.txt")
    assert split_total == len(raw_pairs)
    assert manifest["pairs"]["train"] == count("train.txt")
    assert manifest["data_hash"]
    assert manifest["config_hash"]


def test_prepare_rerun_is_byte_identical(ws, tmp_path):
    run(ws, "prepare")
    other = str(tmp_path / "run2")
    assert main(["prepare", "--config", ws.cfg, "--out", other]) == EXIT_OK
    a_dir = os.path.join(ws.out, "prepared")
    b_dir = os.path.join(other, "prepared")
    for name in sorted(os.listdir(a_dir)):
        a = open(os.path.join(a_dir, name), "rb").read()
        b = open(os.path.join(b_dir, name), "rb").read()
        assert a == b, name
    assert (open(os.path.join(ws.out, "requests.ndjson"), "rb").read()
            == open(os.path.join(other, "requests.ndjson"), "rb").read())


def test_prepare_missing_input_names_the_path(ws, capsys):
    bad = ws.tmp / "gone.cfg"
    bad.write_text(CFG_TEMPLATE.format(data="/no/such/file.tsv"))
    code = main(["prepare", "--config", str(bad), "--out", ws.out])
    assert code == EXIT_MISSING
    assert "/no/such/file.tsv" in capsys.readouterr().err


# -- train ------------------------------------------------------------------------

def test_train_requires_prepared_data(ws, capsys):
    assert run(ws, "train") == EXIT_MISSING
    assert "prepare" in capsys.readouterr().err


def test_train_writes_checkpoint_history_metrics_figure(ws):
    run(ws, "prepare")
    assert run(ws, "train") == EXIT_OK
    ck = os.path.join(ws.out, "checkpoints", "learning")
    for name in ("item_values.npy", "snapshots.npy", "client_vecs.npy",
                 "meta.json"):
        assert os.path.exists(os.path.join(ck, name))
    with open(os.path.join(ck, "meta.json")) as fh:
        meta = json.load(fh)
    assert meta["phase"] == "learning"
    assert meta["round"] == 3
    lines = open(os.path.join(ws.out, "metrics.ndjson")).read().splitlines()
    assert len(lines) == 3
    assert all("round" in json.loads(l) for l in lines)
    png = open(os.path.join(ws.out, "figures", "training_curves.png"),
               "rb").read()
    assert png[:8] == b"\x89PNG\r\n\x1a\n"


def test_train_zero_lr_checkpoint_equals_initialization(ws):
    run(ws, "prepare")
    assert run(ws, "train", "--rounds", "1", "--lr", "0") == EXIT_OK
    from fedunshare.cli import build_train_config, load_config_file
    from fedunshare.datasets import load_prepared
    from fedunshare.fedlearn import init_server

    cfg = load_config_file(ws.cfg)
    cfg.rounds, cfg.learning_rate = 1, 0.0
    splits, partition, _ = load_prepared(os.path.join(ws.out, "prepared"))
    fresh = init_server(partition, splits, build_train_config(cfg))
    stored = np.load(os.path.join(ws.out, "checkpoints", "learning",
                                  "item_values.npy"))
    assert np.array_equal(stored, fresh.item_table.values)


# -- unlearn / retrain --------------------------------------------------------------

def test_unlearn_requires_training_checkpoint(ws, capsys):
    run(ws, "prepare")
    assert run(ws, "unlearn") == EXIT_MISSING
    assert "checkpoint" in capsys.readouterr().err


def test_unlearn_requires_snapshots(ws, capsys):
    zero = ws.tmp / "zero.cfg"
    zero.write_text(
        CFG_TEMPLATE.format(data=ws.data).replace("snapshots = 2",
                                                  "snapshots = 0")
    )
    assert main(["prepare", "--config", str(zero), "--out", ws.out]) == EXIT_OK
    assert main(["train", "--config", str(zero), "--out", ws.out]) == EXIT_OK
    code = main(["unlearn", "--config", str(zero), "--out", ws.out])
    assert code == EXIT_MISSING
    assert "snapshots" in capsys.readouterr().err


def test_unlearn_requires_requests(ws, capsys):
    keep = ws.tmp / "keep.cfg"
    keep.write_text(
        CFG_TEMPLATE.format(data=ws.data).replace("unshare_ratio = 0.4",
                                                  "unshare_ratio = 0.0")
    )
    assert main(["prepare", "--config", str(keep), "--out", ws.out]) == EXIT_OK
    assert main(["train", "--config", str(keep), "--out", ws.out]) == EXIT_OK
    code = main(["unlearn", "--config", str(keep), "--out", ws.out])
    assert code == EXIT_MISSING
    assert "unshare" in capsys.readouterr().err


def test_unlearn_writes_forgetting_report(ws):
    run(ws, "prepare")
    run(ws, "train")
    assert run(ws, "unlearn") == EXIT_OK
    with open(os.path.join(ws.out, "forgetting.json")) as fh:
        report = json.load(fh)
    for key in ("mean_cos_before", "mean_cos_after", "mean_rank_shift",
                "withdrawn_items", "requesting_users", "config_hash"):
        assert key in report
    assert os.path.exists(os.path.join(ws.out, "figures", "forgetting.png"))
    assert os.path.exists(
        os.path.join(ws.out, "checkpoints", "unlearned", "meta.json")
    )


def test_unlearn_accepts_request_file_override(ws, capsys):
    run(ws, "prepare")
    run(ws, "train")
    with open(os.path.join(ws.out, "requests.ndjson")) as fh:
        first = fh.readline()
    override = ws.tmp / "one_request.ndjson"
    override.write_text(first)
    assert run(ws, "unlearn", "--requests", str(override)) == EXIT_OK
    out = capsys.readouterr().out
    record = json.loads(first)
    assert f"unlearned" in out
    # only the one user's items are withdrawn now
    with open(os.path.join(ws.out, "forgetting.json")) as fh:
        assert json.load(fh)["requesting_users"] == 1
    assert record["user"]


def test_retrain_writes_reference_checkpoint(ws):
    run(ws, "prepare")
    assert run(ws, "retrain") == EXIT_OK
    with open(os.path.join(ws.out, "checkpoints", "retrain",
                           "meta.json")) as fh:
        assert json.load(fh)["phase"] == "retrain"


# -- eval -------------------------------------------------------------------------

def test_eval_reports_and_prints_table(ws, capsys):
    run(ws, "prepare")
    run(ws, "train")
    assert run(ws, "eval") == EXIT_OK
    out = capsys.readouterr().out
    assert "HR" in out and "NDCG" in out
    with open(os.path.join(ws.out, "eval_learning.json")) as fh:
        report = json.load(fh)
    assert report["phase"] == "learning"
    assert set(report["mean_hr"]) == {"5", "10"}
    csv = open(os.path.join(ws.out, "eval_learning.csv")).read().splitlines()
    assert csv[0] == "user,k,hr,ndcg"
    assert len(csv) == 1 + 2 * report["user_count"]
    assert os.path.exists(
        os.path.join(ws.out, "figures", "metrics_learning.png")
    )


def test_eval_refuses_mismatched_config(ws, capsys):
    run(ws, "prepare")
    run(ws, "train")
    code = run(ws, "eval", "--lr", "0.777")
    assert code == EXIT_MISSING
    assert "hash" in capsys.readouterr().err


def test_eval_of_missing_phase_checkpoint(ws, capsys):
    run(ws, "prepare")
    run(ws, "train")
    assert run(ws, "eval", "--phase", "retrain") == EXIT_MISSING


# -- report-storage -----------------------------------------------------------------

def test_report_storage_prints_reference_bytes(tmp_path, capsys):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("dim = 32\nsnapshots = 3\nrounds = 10\n")
    code = main(["report-storage", "--config", str(cfg),
                 "--out", str(tmp_path / "run"), "--items", "1682"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "1,291,776" in out
    with open(tmp_path / "run" / "storage.json") as fh:
        payload = json.load(fh)
    by_method = {r["method"]: r["bytes"] for r in payload["reports"]}
    assert by_method["fedshare"] == 1291776
    assert by_method["retrain"] == 0
    assert os.path.exists(tmp_path / "run" / "storage.txt")
    assert os.path.exists(tmp_path / "run" / "figures" / "storage.png")


def test_report_storage_uses_prepared_counts(ws, capsys):
    run(ws, "prepare")
    assert run(ws, "report-storage") == EXIT_OK
    with open(os.path.join(ws.out, "storage.json")) as fh:
        payload = json.load(fh)
    by_method = {r["method"]: r["params"] for r in payload["reports"]}
    assert by_method["fedshare"]["items"] == 20


def test_report_storage_needs_an_item_count(tmp_path, capsys):
    code = main(["report-storage", "--out", str(tmp_path / "run")])
    assert code == EXIT_CONFIG
    assert "--items" in capsys.readouterr().err


# -- locking, determinism, ablations -------------------------------------------------

def test_lock_file_blocks_concurrent_commands(ws, capsys):
    os.makedirs(ws.out, exist_ok=True)
    with open(os.path.join(ws.out, ".lock"), "w") as fh:
        fh.write("12345\n")
    assert run(ws, "prepare") == EXIT_RUNTIME
    assert "lock" in capsys.readouterr().err
    os.unlink(os.path.join(ws.out, ".lock"))
    assert run(ws, "prepare") == EXIT_OK


def test_lock_released_after_failure(ws):
    assert run(ws, "train") == EXIT_MISSING  # nothing prepared yet
    assert not os.path.exists(os.path.join(ws.out, ".lock"))


def test_pipeline_is_bit_reproducible(ws, tmp_path):
    for out in (ws.out, str(tmp_path / "run2")):
        for cmd in ("prepare", "train", "unlearn", "retrain"):
            assert main([cmd, "--config", ws.cfg, "--out", out]) == EXIT_OK
        assert main(["eval", "--config", ws.cfg, "--out", out]) == EXIT_OK

    deterministic = [
        "metrics.ndjson", "metrics_unlearn.ndjson", "metrics_retrain.ndjson",
        "history.json", "unlearn_history.json", "retrain_history.json",
        "forgetting.json", "eval_learning.json", "eval_learning.csv",
        "config.cfg", "requests.ndjson",
        os.path.join("checkpoints", "learning", "item_values.npy"),
        os.path.join("checkpoints", "unlearned", "item_values.npy"),
        os.path.join("checkpoints", "unlearned", "user_values.npy"),
        os.path.join("checkpoints", "retrain", "item_values.npy"),
    ]
    for name in deterministic:
        a = open(os.path.join(ws.out, name), "rb").read()
        b = open(os.path.join(str(tmp_path / "run2"), name), "rb").read()
        assert a == b, name


def test_ablation_flags_change_the_hash_and_run(ws):
    run(ws, "prepare")
    assert run(ws, "train", "--no-cl", "--no-server-bpr") == EXIT_OK
    with open(os.path.join(ws.out, "checkpoints", "learning",
                           "meta.json")) as fh:
        ablated = json.load(fh)["config_hash"]
    from fedunshare.cli import load_config_file
    assert ablated != config_hash(load_config_file(ws.cfg))
    # evaluating with the same flags matches the stored hash
    assert run(ws, "eval", "--no-cl", "--no-server-bpr") == EXIT_OK


def test_unlearn_ablation_flags_run(ws):
    run(ws, "prepare")
    assert run(ws, "train", "--no-forgotten-graph",
               "--no-remaining-fl") == EXIT_OK
    assert run(ws, "unlearn", "--no-forgotten-graph",
               "--no-remaining-fl") == EXIT_OK


def test_module_entry_point_reports_usage():
    proc = subprocess.run(
        [sys.executable, "-m", "fedunshare.cli", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    for cmd in ("prepare", "train", "unlearn", "retrain", "eval",
                "report-storage"):
        assert cmd in proc.stdout


def test_eval_vectors_server_override():
    from fedunshare.cli import eval_vectors
    from fedunshare.graph import EmbeddingTable
    state = SimpleNamespace(server_user_table=EmbeddingTable(
        np.array([2, 5], dtype=np.int64), np.arange(4.0).reshape(2, 2)))
    ck = {"client_vecs": {1: np.ones(2), 2: np.zeros(2)}, "state": state}
    local = eval_vectors(ck, server_users=False)
    assert set(local) == {1, 2}
    assert np.array_equal(local[2], np.zeros(2))
    swapped = eval_vectors(ck, server_users=True)
    assert np.array_equal(swapped[2], np.array([0.0, 1.0]))
    assert np.array_equal(swapped[5], np.array([2.0, 3.0]))
    assert np.array_equal(swapped[1], np.ones(2))
    # the original mapping is never mutated
    assert np.array_equal(ck["client_vecs"][2], np.zeros(2))


def test_eval_server_users_flag(ws, capsys):
    assert run(ws, "prepare") == EXIT_OK
    assert run(ws, "train") == EXIT_OK
    assert run(ws, "eval", "--server-users") == EXIT_OK
    assert "NDCG" in capsys.readouterr().out
