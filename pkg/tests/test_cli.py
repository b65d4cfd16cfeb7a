import json
import os

import numpy as np
import pytest

from uxsid.cli import dispatch


TINY_WORLD = {
    "n_clusters": 5, "items_per_cluster": 8, "content_dim": 4,
    "cluster_spread": 0.05, "n_users": 12, "interests_per_user": 3,
    "seq_len": 30, "distal_frac": 0.1, "positive_rate": 0.5,
    "label_noise": 0.1, "n_impressions": 5, "seed": 0,
}

TINY_MODEL = {"d": 8, "k": 4, "head_sizes": [12, 2], "batch_size": 16,
              "lr": 0.01, "seed": 0}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny end-to-end pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    world_cfg = root / "world.json"
    world_cfg.write_text(json.dumps(TINY_WORLD))
    model_cfg = root / "model.json"
    model_cfg.write_text(json.dumps(TINY_MODEL))
    data = root / "data"
    cb = root / "cb.uxcb"
    ckpt = root / "model.uxmd"
    store = root / "store.uxes"

    assert dispatch(["gen-data", "--config", str(world_cfg), "--out", str(data)]) == 0
    assert dispatch(["train-codebook", "--input", str(data / "items.jsonl"),
                     "--levels", "2", "--codewords", "5", "--out", str(cb),
                     "--seed", "0"]) == 0
    assert dispatch(["train", "--data", str(data), "--codebook", str(cb),
                     "--config", str(model_cfg), "--epochs", "2",
                     "--out", str(ckpt), "--seed", "0"]) == 0
    assert dispatch(["precompute", "--data", str(data), "--codebook", str(cb),
                     "--model", str(ckpt), "--out", str(store)]) == 0
    return {"root": root, "world": world_cfg, "model_cfg": model_cfg,
            "data": data, "cb": cb, "ckpt": ckpt, "store": store}


class TestDispatchErrors:
    def test_no_arguments_usage_exit_2(self):
        assert dispatch([]) == 2

    def test_unknown_flag_exit_2(self):
        assert dispatch(["gen-data", "--nonsense", "x"]) == 2

    def test_unknown_subcommand_exit_2(self):
        assert dispatch(["fly-to-moon"]) == 2

    def test_missing_input_exit_3(self, tmp_path):
        code = dispatch(["gen-data", "--config", str(tmp_path / "absent.json"),
                         "--out", str(tmp_path / "out")])
        assert code == 3

    def test_missing_model_exit_3(self, pipeline, tmp_path):
        code = dispatch(["evaluate", "--data", str(pipeline["data"]),
                         "--codebook", str(pipeline["cb"]),
                         "--model", str(tmp_path / "none.uxmd")])
        assert code == 3

    def test_bad_world_config_exit_1(self, tmp_path):
        cfg = tmp_path / "w.json"
        cfg.write_text(json.dumps({"n_users": 5, "bogus_knob": 3}))
        assert dispatch(["gen-data", "--config", str(cfg),
                         "--out", str(tmp_path / "out")]) == 1


class TestPipeline:
    def test_outputs_exist_with_manifests(self, pipeline):
        data = pipeline["data"]
        for name in ("items.jsonl", "interactions.jsonl", "meta.json", "manifest.json"):
            assert (data / name).exists()
        assert pipeline["cb"].exists()
        assert (pipeline["root"] / "cb.uxcb.manifest.json").exists()
        assert pipeline["ckpt"].exists()
        assert (pipeline["root"] / "model.uxmd.log.csv").exists()
        manifest = json.loads(
            (pipeline["root"] / "model.uxmd.manifest.json").read_text())
        assert manifest["subcommand"] == "train"
        assert manifest["seed"] == 0
        assert manifest["inputs"]  # checksums recorded
        assert "timings_s" in manifest

    def test_encode_writes_sid_tuples(self, pipeline, capsys):
        out = pipeline["root"] / "sids.jsonl"
        assert dispatch(["encode", "--codebook", str(pipeline["cb"]),
                         "--input", str(pipeline["data"] / "items.jsonl"),
                         "--out", str(out)]) == 0
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == 40
        assert all(len(r["sids"]) == 2 for r in rows)

    def test_evaluate_emits_metric_json(self, pipeline, capsys):
        assert dispatch(["evaluate", "--data", str(pipeline["data"]),
                         "--codebook", str(pipeline["cb"]),
                         "--model", str(pipeline["ckpt"]), "--split", "test",
                         "--k", "10"]) == 0
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        for key in ("auc", "uauc", "wuauc", "int_r_at_10", "n"):
            assert key in payload
        assert payload["n"] == 12

    def test_parity_passes_and_reports(self, pipeline, capsys):
        assert dispatch(["parity", "--data", str(pipeline["data"]),
                         "--codebook", str(pipeline["cb"]),
                         "--model", str(pipeline["ckpt"]),
                         "--store", str(pipeline["store"]),
                         "--sample", "20", "--seed", "1"]) == 0
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert payload["passed"] is True
        assert payload["max_abs_deviation"] <= 1e-6

    def test_refresh_swaps_store_atomically(self, pipeline):
        before = pipeline["store"].read_bytes()
        assert dispatch(["refresh", "--data", str(pipeline["data"]),
                         "--codebook", str(pipeline["cb"]),
                         "--model", str(pipeline["ckpt"]),
                         "--store", str(pipeline["store"])]) == 0
        after = pipeline["store"].read_bytes()
        assert after == before  # same params, same data: rebuilt identically
        assert not (pipeline["root"] / "store.uxes.tmp").exists()

    def test_bench_latency_csv_shape(self, pipeline, capsys):
        assert dispatch(["bench-latency", "--model", str(pipeline["ckpt"]),
                         "--lengths", "20,40", "--impressions", "50"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "length,mean_ns,p99_ns,model"
        assert len(lines) == 5
        models = {line.split(",")[3] for line in lines[1:]}
        assert models == {"uxsid_online", "gsu_soft"}

    def test_compare_baselines_writes_curves(self, pipeline):
        out = pipeline["root"] / "curves.csv"
        assert dispatch(["compare-baselines", "--data", str(pipeline["data"]),
                         "--codebook", str(pipeline["cb"]),
                         "--config", str(pipeline["model_cfg"]),
                         "--lengths", "10,30", "--models", "uxsid,din_trunc",
                         "--epochs", "1", "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "model,length,auc,uauc,wuauc,int_r_at_k"
        assert len(lines) == 5  # 2 models x 2 lengths

    def test_train_only_mutates_model_files(self, pipeline):
        # data inputs untouched by downstream commands: compare checksums
        import hashlib

        digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
        items_before = digest(pipeline["data"] / "items.jsonl")
        inter_before = digest(pipeline["data"] / "interactions.jsonl")
        dispatch(["evaluate", "--data", str(pipeline["data"]),
                  "--codebook", str(pipeline["cb"]),
                  "--model", str(pipeline["ckpt"])])
        assert digest(pipeline["data"] / "items.jsonl") == items_before
        assert digest(pipeline["data"] / "interactions.jsonl") == inter_before
