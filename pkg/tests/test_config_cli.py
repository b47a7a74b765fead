import json

import numpy as np
import pytest

from vipcnn.cli import main
from vipcnn.config import RunConfig, apply_updates, env_overrides, load_config, parse_text, save_config, to_text
from vipcnn.errors import ConfigError
from vipcnn.evaluation import read_results
from vipcnn.numerics import load_checkpoint

SMALL = ["--set", "model.trunk=[4, 8]", "--set", "model.trunk_pool=[true, false]", "--set", "model.branch_convs=[8]",
         "--set", "model.roi_size=2", "--set", "model.fc_widths=[16, 16]", "--set", "train.stage1_epochs=1",
         "--set", "train.stage2_epochs=1", "--set", "train.lr=0.01"]


# ------------------------------------------------------------------ config

def test_text_roundtrip(tmp_path):
    cfg = apply_updates(RunConfig(), {"train.lr": 0.05, "model.fc_widths": [32, 16], "eval.ns": [20, 50],
                                      "eval.proposals.top_n": 30})
    save_config(tmp_path / "c.txt", cfg)
    assert load_config(tmp_path / "c.txt") == cfg
    assert to_text(load_config(tmp_path / "c.txt")) == to_text(cfg)


def test_precedence_file_env_overrides(tmp_path):
    (tmp_path / "c.txt").write_text("seed = 5\ntrain.lr = 0.1\n# comment\n")
    env = {"VIPCNN_TRAIN__LR": "0.2", "VIPCNN_SEED": "6", "HOME": "/x"}
    cfg = load_config(tmp_path / "c.txt", {"seed": 7}, environ=env)
    assert cfg.train.lr == 0.2 and cfg.seed == 7
    assert env_overrides(env) == {"train.lr": 0.2, "seed": 6}


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        apply_updates(RunConfig(), {"train.learning_rate": 1})
    with pytest.raises(ConfigError):
        apply_updates(RunConfig(), {"train": 1})
    with pytest.raises(ConfigError):
        apply_updates(RunConfig(), {"eval.nms": "sometimes"})
    with pytest.raises(ConfigError):
        apply_updates(RunConfig(), {"variant": "big"})
    with pytest.raises(ConfigError):
        parse_text("no equals sign here")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.txt", environ={})


def test_int_promoted_to_float():
    cfg = apply_updates(RunConfig(), {"train.lr": 1})
    assert isinstance(cfg.train.lr, float)


# --------------------------------------------------------------------- cli

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--images", "20", "--seed", "3", "--out", str(d)]) == 0
    return d


def test_synth_outputs(dataset, tmp_path):
    assert len(list((dataset / "images").glob("*.ppm"))) == 20
    for name in ("annotations.tsv", "train.tsv", "val.tsv", "test.tsv", "objects.txt", "predicates.txt",
                 "resolved_config.txt"):
        assert (dataset / name).is_file(), name
    again = tmp_path / "again"
    assert main(["synth", "--config", str(dataset / "resolved_config.txt"), "--out", str(again)]) == 0
    for f in sorted(dataset.rglob("*")):
        if f.is_file() and f.name != "resolved_config.txt":
            assert f.read_bytes() == (again / f.relative_to(dataset)).read_bytes(), f.name


def test_synth_bad_fractions_exit_code(tmp_path, capsys):
    code = main(["synth", "--images", "5", "--fractions", "0.5", "0.5", "0.5", "--out", str(tmp_path)])
    assert code == 2
    assert "fractions" in capsys.readouterr().err


def test_unknown_set_key_exit_code(tmp_path):
    assert main(["synth", "--set", "bogus.key=1", "--out", str(tmp_path)]) == 2


def _train(dataset, out, *extra):
    return main(["train", "--data", str(dataset), "--out", str(out), *SMALL, *extra])


def test_train_and_eval(dataset, tmp_path):
    out = tmp_path / "run"
    assert _train(dataset, out) == 0
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["stage"] for x in lines] == [1, 2]
    assert (out / "model.ckpt").is_file() and (out / "stage1.ckpt").is_file()
    cfg_file = out / "resolved_config.txt"
    for nms in ("pre", "post", "off", "random-k"):
        ev = tmp_path / f"eval-{nms}"
        code = main(["eval", "--config", str(cfg_file), "--checkpoint", str(out / "model.ckpt"), "--nms", nms,
                     "--random-k", "50", "--out", str(ev), "--ap"])
        assert code == 0
        res = read_results(ev / "results.tsv")
        assert res["phrase_rec100"] >= res["phrase_rec50"]
        assert res["rel_rec100"] >= res["rel_rec50"]
        assert any(k.startswith("ap_") for k in res)
        assert (ev / "detections.tsv").is_file()


def test_stage1_only_matches_baseline(dataset, tmp_path):
    assert _train(dataset, tmp_path / "vip", "--stage", "1-only") == 0
    assert _train(dataset, tmp_path / "base", "--stage", "1-only", "--ablation", "baseline") == 0
    a = load_checkpoint(tmp_path / "vip" / "model.ckpt")
    b = load_checkpoint(tmp_path / "base" / "model.ckpt")
    assert set(b) <= set(a)
    for k in b:
        assert np.array_equal(a[k], b[k]), k
    # stage 2 resumes from the stage-1 checkpoint
    assert _train(dataset, tmp_path / "s2", "--stage", "2", "--checkpoint", str(tmp_path / "vip" / "model.ckpt")) == 0
    assert _train(dataset, tmp_path / "s2b", "--stage", "2") == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nonfinite_exit_code(dataset, tmp_path):
    assert _train(dataset, tmp_path / "nan", "--set", "train.lr=1e30", "--set", "train.weight_decay=0") == 3
    assert (tmp_path / "nan" / "nonfinite_snapshot.ckpt").is_file()


def test_eval_needs_checkpoint(dataset, tmp_path):
    assert main(["eval", "--data", str(dataset), "--out", str(tmp_path)]) == 2


def test_nms_bench(tmp_path):
    common = ["nms-bench", "--proposals", "40", "--clusters", "4", "--seed", "1", *SMALL]
    assert main([*common, "--out", str(tmp_path / "a")]) == 0
    assert main([*common, "--out", str(tmp_path / "b")]) == 0
    a = json.loads((tmp_path / "a" / "nms_bench.json").read_text())
    b = json.loads((tmp_path / "b" / "nms_bench.json").read_text())
    assert a["n_triplets"] == 1600
    assert {k: v for k, v in a.items() if "seconds" not in k and k != "speedup"} == \
        {k: v for k, v in b.items() if "seconds" not in k and k != "speedup"}
    rows = (tmp_path / "a" / "nms_series.tsv").read_text().splitlines()
    assert rows[0] == "threshold\tsurvivors\treduction"
    assert main([*common, "--set", "eval.proposals.nms_threshold=1.0", "--out", str(tmp_path / "c")]) == 0
    c = json.loads((tmp_path / "c" / "nms_bench.json").read_text())
    assert c["reduction"] == 1.0


def test_cleanse_command(tmp_path):
    ann = tmp_path / "raw.tsv"
    ann.write_text("i\tPerson,\triding\tHorse\t0,0,5,5\t6,0,10,5\n"
                   "i\tperson\tRide\thorse\t0,0,5,5\t6,0,10,5\n"
                   "broken\n")
    syn = tmp_path / "syn.tsv"
    syn.write_text("riding\tride\n")
    out = tmp_path / "out"
    assert main(["cleanse", str(ann), "--synonyms", str(syn), "--obj-min", "0", "--pred-min", "0",
                 "--out", str(out), "--lenient"]) == 0
    rows = (out / "cleansed.tsv").read_text().splitlines()
    assert [r.split("\t")[1:4] for r in rows] == [["person", "ride", "horse"]] * 2
    assert main(["cleanse", str(ann), "--out", str(out)]) == 2
