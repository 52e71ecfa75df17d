import csv
import math

import pytest

import smelab


def small(**kw):
    base = dict(examples=1200, epochs=3, d_tr_size=300, folds=2, memory_sizes=[200], random_inputs=20, traces=False)
    base.update(kw)
    return smelab.config(**base)


def test_defaults_and_validation():
    d = smelab.default_config()
    assert d["task"] == "fact-check"
    assert d["memory_sizes"] == [2000]
    assert smelab.config(folds=3)["folds"] == 3
    with pytest.raises(ValueError):
        smelab.config(task="ner")
    with pytest.raises(ValueError):
        smelab.config(nonsense=1)


def test_hashes_follow_stages():
    a = smelab.config_hashes(small())
    b = smelab.config_hashes(small(editor="ft-last"))
    assert a["data"] == b["data"] and a["model"] == b["model"]
    assert a["run"] != b["run"]


def test_smooth_max():
    v = [0.0, 1.0, -2.0, 0.5]
    assert smelab.smooth_max(v, 2) == pytest.approx((math.e + math.exp(0.5)) / 2)
    assert smelab.smooth_max(v, 10) == pytest.approx(sum(math.exp(x) for x in v) / 4)
    with pytest.raises(ValueError):
        smelab.smooth_max([], 1)


@pytest.mark.parametrize("task", ["fact-check", "kv-qa"])
def test_generate_is_seeded(task):
    data = smelab.generate(task, 50, seed=3)
    assert len(data) == 50
    assert {"id", "tokens", "target", "equivalents", "split"} <= set(data[0])
    assert smelab.generate(task, 50, seed=3) == data


def test_pipeline_round_trip(tmp_path):
    cfg = small()
    gen = smelab.gen(cfg, tmp_path / "data")
    assert gen["examples"] == 1200
    m = smelab.train(cfg, tmp_path / "data", tmp_path / "model")
    assert m["splits"]["d_tr"] == 300
    e = smelab.edit(cfg, tmp_path / "model", tmp_path / "edit")
    assert e["editor"] == "t-patcher"
    with open(tmp_path / "edit" / "summary.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    for r in rows:
        assert int(r["final_params"]) - int(r["initial_params"]) == int(r["patches"]) * (2 * 64 + 1)
    r = smelab.replay(tmp_path / "edit", 1)
    assert r["decisions"] > 0
    assert r["decision_mismatches"] == 0 and r["prediction_mismatches"] == 0
    assert "t-patcher,2," in smelab.report([tmp_path / "edit"], tmp_path / "report")

    with pytest.raises(smelab.ConfigMismatch):
        smelab.edit(small(epochs=4), tmp_path / "model", tmp_path / "other")
    with pytest.raises(FileNotFoundError):
        smelab.replay(tmp_path / "nowhere", 0)
