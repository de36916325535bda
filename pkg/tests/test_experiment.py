import csv
import json

import numpy as np
import pytest

from anchorda import experiment as E
from anchorda.models import TrainConfig, fine_tune
from anchorda.synth import GeneratorConfig


def tiny_config(**kw):
    d = dict(
        generator=GeneratorConfig(n_partners=50, n_users=300, train_day_impressions=4000,
                                  eval_day_impressions=4000, seed=1),
        train=TrainConfig(epochs=1, finetune_epochs=1, hidden_width=8, latent_width=8),
        alpha_grid=[0.5, 1.0],
        seeds=[0, 1],
        fractions=[0.0, 0.5, 1.0],
    )
    d.update(kw)
    return E.ExperimentConfig(**d)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    return E.cmd_generate(tiny_config(), out)


@pytest.fixture(scope="module")
def journey(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("journey")
    cfg = tiny_config()
    res = E.run_journey(data_dir, cfg, out)
    return cfg, out, res


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_validation():
    with pytest.raises(E.ConfigError):
        tiny_config(fractions=[0.2, 1.0])
    with pytest.raises(E.ConfigError):
        tiny_config(fractions=[0.0, 1.5])
    with pytest.raises(E.ConfigError):
        tiny_config(models=["nt", "dann"])
    with pytest.raises(E.ConfigError):
        tiny_config(alpha_grid=[0.0, 0.5])
    with pytest.raises(E.ConfigError):
        tiny_config(seeds=[1, 1])
    with pytest.raises(E.ConfigError):
        tiny_config(k=0)


def test_load_config(tmp_path):
    assert E.load_config(None).seeds == list(range(10))
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seeds": [3], "generator": {"n_partners": 20}, "train": {"epochs": 2}}))
    cfg = E.load_config(p)
    assert cfg.seeds == [3] and cfg.generator.n_partners == 20 and cfg.train.epochs == 2
    p.write_text(json.dumps({"sedes": [3]}))
    with pytest.raises(E.ConfigError):
        E.load_config(p)
    p.write_text("{not json")
    with pytest.raises(E.ConfigError):
        E.load_config(p)
    with pytest.raises(E.ConfigError):
        E.load_config(tmp_path / "missing.json")


def test_train_config_forces_nt_alpha():
    cfg = tiny_config(train_overrides={"lada": {"epochs": 3}})
    assert cfg.train_config("nt", 0.3, 5).alpha == 1.0
    lada = cfg.train_config("lada", 0.3, 5)
    assert (lada.alpha, lada.seed, lada.epochs) == (0.3, 5, 3)


def test_generate_deterministic(tmp_path, data_dir):
    E.cmd_generate(tiny_config(), tmp_path)
    for name in ("records.txt", "profiles.json", "split.json"):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()


def test_view_for():
    assert E.view_for(0.0) == "target"
    assert E.view_for(0.2) == "source"


def test_grid_search_shortcuts(data_dir):
    ds, split = E.load_data(data_dir)
    chosen, table = E.grid_search(ds, split, "nt", tiny_config())
    assert chosen == {"auc": 1.0, "ndcg": 1.0, "ap": 1.0} and table == {}
    chosen, table = E.grid_search(ds, split, "lada", tiny_config(alpha_grid=[0.4]))
    assert set(chosen.values()) == {0.4} and table == {}


def test_grid_search_picks_best_validation(data_dir):
    ds, split = E.load_data(data_dir)
    chosen, table = E.grid_search(ds, split, "iada", tiny_config(), ("auc", "ap"))
    assert set(table) == {0.5, 1.0}
    for m in ("auc", "ap"):
        best = max(table.values(), key=lambda r: r[m])[m]
        assert table[chosen[m]][m] == best


def test_grid_search_averages_seeds(data_dir):
    ds, split = E.load_data(data_dir)
    cfg = tiny_config(seeds=[0, 1, 2], grid_seeds=2)
    _, both = E.grid_search(ds, split, "lada", cfg, ("auc",))
    _, s0 = E.grid_search(ds, split, "lada", cfg, ("auc",), seeds=[0])
    _, s1 = E.grid_search(ds, split, "lada", cfg, ("auc",), seeds=[1])
    for a in both:
        assert both[a]["auc"] == pytest.approx((s0[a]["auc"] + s1[a]["auc"]) / 2, abs=1e-15)
    with pytest.raises(E.ConfigError):
        tiny_config(grid_seeds=0)


def test_resolve_alphas_prefers_config(tmp_path, data_dir):
    ds, split = E.load_data(data_dir)
    given = {"iada": {"auc": 0.3, "ndcg": 0.4, "ap": 0.5}}
    cfg = tiny_config(models=["nt", "iada"], alphas=given)
    got = E.resolve_alphas(ds, split, cfg, tmp_path)
    assert got["iada"] == given["iada"] and got["nt"] == {"auc": 1.0, "ndcg": 1.0, "ap": 1.0}
    assert json.loads((tmp_path / "alphas.json").read_text()) == got


def test_journey_rows_complete(journey):
    cfg, out, res = journey
    assert res["failures"] == {}
    rows = _rows(out / "results.csv")
    assert len(rows) == len(cfg.models) * len(cfg.seeds) * len(cfg.fractions) * 2 * len(cfg.metrics)
    keys = {(r["model"], r["fraction"], r["setting"], r["metric"], r["seed"]) for r in rows}
    assert len(keys) == len(rows)
    for r in rows:
        assert r["value"] != ""
        assert 0.0 <= float(r["value"]) <= 1.0
        if r["metric"] in ("ndcg", "precision"):
            assert r["k"] == "auto"
    for kind in cfg.models:
        for seed in cfg.seeds:
            pts = np.loadtxt(out / "roc" / f"{kind}_s{seed}.csv", delimiter=",", skiprows=1)
            assert pts[0].tolist() == [0.0, 0.0] and pts[-1].tolist() == [1.0, 1.0]


def test_fraction_zero_row_is_cold_start(journey, data_dir):
    cfg, out, res = journey
    ds, split = E.load_data(data_dir)
    a = res["alphas"]["lada"]["auc"]
    base = E.load_base(out / "checkpoints" / f"lada_a{a:g}_s1.ckpt", ds)
    rep = E.evaluate(base, ds, split.test, "target", cfg.k, ("auc",))
    row = [r for r in _rows(out / "results.csv")
           if (r["model"], r["fraction"], r["setting"], r["metric"], r["seed"]) == ("lada", "0", "macro", "auc", "1")]
    assert float(row[0]["value"]) == rep.macro["auc"]
    assert int(row[0]["n_partners_included"]) == rep.n_included["auc"]


def test_journey_resumes_and_reproduces(tmp_path, journey, data_dir):
    cfg, out, _ = journey
    again = tmp_path / "again"
    E.run_journey(data_dir, cfg, again)
    assert (again / "results.csv").read_bytes() == (out / "results.csv").read_bytes()
    # deleting one cell and rerunning recomputes only that cell, identically
    (again / "cells" / "sda_s0.csv").unlink()
    before = (again / "cells" / "nt_s1.csv").stat().st_mtime_ns
    E.run_journey(data_dir, cfg, again)
    assert (again / "cells" / "nt_s1.csv").stat().st_mtime_ns == before
    assert (again / "results.csv").read_bytes() == (out / "results.csv").read_bytes()


def test_failed_cell_recorded(tmp_path, data_dir, monkeypatch):
    real = E.run_cell

    def flaky(ds, split, config, kind, seed, alphas, out=None):
        if kind == "sda" and seed == 1:
            raise RuntimeError("boom")
        return real(ds, split, config, kind, seed, alphas, out)

    monkeypatch.setattr(E, "run_cell", flaky)
    res = E.run_journey(data_dir, tiny_config(alphas={k: {"auc": 0.5, "ndcg": 0.5, "ap": 0.5}
                                                       for k in ("sda", "iada", "lada")}), tmp_path)
    assert list(res["failures"]) == ["sda_s1"]
    assert "boom" in json.loads((tmp_path / "failures.json").read_text())["sda_s1"]
    assert not (tmp_path / "cells" / "sda_s1.csv").exists()
    assert {r["model"] + r["seed"] for r in _rows(tmp_path / "results.csv")} == \
        {k + s for k in ("nt", "sda", "iada", "lada") for s in "01"} - {"sda1"}


def test_finetune_then_evaluate_matches_cell(journey, data_dir):
    cfg, out, res = journey
    ds, split = E.load_data(data_dir)
    a = res["alphas"]["iada"]["ap"]
    base = E.load_base(out / "checkpoints" / f"iada_a{a:g}_s0.ckpt", ds)
    fx, fy = E.fraction_xy(ds, split.test, 0.5, 0)
    rep = E.evaluate(fine_tune(base, fx, fy, 0.5), ds, split.test, "source", cfg.k, ("ap",))
    row = [r for r in _rows(out / "results.csv")
           if (r["model"], r["fraction"], r["setting"], r["metric"], r["seed"]) == ("iada", "0.5", "micro", "ap", "0")]
    assert float(row[0]["value"]) == rep.micro["ap"]


# --- report ------------------------------------------------------------------

def test_gain():
    assert E.gain(0.105, 0.101) == pytest.approx(3.9604, abs=1e-4)
    assert E.gain(0.3, 0.3) == 0.0
    assert E.gain(None, 0.3) is None and E.gain(0.3, 0.0) is None


def test_report(journey):
    cfg, out, _ = journey
    res = E.cmd_report(out)
    for key, g in res["gains"].items():
        if key[0] == "nt":
            assert g == 0.0
    summary = _rows(out / "summary.csv")
    assert len(summary) == len(cfg.models) * len(cfg.fractions) * 2 * len(cfg.metrics)
    assert all(r["n_seeds"] == "2" for r in summary)
    raw = [float(r["value"]) for r in _rows(out / "results.csv")
           if (r["model"], r["fraction"], r["setting"], r["metric"]) == ("lada", "1", "macro", "auc")]
    mean = [float(r["mean"]) for r in summary
            if (r["model"], r["fraction"], r["setting"], r["metric"]) == ("lada", "1", "macro", "auc")]
    assert mean[0] == pytest.approx(sum(raw) / 2, abs=1e-15)


def test_report_handcrafted(tmp_path):
    rows = [["nt", "0", "macro", "ap", "", "0.101", "5", "0"],
            ["lada", "0", "macro", "ap", "", "0.105", "5", "0"]]
    E._write_csv(tmp_path / "results.csv", E.RESULT_COLUMNS, rows)
    gains = {(r["model"]): r["gain_pct"] for r in (E.cmd_report(tmp_path), _rows(tmp_path / "gains.csv"))[1]}
    assert gains["nt"] == "0.0"
    assert float(gains["lada"]) == pytest.approx(3.96, abs=0.005)


def test_report_empty(tmp_path):
    with pytest.raises(E.EmptyResultsError):
        E.cmd_report(tmp_path)
    E._write_csv(tmp_path / "results.csv", E.RESULT_COLUMNS, [])
    with pytest.raises(E.EmptyResultsError):
        E.cmd_report(tmp_path)
