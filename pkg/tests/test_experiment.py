import json

import numpy as np
import pytest

from fairprune.cli import main
from fairprune.config import ConfigError, default_config, parse_config
from fairprune.experiment import (
    AggregationError,
    MetricsParseError,
    cmd_evaluate,
    cmd_pretrain,
    cmd_report,
    cmd_sparsify,
    cmd_suggest_tolerance,
    load_datasets,
    mean_std,
    nft_es_epoch,
    read_metrics_csv,
)
from fairprune.metrics import dataset_group_stats
from fairprune.model import load_checkpoint

TINY = """
[data.synthetic]
dim = 4
num_classes = 3
group_sizes = (160, 80, 40)
noise = (0.4, 0.7, 1.0)

[model]
hidden_dims = (12, 12)

[pretrain]
epochs = 8

[gmp]
end_epoch = 3

[finetune]
formulation = {form}
epsilon = 0.02
dual_lr = 0.3
epochs = 6

[run]
seeds = [0, 1]
eval_test_each_epoch = {each}
"""


def tiny(form="ceag", each="false"):
    return parse_config(TINY.format(form=form, each=each))


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    cfg = tiny()
    for s in cfg.seeds:
        cmd_pretrain(cfg, s, out)
    return out


def test_defaults_valid():
    cfg = default_config()
    assert cfg.formulation.kind == "nft" and cfg.schedule.end_epoch == 14
    assert cfg.finetune.epochs == 60 and cfg.synthetic.group_sizes == (4000, 2000, 1000, 500, 250)


@pytest.mark.parametrize("text,match", [
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[model]\nwidth = 3\n", "unknown key model.width"),
    ("[finetune]\nformulation = ceag\n", "dual_lr is required"),
    ("[finetune]\nformulation = magic\ndual_lr = 0.1\n", "unknown formulation"),
    ("[finetune]\nepochs = 10\n", "must exceed"),
    ("[pretrain]\nepochs = many\n", "pretrain.epochs"),
    ("[data]\nsource = csv\n", "train_csv"),
    ("[model]\nhidden_dims = (8,)\n", "two hidden layers"),
])
def test_invalid_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_ini_roundtrip_and_hash():
    cfg = tiny()
    again = parse_config(cfg.to_ini())
    assert again.config_hash() == cfg.config_hash()
    assert cfg.with_overrides(seed=9).config_hash() == cfg.config_hash()
    assert tiny("nft").config_hash() != cfg.config_hash()


def test_pretrain_reproducible(pretrained, tmp_path):
    cfg = tiny()
    again = cmd_pretrain(cfg, 0, tmp_path)
    assert again.read_bytes() == (pretrained / "seed-0" / "dense.ckpt").read_bytes()
    assert again.read_bytes() != (pretrained / "seed-1" / "dense.ckpt").read_bytes()
    m = json.loads((pretrained / "seed-0" / "pretrain_manifest.json").read_text())
    assert m["config_hash"] == cfg.config_hash() and m["seed"] == 0


def test_pretrain_separable(tmp_path):
    text = TINY.format(form="nft", each="false").replace("noise = (0.4, 0.7, 1.0)", "noise = (0.001, 0.001, 0.001)")
    cfg = parse_config(text)
    ckpt = cmd_pretrain(cfg, 0, tmp_path)
    rec = read_metrics_csv(tmp_path / "seed-0" / "pretrain_metrics.csv")
    assert [r for r in rec if r["split"] == "train"][-1]["accuracy"] > 0.99
    assert load_checkpoint(ckpt).sparsity() == 0.0


def test_sparsify_deterministic_and_evaluate_matches(pretrained, tmp_path):
    cfg = tiny()
    dense = pretrained / "seed-0" / "dense.ckpt"
    a = cmd_sparsify(cfg, 0, tmp_path / "a", dense)
    b = cmd_sparsify(cfg, 0, tmp_path / "b", dense)
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    for layer in a.model.layers:
        if layer.prunable:
            assert abs(layer.sparsity - 0.9) <= 1 / layer.mask.size
    rep = cmd_evaluate(cfg, 0, a.metrics_path.parent / "sparse.ckpt", dense)
    last = [r for r in read_metrics_csv(a.metrics_path) if r["split"] == "train"][-1]
    assert rep["train"]["max_psi"] == pytest.approx(last["max_psi"], abs=1e-12)
    assert rep["train"]["accuracy"] == pytest.approx(last["accuracy"], abs=1e-12)
    np.testing.assert_allclose(rep["train"]["psi"], [last[f"psi_{g}"] for g in range(3)], atol=1e-12)


def test_evaluate_dense_against_itself(pretrained):
    dense = pretrained / "seed-0" / "dense.ckpt"
    rep = cmd_evaluate(tiny(), 0, dense, dense)
    for split in ("train", "test"):
        assert rep[split]["gap"] == 0 and not any(rep[split]["psi"]) and rep[split]["pairwise"] == 0


def test_nft_es(pretrained, tmp_path):
    cfg = tiny("nft", "true")
    res = cmd_sparsify(cfg, 0, tmp_path, pretrained / "seed-0" / "dense.ckpt")
    records = read_metrics_csv(res.metrics_path)
    assert "lambda_0" not in records[0]
    test_rows = [r for r in records if r["split"] == "test" and r["epoch"] >= cfg.schedule.end_epoch]
    best = max(test_rows, key=lambda r: (r["accuracy"], -r["epoch"]))
    assert res.early_stop["epoch"] == best["epoch"] == nft_es_epoch(records, cfg.schedule.end_epoch)
    assert res.early_stop["train"]["split"] == "train"
    es_model = load_checkpoint(tmp_path / "seed-0" / "nft_es.ckpt")
    _, test = load_datasets(cfg, 0)
    assert dataset_group_stats(es_model, test).accuracy == pytest.approx(best["accuracy"], abs=1e-12)


def test_mean_std():
    assert mean_std([1, 2, 3]) == (2.0, 1.0)
    assert mean_std([0.4]) == (0.4, 0.0)
    with pytest.raises(AggregationError):
        mean_std([])


def test_report(pretrained, tmp_path):
    cfg = tiny()
    for s in cfg.seeds:
        cmd_sparsify(cfg, s, tmp_path / "ceag", pretrained / f"seed-{s}" / "dense.ckpt")
    rows, text = cmd_report([tmp_path / "ceag"], tmp_path / "report.csv")
    assert rows[0]["seeds"] == 2 and "ceag" in text
    assert (tmp_path / "report.csv").read_text().startswith("cell,formulation")
    with pytest.raises(AggregationError):
        cmd_report([tmp_path / "empty"])
    # a seed from another config in the same cell
    cmd_sparsify(tiny("nft"), 5, tmp_path / "ceag", pretrained / "seed-0" / "dense.ckpt")
    with pytest.raises(AggregationError, match="different configs"):
        cmd_report([tmp_path / "ceag"])


def _fake_run(path, max_psi):
    path.mkdir()
    (path / "metrics.csv").write_text(f"epoch,split,accuracy,max_psi\n0,train,0.5,{max_psi}\n")
    return path


def test_suggest_tolerance(tmp_path):
    assert cmd_suggest_tolerance(_fake_run(tmp_path / "a", 0.1)) == (0.1, 0.05)
    with pytest.warns(UserWarning):
        assert cmd_suggest_tolerance(_fake_run(tmp_path / "b", -0.01))[1] == 0.0
    bad = _fake_run(tmp_path / "c", 0.1)
    (bad / "metrics.csv").write_text("epoch,split,accuracy,max_psi\n0,train,oops\n")
    with pytest.raises(MetricsParseError):
        cmd_suggest_tolerance(bad)


def test_cli_end_to_end(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text(TINY.format(form="ceag", each="false"))
    out = str(tmp_path / "out")
    assert main(["pretrain", "--config", str(ini), "--seed", "1", "--out", out]) == 0
    assert main(["sparsify", "--config", str(ini), "--seed", "1", "--out", out]) == 0
    assert main(["evaluate", "--config", str(ini), "--seed", "1", "--out", out]) == 0
    assert main(["report", out]) == 0
    assert main(["suggest-tolerance", f"{out}/seed-1"]) == 0
    capsys.readouterr()
    assert main(["sparsify", "--config", str(ini), "--seed", "7", "--out", out]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FileNotFoundError"
    bad = tmp_path / "bad.ini"
    bad.write_text("[finetune]\nformulation = ceag\n")
    assert main(["pretrain", "--config", str(bad)]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"
    assert not (tmp_path / "runs").exists()
