import json

import pytest

from workbench import cli, data, models
from workbench.config import ConfigError, RunConfig

FAST_PLAN = {
    "stages": ["transfer", "whitebox", "bpda-identity", "randomness"],
    "budgets": {s: {"iterations": 5, "query_cap": 50} for s in ("transfer", "whitebox", "bpda-identity", "randomness")},
    "wallclock_repeats": 2,
    "n_eval": 40,
}


def write_config(tmp_path, **sections):
    base = {
        "seed": 0,
        "dataset": {"kind": "rings2d", "n_train": 300, "n_test": 60, "seed": 1},
        "model": {"widths": [16, 16], "train": {"epochs": 5, "batch_size": 32}},
        "defense": {"kind": "hedge"},
        "plan": FAST_PLAN,
        "output_dir": str(tmp_path / "out"),
    }
    base.update(sections)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(base))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_config_defaults_and_digest():
    cfg = RunConfig.from_dict({})
    assert cfg["threat"] == {"p": "inf", "eps": 0.05}
    assert cfg.digest == RunConfig.from_dict({"output_dir": "elsewhere"}).digest
    assert cfg.digest != cfg.with_seed(1).digest
    plan_only = RunConfig.from_dict({"plan": {"n_eval": 5}})
    assert plan_only.train_digest == cfg.train_digest and plan_only.digest != cfg.digest
    for bad in ({"bogus": 1}, {"threat": {"p": "1"}}, {"dataset": {"kind": "mnist"}}, {"model": {"train": {"speed": 2}}}, {"aux": {"gan": {}}}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)


def test_full_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert run("gen-data", "--config", cfg) == 0
    train = data.load_dataset(out / "data" / "train.wbds")
    assert len(train) == 300 and train.digest == RunConfig.load(cfg).digest
    assert run("train", "--config", cfg, "-v") == 0
    log = [json.loads(line) for line in (out / "train.log").read_text().splitlines()]
    assert log[0]["model"] == "classifier" and 0 <= log[0]["clean_accuracy"] <= 1
    ckpt, digest = models.load_checkpoint(out / "checkpoints" / "classifier.json", with_digest=True)
    assert digest == RunConfig.load(cfg).train_digest
    assert ckpt.meta["run_config_digest"] == RunConfig.load(cfg).digest
    assert run("evaluate", "--config", cfg, "--threads", 1) == 0
    first = (out / "report.json").read_bytes()
    report = json.loads(first)
    assert report["n_eval"] == 40 and report["overhead"]["call_units"] == 41
    assert "worst-case robust accuracy" in capsys.readouterr().out
    assert "wallclock_ratio" in json.loads((out / "report.meta.json").read_text())["timings"]
    assert run("evaluate", "--config", cfg) == 0
    assert (out / "report.json").read_bytes() == first
    (out / "report.md").unlink()
    assert run("report", "--config", cfg) == 0
    assert "| defense |" in (out / "report.md").read_text()


def test_exit_codes(tmp_path):
    assert run("gen-data", "--config", tmp_path / "missing.json") == 2
    assert run("frobnicate") == 2
    cfg = write_config(tmp_path)
    assert run("evaluate", "--config", cfg) == 3
    assert run("gen-data", "--config", cfg) == 0
    assert run("train", "--config", cfg) == 0
    # another seed changes the training digest: refuse without --force
    assert run("evaluate", "--config", cfg, "--seed", 5) == 3
    assert run("evaluate", "--config", cfg, "--seed", 5, "--force") == 0
    assert run("report", "--input", tmp_path / "nope.json") == 3
    assert run("gen-data", "--config", cfg, "--threads", 0) == 2
    bad = write_config(tmp_path, defense={"kind": "hedge", "overrides": {"radius": -1}})
    assert run("evaluate", "--config", bad) == 2


def test_aid_pipeline_trains_discriminator(tmp_path):
    cfg = write_config(
        tmp_path,
        defense={"kind": "aid"},
        aux={"discriminator": {"widths": [8], "train": {"epochs": 1}}},
        plan={**FAST_PLAN, "stages": ["whitebox"], "n_eval": 10},
    )
    assert run("gen-data", "--config", cfg) == 0
    assert run("train", "--config", cfg) == 0
    disc = models.load_checkpoint(tmp_path / "out" / "checkpoints" / "discriminator.json")
    assert disc.mode == "aid"
    assert run("evaluate", "--config", cfg) == 0
    assert cli.aux_specs(RunConfig.load(cfg))["discriminator"]["mode"] == "aid"
