import json
from pathlib import Path

import pytest

from fnac.cli import main, split_overrides, UsageError
from fnac.config import ConfigError, RunConfig, apply_overrides, resolve

FAST = ["--train.epochs", "2", "--train.warmup_epochs", "1", "--train.steps_per_epoch", "3",
        "--train.batch_size", "8", "--train.hidden", "8", "--train.d", "4",
        "--world.h", "3", "--world.w", "3", "--world.region_min", "2", "--world.region_max", "4",
        "--experiment.eval_size", "16"]


def only_run(root: Path) -> Path:
    dirs = [p for p in root.iterdir() if p.is_dir()]
    assert len(dirs) == 1
    return dirs[0]


def files(d: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_train_twice_gives_identical_products(tmp_path, capsys):
    for k in ("a", "b"):
        assert main(["train", "--seed", "7", "--out", str(tmp_path / k), *FAST]) == 0
    a, b = files(only_run(tmp_path / "a")), files(only_run(tmp_path / "b"))
    assert set(a) == {"checkpoint.json", "config.json", "log.csv", "metrics.json"}
    assert a == b
    assert "ciou" in capsys.readouterr().out


def test_config_echo_replays_run(tmp_path):
    assert main(["train", "--seed", "3", "--out", str(tmp_path / "a"), *FAST]) == 0
    first = only_run(tmp_path / "a")
    assert main(["train", "--config", str(first / "config.json"), "--out", str(tmp_path / "b")]) == 0
    assert files(first) == files(only_run(tmp_path / "b"))


def test_eval_and_dump_sim_matrix(tmp_path):
    assert main(["train", "--out", str(tmp_path / "t"), *FAST]) == 0
    ckpt = only_run(tmp_path / "t") / "checkpoint.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--out", str(tmp_path / "e"),
                 "--experiment.eval_size", "16"]) == 0
    ev = only_run(tmp_path / "e")
    train_metrics = json.loads((ckpt.parent / "metrics.json").read_text())
    assert json.loads((ev / "metrics.json").read_text()) == train_metrics
    assert main(["dump-sim-matrix", "--checkpoint", str(ckpt), "--out", str(tmp_path / "s"),
                 "--experiment.margin_batch", "6"]) == 0
    names = set(files(only_run(tmp_path / "s")))
    assert {"sim_model_fn_seed0.csv", "sim_model_tn_seed0.csv", "margins.json"} <= names


def test_gen_data_is_deterministic(tmp_path):
    for k in ("a", "b"):
        assert main(["gen-data", "--n", "17", "--seed", "2", "--out", str(tmp_path / k),
                     "--train.batch_size", "8", "--train.fn_rate", "0.5"]) == 0
    a = files(only_run(tmp_path / "a"))
    assert a == files(only_run(tmp_path / "b"))
    assert len(a["samples.jsonl"].splitlines()) == 17


def test_fn_incidence_prints_closed_form(tmp_path, capsys):
    assert main(["fn-incidence", "--classes", "309", "--batch", "128", "--out", str(tmp_path)]) == 0
    assert "analytic 0.337457" in capsys.readouterr().out


def test_fn_incidence_histogram_file(tmp_path):
    (tmp_path / "h.txt").write_text("3\n1\n1\n")
    assert main(["fn-incidence", "--histogram", str(tmp_path / "h.txt"), "--batch", "3",
                 "--out", str(tmp_path / "o")]) == 0
    doc = json.loads((only_run(tmp_path / "o") / "incidence.json").read_text())
    assert doc["classes"] == 3 and 0 < doc["analytic"] < 1


@pytest.mark.parametrize("argv", [["bogus"], ["train", "--nonsense"], ["train", "--world.nope", "1"],
                                  ["train", "--train.lr", "fast"], ["train", "--train.batch_size", "1"],
                                  ["eval", "--checkpoint", "/nonexistent.json"], [],
                                  ["train", "--threads", "0"]])
def test_usage_and_validation_errors_exit_one(argv, tmp_path, capsys):
    assert main([*argv, "--out", str(tmp_path)] if argv else argv) == 1
    assert capsys.readouterr().err
    assert not any(tmp_path.iterdir())


def test_runtime_failure_exits_two(tmp_path):
    bad = tmp_path / "ckpt.json"
    bad.write_text("{not json")
    assert main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("FNAC_OUT", str(tmp_path / "env"))
    assert main(["fn-incidence", "--classes", "10", "--batch", "4"]) == 0
    assert only_run(tmp_path / "env").name.startswith("fn-incidence-")


def test_toml_config_and_overrides(tmp_path):
    (tmp_path / "c.toml").write_text('[world]\nn_classes = 12\n[loss]\ngamma = 4.0\n'
                                     '[experiment]\nseeds = [5, 6]\n')
    cfg = resolve(tmp_path / "c.toml", [("loss.tau", "0.1"), ("train.decoupled_weight_decay", "false"),
                                         ("experiment.rates", "0,0.5,1")])
    assert cfg.world.n_classes == 12
    assert cfg.train.hyperparams.gamma == 4.0 and cfg.train.hyperparams.tau == 0.1
    assert cfg.train.decoupled_weight_decay is False
    assert cfg.experiment.seeds == (5, 6) and cfg.experiment.rates == (0.0, 0.5, 1.0)
    reseeded = resolve(tmp_path / "c.toml", [], seed=9)
    assert reseeded.experiment.seeds == (9, 10) and reseeded.world.seed == 9 == reseeded.train.seed


def test_config_round_trip():
    cfg = resolve(None, [("world.h", "4"), ("loss.alpha", "2.5")])
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg


@pytest.mark.parametrize("doc", [{"bogus": {}}, {"world": {"colour": 1}}, {"loss": {"tau": -1.0}}])
def test_bad_documents(doc, tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        resolve(path)


def test_override_token_forms():
    assert split_overrides(["--a.b", "1", "--c.d=2"]) == [("a.b", "1"), ("c.d", "2")]
    with pytest.raises(UsageError):
        split_overrides(["--a.b"])
    with pytest.raises(ConfigError):
        apply_overrides({}, [("world.seed", "x")])


def test_gradcheck_subcommand(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    assert "gradient checks passed" in capsys.readouterr().out
