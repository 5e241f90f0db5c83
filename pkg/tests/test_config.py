import pytest

from dppo.config import RunConfig, content_hash, dumps, load, loads
from dppo.terrain import ConfigError
from conftest import tiny_run


def test_default_round_trip():
    assert loads(dumps(RunConfig())) == RunConfig()


def test_modified_round_trip():
    run = tiny_run(noise={"grid": 0.1, "joints": 0.02}, dppo={"alpha": 1.0, "beta": 0.0},
                   eval={"kinds": ("flat", "stairs"), "noise_levels": (0.0, 0.05, 0.1)})
    back = loads(dumps(run))
    assert back == run
    assert back.eval.noise_levels == (0.0, 0.05, 0.1)
    assert dumps(back) == dumps(run)


def test_partial_file_uses_defaults_and_comments():
    text = """
# a comment
[ppo]
lr = 0.001   # inline comment
epochs = 3
[stage]
kinds = flat, stairs
map_pipeline = true
"""
    run = loads(text)
    assert run.ppo.lr == 0.001 and run.ppo.epochs == 3
    assert run.stage.kinds == ("flat", "stairs") and run.stage.map_pipeline is True
    assert run.env == RunConfig().env


@pytest.mark.parametrize("text,match", [
    ("[bogus]\nx = 1\n", "bogus"),
    ("[ppo]\nlearning_rate = 1\n", "learning_rate"),
    ("[ppo]\nepochs = three\n", "epochs"),
    ("[ppo]\ngamma = 2.0\n", "gamma"),
    ("[stage]\nkinds = flat, lava\n", "lava"),
    ("[stage]\nmap_pipeline = maybe\n", "map_pipeline"),
    ("x = 1\n", "malformed|outside"),
    ("[ppo]\nlr = 1\n[ppo]\nlr = 2\n", "malformed"),
])
def test_errors_name_the_problem(text, match):
    with pytest.raises(ConfigError, match=match):
        loads(text)


def test_load_from_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(dumps(tiny_run()))
    assert load(p) == tiny_run()


def test_content_hash_is_git_blob_sha1():
    assert content_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert content_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


@pytest.mark.parametrize("path", ["teacher.cfg", "student_dppo.cfg", "student_distill.cfg", "student_rl.cfg",
                                  "eval_flat.cfg", "eval_mixed.cfg"])
def test_shipped_configs_parse(path):
    from pathlib import Path
    cfg = Path(__file__).resolve().parents[1] / "configs" / path
    load(cfg)
