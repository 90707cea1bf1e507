import pytest
import yaml

from p2g.config import (
    ConfigError, backbone_config, defaults, generator_config, resolve, run_config, write_snapshot,
)


def test_defaults_match_desk_scale():
    cfg = resolve()
    assert cfg["backbone.hidden_size"] == 128 and cfg["backbone.layer_count"] == 4
    assert cfg["run.batch_size"] == 8 and cfg["run.steps"] == 2000
    assert cfg["run.backbone_lr"] == 1e-4 and cfg["run.head_lr"] == 3e-4 and cfg["run.weight_decay"] == 1e-8
    assert cfg["model.lam"] == 1.0 and cfg["model.label_token_count"] == 3 and cfg["model.sign"] == "negated"
    assert cfg["data.candidate_count"] == 5 and cfg["data.scenario_count"] >= 4
    assert cfg["sweep.n_values"] == [0, 1, 2, 4, 6, 8, 10]


def test_layering_order(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"seed": 3, "run": {"steps": 10, "head_lr": 0.01}}))
    cfg = resolve(path, ["run.steps=20"], {"seed": 5})
    assert cfg["run.steps"] == 20 and cfg["run.head_lr"] == 0.01 and cfg["seed"] == 5


@pytest.mark.parametrize("item, key, value", [
    ("run.head_lr=1e-4", "run.head_lr", 1e-4),
    ("run.steps=7", "run.steps", 7),
    ("flags.no_pe_variance=true", "flags.no_pe_variance", True),
    ("model.sign=paper-literal", "model.sign", "paper-literal"),
    ("sweep.lambda_values=[0.5, 2]", "sweep.lambda_values", [0.5, 2]),
])
def test_override_coercion(item, key, value):
    assert resolve(overrides=[item])[key] == value


@pytest.mark.parametrize("item", ["nope=1", "run.steps=1.5", "flags.static_prompt=maybe", "run.steps"])
def test_bad_overrides(item):
    with pytest.raises(ConfigError):
        resolve(overrides=[item])


def test_snapshot_round_trip(tmp_path):
    cfg = resolve(overrides=["run.steps=11", "data.seed=4"])
    write_snapshot(cfg, "train", tmp_path / "s.yaml")
    assert resolve(tmp_path / "s.yaml") == cfg


def test_split_seeds_differ():
    cfg = resolve(overrides=["data.seed=2"])
    seeds = {generator_config(cfg, s).seed for s in ("train", "dev", "test")}
    assert seeds == {2000, 2001, 2002}
    assert generator_config(cfg, "dev").instance_count == 2000


def test_converters():
    cfg = resolve(overrides=["flags.static_prompt=true", "model.lam=0.5", "seed=9"])
    rc = run_config(cfg)
    assert rc.flags.static_prompt and rc.model.lam == 0.5 and rc.seed == 9
    assert backbone_config(cfg).hidden_size == 128
    assert set(defaults()) == set(cfg)
