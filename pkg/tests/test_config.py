import json

import pytest
from pydantic import ValidationError

from diva.config import ExperimentConfig, IncrementalSchedule, MoveConfig, PriorConfig, load_config
from diva.errors import ConfigError


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.vae.hidden_dims == [256, 64]
    assert cfg.vae.latent_dim == 16
    assert cfg.moves.min_atoms_new_comp == 80
    assert cfg.moves.min_atoms_retain_comp == 100
    assert cfg.dpmm_steps == 5
    assert cfg.prior.alpha == 5.0


def test_prior_defaults_nu_from_dimension():
    prior = PriorConfig().to_prior(16)
    assert prior.nu == 18.0
    assert prior.mu0.shape == (16,)


def test_disabled_moves():
    moves = MoveConfig(shuffle_enabled=True).disabled()
    assert not (moves.birth_enabled or moves.merge_enabled or moves.shuffle_enabled)


def test_unknown_keys_are_rejected():
    with pytest.raises(ValidationError):
        ExperimentConfig(learning_rate=0.1)


def test_schedule_must_only_add_classes():
    with pytest.raises(ValidationError):
        IncrementalSchedule.from_mapping({0: [0, 1], 10: [1, 2]})
    with pytest.raises(ValidationError):
        IncrementalSchedule.model_validate({"milestones": [{"epoch": 5, "classes": [0]},
                                                           {"epoch": 5, "classes": [0, 1]}]})


def test_schedule_lookup():
    schedule = IncrementalSchedule.from_mapping({0: [0, 1, 2], 30: [0, 1, 2, 3, 4]})
    assert schedule.active_classes(29) == [0, 1, 2]
    assert schedule.active_classes(30) == [0, 1, 2, 3, 4]


def test_load_config_applies_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 4, "max_epochs": 10}))
    cfg = load_config(path, seed=None, max_epochs=2)
    assert cfg.seed == 4 and cfg.max_epochs == 2


def test_load_config_errors(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(broken)

    invalid = tmp_path / "invalid.json"
    invalid.write_text(json.dumps({"vae": {"hidden_dims": [0]}}))
    with pytest.raises(ConfigError):
        load_config(invalid)
