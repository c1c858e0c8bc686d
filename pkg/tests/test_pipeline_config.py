import json

import pytest

from pipeline_config import ConfigError, PipelineConfig, load_config


def test_defaults_cover_every_stage():
    payload = PipelineConfig().to_dict()

    assert set(payload) == {"tracker", "stitch", "codec", "transitions", "synthesis", "assets"}
    assert payload["transitions"] == {"window": 4, "search": 3}
    assert payload["synthesis"]["solver"] == "chain"


def test_partial_section_keeps_other_defaults():
    config = PipelineConfig.from_dict({"synthesis": {"transition_weight": 2}, "codec": {"alpha": None}})

    assert config.synthesis.transition_weight == 2
    assert config.synthesis.blend_radius == PipelineConfig().synthesis.blend_radius
    assert config.codec.alpha is None
    assert config.tracker == PipelineConfig().tracker


def test_overlay_on_base():
    base = PipelineConfig.from_dict({"codec": {"latent_dim": 16}})
    config = PipelineConfig.from_dict({"codec": {"roi_width": 20}}, base=base)

    assert config.codec.latent_dim == 16
    assert config.codec.roi.width == 20


def test_to_dict_round_trip():
    config = PipelineConfig.from_dict({"stitch": {"atlas_size": 64}, "synthesis": {"solver": "alpha"}})

    assert PipelineConfig.from_dict(config.to_dict()) == config


@pytest.mark.parametrize(
    "payload",
    [
        {"renderer": {}},
        {"synthesis": {"transition_weigth": 1.0}},
        {"synthesis": []},
        [],
    ],
)
def test_unknown_or_malformed_structure_rejected(payload):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(payload)


@pytest.mark.parametrize(
    "payload",
    [
        {"transitions": {"window": 2.5}},
        {"transitions": {"window": True}},
        {"synthesis": {"fps": "25"}},
        {"synthesis": {"solver": 1}},
        {"codec": {"alpha": "auto"}},
    ],
)
def test_wrong_types_rejected(payload):
    with pytest.raises(ConfigError, match="has type"):
        PipelineConfig.from_dict(payload)


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError, match="codec"):
        PipelineConfig.from_dict({"codec": {"latent_dim": 0}})


def test_load_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"assets": {"dictionary": "visemes.json"}}), encoding="utf-8")

    assert load_config(None) == PipelineConfig()
    assert load_config(path).assets.dictionary == "visemes.json"


def test_config_error_is_runtime_error():
    assert issubclass(ConfigError, RuntimeError)
