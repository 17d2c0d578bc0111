import pytest

from pullseg.trainer import config
from pullseg.utils import errors


def test_render_parse_round_trip(micro_cfg):
    assert config.parse(config.render(micro_cfg)) == micro_cfg
    weighted = config.parse(config.render(micro_cfg), drw_mode="fixed", fixed_weights=(1.0, 2.0, 0.5))
    assert config.parse(config.render(weighted)) == weighted


def test_render_forms():
    text = config.render(config.RunConfig())
    assert "strong_aug = true\n" in text
    assert "widths = 16,32\n" in text
    assert "fixed_weights = \n" in text
    assert "lr_encoder = 0.0005\n" in text


def test_parse_comments_and_overrides():
    cfg = config.parse("# a comment\nseed = 3  # trailing\n\ntau = 0.5\n", classes=3)
    assert (cfg.seed, cfg.tau, cfg.classes) == (3, 0.5, 3)


@pytest.mark.parametrize(
    "text",
    [
        "colour = red\n",
        "seed 3\n",
        "seed = three\n",
        "strong_aug = maybe\n",
        "mode = semi\n",
        "m = 63\n",
        "alpha = 1.5\n",
        "height = 66\n",
        "mode = dg\ntarget_batch = 0\n",
        "iters = -1\n",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(errors.ConfigInvalid):
        config.parse(text)


def test_presets(micro_cfg):
    dg = config.preset("dg", micro_cfg)
    assert dg.is_dg and dg.target_batch == 0 and dg.engine == "color_jitter"
    assert dg.seed == micro_cfg.seed
    source_only = config.preset("source_only", micro_cfg)
    assert source_only.lambda_pull == 0.0 and source_only.delta_p > 1.0
    assert config.preset("full", micro_cfg, tau=0.1).tau == 0.1
    with pytest.raises(errors.ConfigInvalid):
        config.preset("oracle")


@pytest.mark.parametrize(
    "name,query,positive,negative,pseudo_target_ce",
    [
        ("vanilla_contrast", "source", "source", "source", False),
        ("source_to_target", "source", "target", "source_target", False),
        ("source_to_pseudo_target", "source", "pseudo_target", "source_target", False),
        ("pseudo_target_to_source_src_negatives", "pseudo_target", "source", "source", False),
        ("full", "pseudo_target", "source", "source_target", False),
        ("full_pseudo_target_ce", "pseudo_target", "source", "source_target", True),
    ],
)
def test_pair_direction_presets(micro_cfg, name, query, positive, negative, pseudo_target_ce):
    cfg = config.preset(name, config.preset("vanilla_contrast", micro_cfg))
    pairing = cfg.pairing_config()
    assert pairing.query_domain.value == query
    assert pairing.positive_domain.value == positive
    assert pairing.negative_domain.value == negative
    assert cfg.pseudo_target_ce is pseudo_target_ce
    assert cfg.lambda_pull > 0


def test_cross_entropy_presets(micro_cfg):
    fda = config.preset("fda_ce", micro_cfg)
    assert fda.pseudo_target_ce and fda.lambda_pull == 0.0
    assert not config.preset("self_training", fda).pseudo_target_ce
    with pytest.raises(errors.ConfigInvalid):
        config.parse("query_domain = target\n")


def test_full_scale():
    cfg = config.RunConfig.full_scale()
    assert (cfg.n, cfg.m, cfg.tau, cfg.eta, cfg.delta_p) == (128, 1024, 0.2, 0.999, 0.968)


def test_env_seed(monkeypatch, micro_cfg):
    assert config.with_env(micro_cfg) is micro_cfg
    monkeypatch.setenv("T2S_SEED", "11")
    assert config.with_env(micro_cfg).seed == 11
    monkeypatch.setenv("T2S_SEED", "eleven")
    assert config.with_env(micro_cfg).seed == micro_cfg.seed


def test_hash_ignores_run_length(micro_cfg):
    digest = config.config_hash(micro_cfg)
    assert len(digest) == 32
    assert config.config_hash(config.parse(config.render(micro_cfg), iters=50)) == digest
    assert config.config_hash(config.parse(config.render(micro_cfg), eval_every=9)) == digest
    assert config.config_hash(config.parse(config.render(micro_cfg), tau=0.3)) != digest


def test_save_and_load(tmp_path, micro_cfg):
    path = config.save(micro_cfg, tmp_path / "run")
    assert path.name == config.CONFIG_FILE
    assert config.load(tmp_path / "run") == micro_cfg
    assert config.load(path, seed=2).seed == 2
    with pytest.raises(errors.IoError):
        config.load(tmp_path / "nowhere")
