import pytest

from adaptdiff.config import ConfigError, PipelineConfig, parse_config, parse_config_text


def test_empty_file_defaults(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("")
    cfg = parse_config(p)
    assert (cfg.T, cfg.beta_start, cfg.beta_end) == (300, 1e-4, 0.02)
    assert cfg.epochs_diffusion == 100 and cfg.lr_diffusion == 1e-3 and cfg.lr_decay_every_diffusion == 5
    assert cfg.epochs_finetune == 20 and cfg.lr_finetune == 5e-3 and cfg.lr_decay_every_finetune == 4
    assert cfg.lr_decay_factor == 0.5
    assert cfg.pollution_fp == (0.0, 0.1, 0.2, 0.4, 0.6)
    assert cfg.pollution_fn == (0.0, 0.1, 0.2, 0.3)


def test_values_and_comments():
    cfg = parse_config_text(
        "# comment\nepochs_finetune = 20\nseed=7  # trailing\n"
        "target_styles = targetB\nsample_count = all\npollution_grid = 0, 0.6 x 0, 0.3\n"
        "finetune_mix_source = yes\n"
    )
    assert cfg.epochs_finetune == 20
    assert cfg.seed == 7
    assert cfg.target_styles == ("targetB",)
    assert cfg.sample_count is None
    assert cfg.pollution_fp == (0.0, 0.6) and cfg.pollution_fn == (0.0, 0.3)
    assert cfg.finetune_mix_source is True


@pytest.mark.parametrize("text,line,key", [
    ("T = 0\n", None, None),
    ("seed = 1\nbogus = 3\n", 2, "bogus"),
    ("\n\nepochs_seg = ten\n", 3, "epochs_seg"),
    ("no equals sign\n", 1, None),
    ("epochs_seg = 0\n", None, "epochs_seg"),
    ("pseudo_threshold = 1.5\n", None, "pseudo_threshold"),
    ("target_styles = nope\n", None, "target_styles"),
    ("image_size = 60\n", None, None),
])
def test_errors(text, line, key):
    with pytest.raises(ConfigError) as e:
        parse_config_text(text)
    if line is not None:
        assert e.value.line == line
        assert f"line {line}" in str(e.value)
    if key is not None:
        assert e.value.key == key


def test_dumps_round_trip():
    cfg = PipelineConfig(seed=3, target_styles=("targetA",), sample_count=12).validate()
    assert parse_config_text(cfg.dumps()) == cfg
