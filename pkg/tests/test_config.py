import pytest

from sparseadv.config import (
    OUTPUT_ROOT_ENV,
    ConfigError,
    dump_config,
    freeze_config,
    parse_config,
)


def _write(tmp_path, text):
    p = tmp_path / "run.ini"
    p.write_text(text)
    return p


def test_empty_file_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, ""))
    assert (cfg.attack.tau, cfg.attack.p, cfg.attack.kappa) == (0.5, 0.5, 0.0)


def test_dotted_epsilon_converts_to_unit_scale(tmp_path):
    cfg = parse_config(_write(tmp_path, "attack.epsilon = 10\n"))
    assert cfg.attack.epsilon_unit == pytest.approx(10 / 255)
    assert cfg.generator_config.epsilon == 10
    assert cfg.train_config.attack.epsilon == 10


def test_sections_and_overrides(tmp_path):
    path = _write(tmp_path, "seed = 4\n[train]\nepochs = 3\nste = yes\n[eval]\ntargets = small-vgg\n")
    cfg = parse_config(path, [("train.epochs", "5"), ("attack.target_class", "2")])
    assert cfg.seed == 4 and cfg.train.epochs == 5 and cfg.train.ste is True
    assert cfg.train_config.seed == 4
    assert cfg.eval.targets == ["small-vgg"]
    assert cfg.attack.target_class == 2


def test_misspelled_key_names_key_and_line(tmp_path):
    path = _write(tmp_path, "[attack]\ntau = 0.5\nlamda_s = 1\n")
    with pytest.raises(ConfigError) as err:
        parse_config(path)
    assert err.value.key == "attack.lamda_s"
    assert err.value.location == f"{path}:3"
    assert "lamda_s" in str(err.value)


def test_type_mismatch(tmp_path):
    with pytest.raises(ConfigError, match="train.epochs"):
        parse_config(_write(tmp_path, "[train]\nepochs = many\n"))


def test_unknown_section(tmp_path):
    with pytest.raises(ConfigError, match="optimizer"):
        parse_config(_write(tmp_path, "[optimizer]\nlr = 1\n"))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.ini")


@pytest.mark.parametrize("override", [("attack.tau", "1.5"), ("train.ste", "maybe"),
                                      ("eval.targets", "small-vit"), ("paths.dataset", ""),
                                      ("train.seed", "3"), ("generator.epsilon", "3")])
def test_invalid_values(override):
    with pytest.raises(ConfigError):
        parse_config(None, [override])


def test_dump_round_trips(tmp_path):
    cfg = parse_config(None, [("attack.epsilon", "12"), ("train.target_sparsity", "0.05"),
                              ("ablate.seeds", "0,1,2")], command="ablate")
    path = freeze_config(cfg, tmp_path)
    again = parse_config(path)
    assert dump_config(again) == dump_config(cfg)
    assert again.ablate.seeds == [0, 1, 2] and again.command == "ablate"


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    cfg = parse_config(None)
    assert cfg.output_dir() == tmp_path / "runs"
    assert cfg.checkpoint_dir() == tmp_path / "checkpoints"


def test_inline_comments_are_ignored(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[attack]\nepsilon = 10   ; l-inf bound\n[eval]\nattack = pgd0 # baseline\n")
    cfg = parse_config(path, command="eval")
    assert cfg.attack.epsilon == 10.0
    assert cfg.eval.attack == "pgd0"
