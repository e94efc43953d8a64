import pytest

from nesyad.config import ConfigError, PipelineConfig, load_config


def test_defaults_validate():
    PipelineConfig().validate()


def test_missing_keys_take_defaults():
    cfg = load_config(text="[ddpm]\nT = 50\n")
    assert cfg.ddpm.T == 50 and cfg.ddpm.hidden == PipelineConfig().ddpm.hidden


@pytest.mark.parametrize("text,msg", [
    ("[ddpm]\nwidth = 3\n", "unknown key"),
    ("[model]\nT = 3\n", "unknown config section"),
    ("[ddpm]\nT = ten\n", "cannot parse"),
    ("[rff]\nclass_weight = maybe\n", "cannot parse"),
    ("not ini at all", "malformed"),
])
def test_load_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        load_config(text=text)


def test_missing_file():
    with pytest.raises(ConfigError, match="does not exist"):
        load_config("/nonexistent/run.ini")


def test_lambda_needs_a_kb():
    cfg = load_config(text="[nesy]\nlambda = 0.5\n")
    assert cfg.nesy.lam == 0.5
    with pytest.raises(ConfigError, match="requires nesy.kb"):
        cfg.validate()


@pytest.mark.parametrize("text", [
    "[ddpm]\nbeta_start = 0.1\nbeta_end = 0.01\n",
    "[ddpm]\nT = 1\n",
    "[ddpm]\nlevels = 3\n",
    "[ddpm]\nlevels = 1,200\n",
    "[rff]\nsigma = -1\n",
    "[rff]\nmetric = mahalanobis\n",
    "[nesy]\nquantifier = max\n",
    "[data]\nanomaly_rate = 0.9\n",
])
def test_invalid_values(text):
    with pytest.raises(ConfigError):
        load_config(text=text).validate()


def test_explicit_levels():
    assert load_config(text="[ddpm]\nlevels = 5, 10, 20\n").levels() == [5, 10, 20]


def test_ini_round_trip():
    cfg = load_config(text="[nesy]\nlambda = 0.25\n[rff]\nclass_weight = false\nD = 64\n")
    text = cfg.to_ini()
    assert "lambda = 0.25" in text
    again = load_config(text=text)
    assert again.to_ini() == text
    assert again.rff.class_weight is False and again.rff.D == 64


def test_seed_override_reaches_every_stage():
    cfg = PipelineConfig().with_seed(123)
    assert cfg.data.seed == cfg.ddpm.seed == cfg.rff.seed == 123
    assert PipelineConfig().data.seed != 123


def test_relative_paths_resolve_against_the_config(tmp_path):
    (tmp_path / "k.kb").write_text("")
    ini = tmp_path / "run.ini"
    ini.write_text("[nesy]\nkb = k.kb\n")
    cfg = load_config(ini)
    assert cfg.kb_path() == tmp_path / "k.kb"
    cfg.validate()
