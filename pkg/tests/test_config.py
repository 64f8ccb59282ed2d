import pytest

from diffant.config import PROFILES, ConfigError, RunConfig, apply_lines, load_config, make_config


@pytest.mark.parametrize("profile", sorted(PROFILES))
def test_profiles_validate_and_roundtrip(profile):
    cfg = make_config(profile)
    assert cfg.data.profile == profile
    again = apply_lines(RunConfig(), cfg.dumps().splitlines())
    assert again.flat() == cfg.flat()


def test_profile_defaults():
    bf = make_config("breakfast")
    assert (bf.model.hidden_dim, bf.model.decoder_dim, bf.model.num_queries) == (256, 1024, 8)
    assert bf.schedule.S == 1000 and bf.train.grad_clip == 1.0
    assert make_config("salads50").model.decoder_layers == 8
    assert make_config("epic").model.multilabel and make_config("egtea").model.num_queries == 1
    assert make_config("synthetic-ambiguous").data.ambiguity == 0.5


def test_overrides_and_file_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("data.profile=salads50\n# comment\ntrain.lr=0.01  # trailing\nmodel.num_queries=4\n")
    cfg = load_config(path, ["model.num_queries=6"])
    assert cfg.data.profile == "salads50" and cfg.train.lr == 0.01 and cfg.model.num_queries == 6
    assert make_config("breakfast", ["train.alphas=0.2,0.8"]).train.alphas == (0.2, 0.8)


@pytest.mark.parametrize("line,key", [
    ("model.heads=3", "model.hidden_dim"),
    ("model.nope=1", "model.nope"),
    ("train.lr=fast", "train.lr"),
    ("infer.num_steps=2000", "infer.num_steps"),
    ("schedule.kind=cosine", "schedule.kind"),
    ("infer.noise=pink", "infer.noise"),
    ("model.max_steps=10", "model.max_steps"),
    ("train.alphas=0.2,1.5", "train.alphas"),
    ("data.eval_beta=0.9", "data.eval_alpha"),
])
def test_errors_name_the_offending_key(line, key):
    with pytest.raises(ConfigError) as exc:
        make_config("breakfast", [line])
    assert exc.value.key == key
    assert key in str(exc.value)


def test_local_mask_windows_checked():
    make_config("breakfast", ["model.mask_kind=local"])
    with pytest.raises(ConfigError) as exc:
        make_config("breakfast", ["model.mask_kind=local", "model.windows=9,4"])
    assert exc.value.key == "model.windows"


def test_unknown_profile():
    with pytest.raises(ConfigError):
        make_config("kinetics")
    with pytest.raises(ConfigError):
        apply_lines(RunConfig(), ["no equals sign"])
