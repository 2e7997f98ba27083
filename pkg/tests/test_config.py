import pytest

from twostage_anomaly.config import ExperimentConfig, apply_overrides, iter_keys
from twostage_anomaly.errors import ConfigError


def test_defaults_follow_published_schedule():
    cfg = ExperimentConfig()
    assert cfg.image_size == 256 and cfg.ie.d_z == 256
    assert (cfg.ie.lam_kl, cfg.ie.lam_rec) == (1.0, 10.0)
    assert cfg.pm.alpha == 0.5 and cfg.pm.layer_weights == (1.0, 1.0, 1.0)
    assert cfg.pm.layers == ("conv1_2", "conv2_2", "conv3_4")
    tr = cfg.train
    assert (tr.ie_optimizer, tr.ie_lr, tr.ie_momentum, tr.batch_size) == ("sgd", 1e-3, 0.9, 4)
    assert (tr.expert_optimizer, tr.expert_lr, tr.ie_epochs) == ("adam", 1e-3, 200)


@pytest.mark.parametrize("factory", [ExperimentConfig, ExperimentConfig.small,
                                     ExperimentConfig.desk])
def test_yaml_round_trip(tmp_path, factory):
    cfg = factory()
    cfg.save(tmp_path / "c.yaml")
    again = ExperimentConfig.load(tmp_path / "c.yaml")
    assert again == cfg
    assert again.fingerprint() == cfg.fingerprint()


def test_overrides_typed():
    cfg = apply_overrides(ExperimentConfig(), ["ie.d_z=32", "pm.alpha=0.25",
                                               "ablation.use_mi_loss=false",
                                               "pm.layers=conv1_2,conv2_2",
                                               "pm.layer_weights=1,2"])
    assert cfg.ie.d_z == 32 and cfg.pm.alpha == 0.25
    assert cfg.ablation.use_mi_loss is False
    assert cfg.pm.layers == ("conv1_2", "conv2_2") and cfg.pm.layer_weights == (1.0, 2.0)


@pytest.mark.parametrize("override", ["ie.nope=1", "ie.d_z=abc", "ie.d_z=1.5",
                                      "ablation.use_mi_loss=3", "pm.alpha=2", "train.ie_lr=0",
                                      "novalue"])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), [override])


def test_toggles_independent():
    cfg = apply_overrides(ExperimentConfig(), {"ablation.use_detail_guidance": False})
    ab = cfg.ablation
    assert (ab.use_mi_loss, ab.use_expert_net, ab.use_detail_guidance,
            ab.use_naive_impression_term) == (True, True, False, True)


def test_model_fingerprint_ignores_training_keys():
    a = ExperimentConfig.desk()
    b = apply_overrides(a, ["train.ie_lr=0.01", "pm.alpha=0.3"])
    c = apply_overrides(a, ["ie.d_z=32"])
    assert a.model_fingerprint() == b.model_fingerprint() != c.model_fingerprint()
    assert a.fingerprint() != b.fingerprint()


def test_iter_keys_covers_tree():
    keys = {k for k, _, _ in iter_keys()}
    assert {"image_size", "ie.d_z", "expert.d_s", "pm.alpha", "train.ie_lr",
            "ablation.use_naive_impression_term"} <= keys
    assert len(keys) == len(list(iter_keys()))


def test_load_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("ie: [unclosed")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(bad)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.yaml")
