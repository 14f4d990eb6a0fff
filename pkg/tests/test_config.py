from pathlib import Path

import pytest

from cxr_ef.config import OUTPUT_ROOT_ENV, ConfigError, RunConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_default_roundtrip():
    cfg = RunConfig()
    assert RunConfig.loads(cfg.dumps()) == cfg


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.yaml")))
def test_shipped_configs_parse_and_roundtrip(name):
    cfg = RunConfig.load(CONFIGS / name)
    assert RunConfig.loads(cfg.dumps()) == cfg


@pytest.mark.parametrize("text,fragment", [
    ("colour: red", "colour"),
    ("train: {learning_rate: 0.1}", "train.learning_rate"),
    ("train: {augmentation: {flip: true}}", "train.augmentation.flip"),
    ("train: {max_epochs: ten}", "train.max_epochs"),
    ("train: {max_epochs: 2.5}", "train.max_epochs"),
    ("train: {augmentation: {crop_enabled: 1}}", "crop_enabled"),
    ("split: {fractions: [0.5, 0.5, 0.5]}", "sum to 1"),
    ("split: {fractions: 0.5}", "must be a list"),
    ("model: {backbone: vgg}", "vgg"),
    ("model: {backbone: resnet50, input_size: [100, 100]}", "multiple of 32"),
    ("evaluation: {subgroups: [age]}", "age"),
    ("evaluation: {lo_threshold: 0.95}", "thresholds"),
    ("explain: {methods: [lime]}", "lime"),
    ("explain: {colormap: nonsense}", "nonsense"),
    ("explain: {alpha: 2}", "alpha"),
    ("run_id: ../escape", "run_id"),
    ("cohort: {source: s3}", "cohort.source"),
    ("[1, 2]", "mapping"),
    ("train: [1", "invalid YAML"),
])
def test_fail_closed(text, fragment):
    with pytest.raises(ConfigError, match=None) as exc:
        RunConfig.loads(text)
    assert fragment in str(exc.value)


def test_empty_file_is_defaults():
    assert RunConfig.loads("") == RunConfig()


def test_partial_override_keeps_defaults():
    cfg = RunConfig.loads("train: {max_epochs: 3}\nmodel: {input_size: [32, 32]}")
    assert cfg.train.max_epochs == 3 and cfg.train.batch_size == 16
    assert cfg.model_config().input_size == (32, 32)


def test_ints_accepted_for_floats():
    assert RunConfig.loads("train: {initial_lr: 1}").train.initial_lr == 1.0


def test_output_dir_resolution(monkeypatch, tmp_path):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert RunConfig().output_dir() == Path("out") / "synthetic-tinyconv"
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert RunConfig().output_dir() == tmp_path / "synthetic-tinyconv"
    assert RunConfig.loads("output_root: /x").output_dir() == Path("/x/synthetic-tinyconv")


def test_domain_objects():
    cfg = RunConfig()
    tc = cfg.train_config()
    assert tc.augmentation.active
    assert not cfg.augmentation_policy(enabled=False).active
    assert cfg.model_config().backbone.value == "tinyconv"


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        RunConfig.load("/nonexistent/config.yaml")
