import pytest
from pydantic import ValidationError

from app.config import Settings
from app.models.errors import ConfigError
from app.models.schemas import LossBreakdown, LossWeights, MetricReport, ModelArchitecture, TrainConfig


def test_settings_read_prefixed_environment(monkeypatch):
    monkeypatch.setenv("REFCOMP_KNN_CHUNK_ROWS", "7")
    monkeypatch.setenv("REFCOMP_CLOUD_FORMAT", "xyz")
    settings = Settings()
    assert settings.knn_chunk_rows == 7
    assert settings.cloud_format == "xyz"


def test_desk_and_full_scale_presets():
    desk = TrainConfig()
    assert (desk.epochs, desk.batch_size) == (30, 8)
    assert desk.architecture == ModelArchitecture.desk()
    full = TrainConfig.full_scale(mode="unified")
    assert (full.epochs, full.batch_size) == (600, 50)
    assert full.architecture.decoder_widths == (512, 512, 1024, 3072)
    assert full.optimizer.learning_rate == 5e-4
    assert (full.degrade_k_ref, full.degrade_k_train, full.top_n_refs) == (15, 5, 3)


def test_class_scope_follows_mode():
    assert TrainConfig(mode="plain").class_scope == "same-class"
    assert TrainConfig(mode="unified").class_scope == "all-classes"
    with pytest.raises(ValidationError):
        TrainConfig(mode="unified", target_class="box")
    with pytest.raises(ValidationError):
        TrainConfig(mode="cycle")


def test_architecture_rejects_inconsistent_widths():
    with pytest.raises(ValidationError):
        ModelArchitecture(encoder_widths=(128, 200))


def test_from_file_parses_nested_keys(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("# 桌面实验\n"
                    "mode = wdis\n"
                    "epochs = 3  # 短跑\n"
                    "weights.alpha = 0.5\n"
                    "optimizer.betas = 0.8, 0.9\n"
                    "architecture.decoder_widths = 32, 32\n"
                    "target_class = none\n", encoding="utf-8")
    config = TrainConfig.from_file(path, seed=9)
    assert config.mode == "wdis"
    assert config.epochs == 3
    assert config.weights.alpha == 0.5
    assert config.weights.beta == 0.65
    assert config.optimizer.betas == (0.8, 0.9)
    assert config.architecture.decoder_widths == (32, 32)
    assert config.target_class is None
    assert config.seed == 9


def test_from_file_reports_unknown_keys(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("epochs = 3\nlearning_rate = 0.1\nweights.delta = 1\n", encoding="utf-8")
    with pytest.raises(ConfigError) as excinfo:
        TrainConfig.from_file(path)
    assert excinfo.value.unknown_keys == ["learning_rate", "weights.delta"]


def test_from_file_rejects_malformed_lines_and_values(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("epochs 3\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        TrainConfig.from_file(path)
    path.write_text("epochs = -1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        TrainConfig.from_file(path)


def test_snapshot_json_round_trip():
    config = TrainConfig(mode="unified", architecture=ModelArchitecture.toy(), no_share=True)
    assert TrainConfig.model_validate_json(config.snapshot_json()) == config


def test_loss_breakdown_recombination():
    parts = LossBreakdown(cd_ref=1.0, cd_aux_ref=1.0, cd_tar=1.0, cd_aux_tar=1.0, wasserstein=1.0, adv_gen=1.0)
    assert parts.recombine(LossWeights(), adversarial=False) == pytest.approx(2.001)
    assert parts.recombine(LossWeights(), adversarial=True) == pytest.approx(2.101)


def test_metric_report_scaling():
    assert MetricReport(name="f1", value=0.5, scale_factor=1e2).scaled == 50.0
