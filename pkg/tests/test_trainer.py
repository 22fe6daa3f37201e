import numpy as np
import pytest

from app.models.errors import CheckpointError, InvalidArgumentError, ParseError
from app.models.schemas import ModelArchitecture, OptimizerConfig, TrainConfig
from app.services.checkpoint import load_checkpoint
from app.services.corpus import SHAPE_CLASSES, generate_corpus
from app.services.geometry import denormalize
from app.services.network import RefCompNetwork
from app.services.refdata import build_manifest, load_manifest
from app.services.storage import CloudStore
from app.services.trainer import (FINAL_NAME, LOG_NAME, BatchPrefetcher, RefCompTrainer, _item_seed, fit_size, infer,
                                  load_network, load_training_items, partial_frame, read_log, to_frame)


def test_fit_size_is_deterministic(rng):
    points = rng.normal(size=(10, 3))
    assert fit_size(points, 10, 0) is points
    assert np.array_equal(fit_size(points, 4, 5), fit_size(points, 4, 5))
    assert fit_size(points, 25, 5).shape == (25, 3)


def test_training_items_can_be_filtered_by_class(toy_manifest, toy_config):
    manifest = load_manifest(toy_manifest)
    boxes = load_training_items(manifest, toy_config.model_copy(update={"target_class": "box"}))
    assert len(boxes) == 4
    assert {item.partial.class_label for item in boxes} == {"box"}
    with pytest.raises(InvalidArgumentError):
        load_training_items(manifest, toy_config.model_copy(update={"target_class": "torus"}))


def test_make_batch_depends_only_on_step(toy_items, toy_config):
    trainer = RefCompTrainer(toy_config)
    first, again = trainer.make_batch(toy_items, 3), trainer.make_batch(toy_items, 3)
    assert first.target_ids == again.target_ids
    assert np.array_equal(first.ref_masks, again.ref_masks)
    assert first.partials.shape == (2, 8, 3)
    assert first.ref_completes.shape == (2, 16, 3)
    epoch = [tid for step in range(trainer.steps_per_epoch(len(toy_items)))
             for tid in trainer.make_batch(toy_items, step).target_ids]
    assert sorted(epoch) == sorted(item.target_id for item in toy_items)


def test_fixed_ref_always_uses_nearest_pair(toy_items, toy_config):
    trainer = RefCompTrainer(toy_config.model_copy(update={"fixed_ref": True}))
    for step in range(3):
        batch = trainer.make_batch(toy_items, step)
        for tid, complete in zip(batch.target_ids, batch.ref_completes):
            item = next(i for i in toy_items if i.target_id == tid)
            pair = item.pairs[0]
            nearest = fit_size(to_frame(pair.complete_ref.points, partial_frame(pair.partial_ref)), 16,
                               _item_seed(toy_config.seed, pair.source_id))
            assert np.array_equal(complete, nearest)


def test_prefetcher_forwards_worker_errors():
    def make(step):
        if step == 2:
            raise ValueError("坏批次")
        return step

    seen = []
    with pytest.raises(ValueError):
        with BatchPrefetcher(make, range(5)) as batches:
            for item in batches:
                seen.append(item)
    assert seen == [0, 1]


@pytest.mark.parametrize("mode", ["plain", "wdis", "unified"])
def test_short_run_logs_recombinable_losses(tmp_path, toy_items, toy_config, mode):
    config = toy_config.model_copy(update={"mode": mode, "max_steps": 3})
    checkpoint = RefCompTrainer(config).train(toy_items, tmp_path / "run")
    assert checkpoint.step == 3
    assert (tmp_path / "run" / FINAL_NAME).exists()
    rows = read_log(tmp_path / "run" / LOG_NAME)
    assert [step for step, _, _ in rows] == [1, 2, 3]
    for _, parts, lr in rows:
        assert parts.total == pytest.approx(parts.recombine(config.weights, config.adversarial), rel=1e-12)
        assert lr > 0.0
        assert (parts.adv_disc > 0.0) == config.adversarial


def test_only_gan_trains_on_adversarial_term_alone(tmp_path, toy_items, toy_config):
    config = toy_config.model_copy(update={"only_gan": True, "max_steps": 2})
    RefCompTrainer(config).train(toy_items, tmp_path / "gan")
    for _, parts, _ in read_log(tmp_path / "gan" / LOG_NAME):
        assert parts.cd_ref == parts.cd_tar == parts.wasserstein == 0.0
        assert parts.total == pytest.approx(config.weights.lambda_adv * parts.adv_gen, rel=1e-12)


def test_resume_rejects_mismatched_structure(tmp_path, toy_items, toy_config):
    RefCompTrainer(toy_config.model_copy(update={"max_steps": 1})).train(toy_items, tmp_path / "a")
    split = RefCompTrainer(toy_config.model_copy(update={"max_steps": 2, "no_share": True}))
    with pytest.raises(CheckpointError):
        split.train(toy_items, tmp_path / "b", resume=tmp_path / "a" / FINAL_NAME)


@pytest.mark.slow
def test_resume_from_epoch_checkpoint_matches_uninterrupted_run(tmp_path, toy_items, toy_config):
    config = toy_config.model_copy(update={"epochs": 2, "mode": "wdis"})
    straight = RefCompTrainer(config).train(toy_items, tmp_path / "straight")
    epochs = sorted((tmp_path / "straight").glob("ckpt_epoch*.rfck"))
    assert [p.name for p in epochs] == ["ckpt_epoch0001.rfck", "ckpt_epoch0002.rfck"]

    straight_trainer = RefCompTrainer(config)
    straight_trainer.train(toy_items, tmp_path / "again")
    resumed_trainer = RefCompTrainer(config)
    resumed = resumed_trainer.train(toy_items, tmp_path / "resumed", resume=epochs[0])
    assert resumed.step == straight.step == 8
    assert resumed_trainer.rows == straight_trainer.rows[4:]
    for name, values in straight.snapshot().items():
        assert np.array_equal(resumed.snapshot()[name], values), name

    # 同目录恢复时沿用已有日志，结果与不中断的运行逐字节相同
    RefCompTrainer(config).train(toy_items, tmp_path / "straight", resume=epochs[0])
    for name in (LOG_NAME, FINAL_NAME):
        assert (tmp_path / "straight" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_same_seed_runs_write_identical_files(tmp_path, toy_items, toy_config):
    config = toy_config.model_copy(update={"mode": "wdis", "max_steps": 3})
    RefCompTrainer(config).train(toy_items, tmp_path / "a")
    RefCompTrainer(config).train(toy_items, tmp_path / "b")
    for name in (LOG_NAME, FINAL_NAME):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


SMALL_ARCH = ModelArchitecture(partial_size=32, complete_size=64, encoder_widths=(32, 32), latent_width=32,
                               lsfm_width=64, lsfm_blocks=2, decoder_widths=(64, 64, 128, 128),
                               latent_disc_widths=(16, 8), cloud_disc_point_widths=(16, 32),
                               cloud_disc_head_widths=(16,))


@pytest.mark.slow
def test_plain_training_converges_and_improves_held_out_completion(tmp_path):
    corpus = tmp_path / "corpus"
    generate_corpus(list(SHAPE_CLASSES), 10, n_points=128, seed=0, out_dir=corpus, partial_size=64, fmt="pcb")
    completes = CloudStore(corpus / "complete").load_all()
    partials = CloudStore(corpus / "partial").load_all()

    def held_out(sid: str) -> bool:
        return int(sid.rsplit("_", 1)[1]) >= 8

    # 留出目标只在训练语料中检索参考
    train_corpus = {sid: value for sid, value in completes.items() if not held_out(sid)}
    for name, keep in (("train", False), ("held", True)):
        build_manifest({sid: value for sid, value in partials.items() if held_out(sid) == keep}, train_corpus,
                       tmp_path / f"{name}.tsv", k=5, top_n=3, seed=0)

    config = TrainConfig(architecture=SMALL_ARCH, batch_size=8, max_steps=300, degrade_k_train=5, seed=0,
                         optimizer=OptimizerConfig(learning_rate=2e-3))
    items = load_training_items(load_manifest(tmp_path / "train.tsv"), config)
    held = load_training_items(load_manifest(tmp_path / "held.tsv"), config)
    assert len(items) == 32 and len(held) == 8
    untrained = RefCompTrainer(config).evaluate_targets(held)

    trainer = RefCompTrainer(config)
    trainer.train(items, tmp_path / "run")
    totals = [parts.total for _, parts, _ in read_log(tmp_path / "run" / LOG_NAME)]
    assert len(totals) == 300
    assert np.mean(totals[-10:]) < 0.5 * np.mean(totals[:10])
    assert trainer.evaluate_targets(held) <= 0.5 * untrained


@pytest.mark.slow
def test_repeated_steps_on_one_batch_reduce_the_objective(toy_items, toy_config):
    config = toy_config.model_copy(update={"optimizer": OptimizerConfig(learning_rate=5e-3, weight_decay=0.0)})
    trainer = RefCompTrainer(config)
    batch = trainer.make_batch(toy_items, 0)
    first, _ = trainer.train_step(batch, 0)
    for _ in range(60):
        last, _ = trainer.train_step(batch, 0)
    assert last.total < first.total


def test_infer_answers_in_the_input_frame(tmp_path, toy_items, toy_config):
    checkpoint = RefCompTrainer(toy_config.model_copy(update={"max_steps": 1})).train(toy_items, tmp_path / "r")
    network = load_network(load_checkpoint(tmp_path / "r" / FINAL_NAME))
    item = toy_items[0]
    completed = infer(checkpoint, item.partial, item.pairs[0], target_id=item.target_id)
    assert len(completed) == 16
    assert completed.source_id == item.partial.source_id
    assert np.array_equal(completed.points,
                          infer(network, item.partial, item.pairs[0], toy_config.seed, item.target_id).points)

    centroid, scale = np.array([1.0, -2.0, 0.5]), 2.0
    moved = denormalize(item.partial, centroid, scale)
    shifted = infer(network, moved, item.pairs[0], toy_config.seed, item.target_id)
    assert np.allclose(shifted.points, completed.points * scale + centroid, atol=1e-8)


def test_infer_resamples_like_training(toy_items, toy_config):
    trainer = RefCompTrainer(toy_config.model_copy(update={"fixed_ref": True}))
    batch = trainer.make_batch(toy_items, 0)
    network = RefCompNetwork.from_snapshot(toy_config.architecture, trainer.store.snapshot(), toy_config.no_share,
                                           toy_config.adversarial, toy_config.only_gan)
    item = next(i for i in toy_items if i.target_id == batch.target_ids[0])
    centroid, scale = partial_frame(item.partial)
    expected = network.complete(batch.partials[0], network.encode_mask(batch.ref_masks[0]), "target").values[0]
    completed = infer(network, item.partial, item.pairs[0], toy_config.seed, item.target_id)
    assert np.allclose(completed.points, expected * scale + centroid, atol=1e-9)


def test_evaluate_targets_reports_mean_ucd(toy_items, toy_config):
    score = RefCompTrainer(toy_config).evaluate_targets(toy_items)
    assert np.isfinite(score) and score >= 0.0


def test_read_log_rejects_malformed_rows(tmp_path):
    path = tmp_path / LOG_NAME
    path.write_text("step\tcd_ref\n1\t0.5\n", encoding="utf-8")
    with pytest.raises(ParseError):
        read_log(path)
