# app/services/trainer.py
import logging
import math
import queue
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm

from app.config import settings
from app.models.errors import CheckpointError, InvalidArgumentError, ParseError
from app.models.geometry import PointCloud, ReferencePair
from app.models.schemas import LossBreakdown, OptimizerConfig, ReferenceManifest, TrainConfig
from app.services.autodiff import Node, add, backward, check_finite, constant, optimizer_step
from app.services.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from app.services.geometry import denormalize, normalize_unit_sphere, random_indices
from app.services.losses import (adversarial_losses, branch_losses, degrade_prediction, stack_batches, total_loss,
                                 wasserstein_loss)
from app.services.metrics import ucd
from app.services.network import RefCompNetwork
from app.services.refdata import load_pairs, select_training_pair
from app.services.storage import INDEX_NAME, atomic_write, read_cloud, read_index

logger = logging.getLogger(__name__)

LOG_NAME = "train_log.tsv"
FINAL_NAME = "final.rfck"
LOG_COLUMNS = ("step", "cd_ref", "cd_r", "cd_tar", "cd_p", "wass", "adv_g", "adv_d", "total", "lr")


class TrainingItem(BaseModel):
    """一个训练目标: 部分点云 p_x 及其按 CD 升序的参考对"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    target_id: str
    partial: PointCloud
    pairs: List[ReferencePair]


class TrainingBatch(BaseModel):
    """已组装好的一批数据，形状均为 (B, N, 3)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    target_ids: List[str]
    partials: np.ndarray
    ref_partials: np.ndarray
    ref_completes: np.ndarray
    ref_masks: np.ndarray


def fit_size(points: np.ndarray, size: int, seed: int) -> np.ndarray:
    """点数不符时做确定性随机重采样"""
    if points.shape[0] == size:
        return points
    return points[random_indices(points.shape[0], size, np.random.default_rng(seed))]


def _item_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))]).generate_state(1)[0])


Frame = Tuple[np.ndarray, float]


def partial_frame(cloud: PointCloud) -> Frame:
    """部分点云自身的 (质心, 最大半径)；训练与推理都在这个单位球坐标系里进行"""
    _, centroid, scale = normalize_unit_sphere(cloud)
    return centroid, scale


def to_frame(points: np.ndarray, frame: Frame) -> np.ndarray:
    return (points - frame[0]) / frame[1]


def load_training_items(manifest: ReferenceManifest, config: TrainConfig) -> List[TrainingItem]:
    """按清单读取训练目标与参考对，按 target_class 过滤"""
    labels: Dict[Path, Dict[str, str]] = {}
    items: List[TrainingItem] = []
    for target_path in manifest.targets():
        path = manifest.resolve(target_path)
        if path.parent not in labels:
            index = path.parent / INDEX_NAME
            labels[path.parent] = {row[0]: row[1] for row in read_index(index)} if index.exists() else {}
        label = labels[path.parent].get(path.name) or None
        if config.target_class is not None and label != config.target_class:
            continue
        partial = read_cloud(path, class_label=label)
        items.append(TrainingItem(target_id=target_path, partial=partial, pairs=load_pairs(manifest, target_path)))
    if not items:
        raise InvalidArgumentError(f"清单中没有可训练的目标 (target_class={config.target_class})")
    classes = {item.partial.class_label for item in items}
    if config.mode != "unified" and config.target_class is None and len(classes) > 1:
        logger.warning(f"类别感知模式下目标包含多个类别 {sorted(c or '?' for c in classes)}，建议设置 target_class")
    return items


class BatchPrefetcher:
    """后台线程按步号顺序组装批次，经有界队列交给单线程优化循环"""

    def __init__(self, make_batch: Callable[[int], TrainingBatch], steps: Sequence[int], depth: int = 2):
        self._make_batch = make_batch
        self._steps = steps
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(1, depth))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="batch-prefetch", daemon=True)

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self):
        try:
            for step in self._steps:
                if not self._put(self._make_batch(step)):
                    return
        except BaseException as e:
            self._put(e)
            return
        self._put(None)

    def __enter__(self) -> "BatchPrefetcher":
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()

    def __iter__(self) -> Iterator[TrainingBatch]:
        while True:
            item = self._queue.get()
            if item is None:
                return
            if isinstance(item, BaseException):
                raise item
            yield item


def format_log_row(step: int, parts: LossBreakdown, lr: float) -> str:
    values = (parts.cd_ref, parts.cd_aux_ref, parts.cd_tar, parts.cd_aux_tar, parts.wasserstein, parts.adv_gen,
              parts.adv_disc, parts.total, lr)
    return "\t".join([str(step)] + [f"{v:.17g}" for v in values])


def read_log(path: Path) -> List[Tuple[int, LossBreakdown, float]]:
    """读取训练日志 TSV，返回 (step, 分解, lr)"""
    rows = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("step"):
            continue
        fields = line.split("\t")
        if len(fields) != len(LOG_COLUMNS):
            raise ParseError(f"训练日志需要 {len(LOG_COLUMNS)} 列", path=str(path), line=lineno)
        try:
            values = [float(v) for v in fields[1:]]
            parts = LossBreakdown(cd_ref=values[0], cd_aux_ref=values[1], cd_tar=values[2], cd_aux_tar=values[3],
                                  wasserstein=values[4], adv_gen=values[5], adv_disc=values[6], total=values[7])
            rows.append((int(fields[0]), parts, values[8]))
        except ValueError as e:
            raise ParseError(f"训练日志字段格式错误: {e}", path=str(path), line=lineno)
    return rows


class RefCompTrainer:
    """三种模式 (plain / wdis / unified) 的训练编排"""

    def __init__(self, config: TrainConfig, network: Optional[RefCompNetwork] = None):
        self.config = config
        self.network = network or RefCompNetwork(
            config.architecture, no_share=config.no_share, adversarial=config.adversarial,
            bypass_lsfm=config.only_gan).initialize(config.seed)
        self.optimizer: OptimizerConfig = config.optimizer
        self.step = 0
        self.rows: List[str] = []

    @property
    def store(self):
        return self.network.store

    # ------------------------------------------------------------ 批次

    def steps_per_epoch(self, n_items: int) -> int:
        return max(1, math.ceil(n_items / self.config.batch_size))

    def epoch_order(self, epoch: int, n_items: int) -> np.ndarray:
        return np.random.default_rng([self.config.seed, epoch]).permutation(n_items)

    def make_batch(self, items: Sequence[TrainingItem], step: int) -> TrainingBatch:
        """第 step 步的批次只由 (seed, step) 决定，与预取时机无关"""
        cfg = self.config
        epoch, offset = divmod(step, self.steps_per_epoch(len(items)))
        chosen = self.epoch_order(epoch, len(items))[offset * cfg.batch_size:(offset + 1) * cfg.batch_size]
        rng = np.random.default_rng([cfg.seed, step, 1])
        ids, partials, ref_partials, ref_completes, ref_masks = [], [], [], [], []
        for index in chosen:
            item = items[int(index)]
            pairs = item.pairs[:cfg.top_n_refs]
            pair = pairs[0] if cfg.fixed_ref else select_training_pair(pairs, rng)
            ids.append(item.target_id)
            target_frame, ref_frame = partial_frame(item.partial), partial_frame(pair.partial_ref)
            ref_seed = _item_seed(cfg.seed, pair.source_id)
            partials.append(fit_size(to_frame(item.partial.points, target_frame), cfg.partial_size,
                                     _item_seed(cfg.seed, item.target_id)))
            ref_partials.append(fit_size(to_frame(pair.partial_ref.points, ref_frame), cfg.partial_size, ref_seed))
            ref_completes.append(fit_size(to_frame(pair.complete_ref.points, ref_frame), cfg.complete_size, ref_seed))
            ref_masks.append(fit_size(to_frame(pair.mask.points, ref_frame), cfg.partial_size, ref_seed))
        return TrainingBatch(target_ids=ids, partials=np.stack(partials), ref_partials=np.stack(ref_partials),
                             ref_completes=np.stack(ref_completes), ref_masks=np.stack(ref_masks))

    # ------------------------------------------------------------ 单步

    def forward_losses(self, batch: TrainingBatch, step: int) -> Tuple[Dict[str, Node], Dict[str, Node]]:
        """两个分支的前向，返回 (损失项, 对抗训练需要的中间量)"""
        cfg = self.config
        net = self.network
        z_mask = net.encode_mask(batch.ref_masks)
        z_px = net.encode_partial(batch.partials, "target")
        outputs: Dict[str, Node] = {"c_real": constant(batch.ref_completes)}

        if cfg.only_gan:
            c_hat_x = net.decode(z_px, "main", "target")
            outputs.update(c_fake=c_hat_x, z_fake=z_px,
                           z_real=constant(net.encode_complete(batch.ref_completes).values))
            return {}, outputs

        z_py = net.encode_partial(batch.ref_partials, "reference")
        z_hat_cy = net.lsfm(z_py, z_mask, "reference")
        z_hat_cx = net.lsfm(z_px, z_mask, "target")
        check_finite(z_hat_cy, "参考分支潜在特征", batch.target_ids)
        c_hat_y = net.decode(z_hat_cy, "main", "reference")
        c_hat_y_aux = net.decode(z_hat_cy, "aux")
        c_hat_x = net.decode(z_hat_cx, "main", "target")
        p_hat_x_aux = net.decode(z_px, "main", "target")
        check_finite(c_hat_x, "目标分支补全结果", batch.target_ids)
        p_hat_x = degrade_prediction(c_hat_x, batch.partials, cfg.degrade_k_train, cfg.partial_size,
                                     np.random.default_rng([cfg.seed, step]))
        z_cy = net.encode_complete(batch.ref_completes)

        parts = branch_losses(c_hat_y, c_hat_y_aux, batch.ref_completes, p_hat_x, p_hat_x_aux, batch.partials)
        parts["wasserstein"] = wasserstein_loss(z_hat_cy, z_cy)
        outputs.update(c_fake=c_hat_x, z_fake=stack_batches(z_hat_cy, z_hat_cx), z_real=constant(z_cy.values))
        return parts, outputs

    def _discriminator_step(self, outputs: Dict[str, Node], step: int, batch_ids: Sequence[str]) -> float:
        net = self.network
        names = net.discriminator_names()
        _, disc_latent = adversarial_losses(net.discriminate_latent(outputs["z_real"]),
                                            net.discriminate_latent(constant(outputs["z_fake"].values)))
        _, disc_cloud = adversarial_losses(net.discriminate_cloud(outputs["c_real"]),
                                           net.discriminate_cloud(constant(outputs["c_fake"].values)))
        disc = add(disc_latent, disc_cloud)
        check_finite(disc, "判别器损失", batch_ids)
        self.store.zero_grad(names)
        backward(disc)
        optimizer_step(self.store, self.optimizer, step, names)
        return disc.item()

    def _generator_adversarial(self, outputs: Dict[str, Node]) -> Node:
        net = self.network
        gen_latent, _ = adversarial_losses(net.discriminate_latent(outputs["z_real"]),
                                           net.discriminate_latent(outputs["z_fake"]))
        gen_cloud, _ = adversarial_losses(net.discriminate_cloud(outputs["c_real"]),
                                          net.discriminate_cloud(outputs["c_fake"]))
        return add(gen_latent, gen_cloud)

    def train_step(self, batch: TrainingBatch, step: int) -> Tuple[LossBreakdown, float]:
        """一次生成器更新（对抗模式下先做一次判别器更新），返回 (损失分解, 学习率)"""
        cfg = self.config
        parts, outputs = self.forward_losses(batch, step)
        adv_disc = 0.0
        if cfg.adversarial:
            adv_disc = self._discriminator_step(outputs, step, batch.target_ids)
            parts["adv_gen"] = self._generator_adversarial(outputs)
        total = total_loss(parts, cfg.weights, cfg.adversarial)
        check_finite(total, "总损失", batch.target_ids)

        names = self.network.generator_names()
        self.store.zero_grad(names)
        backward(total)
        lr = optimizer_step(self.store, self.optimizer, step, names)

        values = {name: node.item() for name, node in parts.items()}
        breakdown = LossBreakdown(adv_disc=adv_disc, total=total.item(), **values)
        return breakdown, lr

    # ------------------------------------------------------------ 训练循环

    def total_steps(self, n_items: int) -> int:
        if self.config.max_steps is not None:
            return self.config.max_steps
        return self.config.epochs * self.steps_per_epoch(n_items)

    def _resume(self, path: Path, out_dir: Path):
        checkpoint = load_checkpoint(path)
        saved = checkpoint.config()
        if saved.architecture != self.config.architecture or saved.no_share != self.config.no_share \
                or saved.adversarial != self.config.adversarial:
            raise CheckpointError(f"检查点 {path} 的网络结构与当前配置不一致")
        checkpoint.restore(self.store)
        self.step = checkpoint.step
        log_path = out_dir / LOG_NAME
        if log_path.exists():
            self.rows = [format_log_row(step, parts, lr) for step, parts, lr in read_log(log_path)
                         if step <= self.step]
        logger.info(f"从检查点恢复: {path} (step={self.step})")

    def _write_log(self, out_dir: Path):
        with atomic_write(out_dir / LOG_NAME, binary=False) as handle:
            handle.write("\t".join(LOG_COLUMNS) + "\n")
            for row in self.rows:
                handle.write(row + "\n")

    def _save(self, out_dir: Path, name: str) -> Checkpoint:
        checkpoint = Checkpoint.capture(self.store, self.step, self.config)
        save_checkpoint(out_dir / name, checkpoint)
        self._write_log(out_dir)
        return checkpoint

    def _prune_checkpoints(self, out_dir: Path):
        epochs = sorted(out_dir.glob("ckpt_epoch*.rfck"))
        for stale in epochs[:max(0, len(epochs) - settings.keep_checkpoints)]:
            stale.unlink()

    def train(self, items: Sequence[TrainingItem], out_dir: Path, resume: Optional[Path] = None) -> Checkpoint:
        """完整训练: 按 epoch 打乱、余弦学习率、每个 epoch 保存检查点并在结束时保存 final.rfck"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        per_epoch = self.steps_per_epoch(len(items))
        total = self.total_steps(len(items))
        if self.optimizer.total_steps is None:
            self.optimizer = self.optimizer.model_copy(update={"total_steps": total})
        if resume is not None:
            self._resume(Path(resume), out_dir)
        if self.step > total:
            raise InvalidArgumentError(f"检查点步数 {self.step} 超过总步数 {total}")

        logger.info(f"开始训练: mode={self.config.mode}, 目标 {len(items)} 个, 每 epoch {per_epoch} 步, 共 {total} 步")
        progress = tqdm(total=total, initial=self.step, desc="训练", disable=total < 20)
        try:
            with BatchPrefetcher(lambda s: self.make_batch(items, s), range(self.step, total),
                                 settings.prefetch_depth) as batches:
                for batch in batches:
                    parts, lr = self.train_step(batch, self.step)
                    self.step += 1
                    self.rows.append(format_log_row(self.step, parts, lr))
                    progress.update(1)
                    progress.set_postfix(total=f"{parts.total:.4g}")
                    if self.step % per_epoch == 0:
                        self._end_epoch(items, out_dir, self.step // per_epoch)
        finally:
            progress.close()
        checkpoint = self._save(out_dir, FINAL_NAME)
        logger.info(f"训练完成: {self.step} 步，输出目录 {out_dir}")
        return checkpoint

    def _end_epoch(self, items: Sequence[TrainingItem], out_dir: Path, epoch: int):
        self._save(out_dir, f"ckpt_epoch{epoch:04d}.rfck")
        self._prune_checkpoints(out_dir)
        if self.config.eval_every and epoch % self.config.eval_every == 0:
            score = self.evaluate_targets(items)
            logger.info(f"epoch {epoch}: 目标集平均 UCD = {score:.6g} (x1e4 = {score * 1e4:.4g})")

    def evaluate_targets(self, items: Sequence[TrainingItem]) -> float:
        """在参数只读快照上用最近参考对补全全部目标，返回平均 UCD"""
        network = RefCompNetwork.from_snapshot(self.config.architecture, self.store.snapshot(),
                                               self.config.no_share, self.config.adversarial, self.config.only_gan)
        with ThreadPoolExecutor(max_workers=max(1, settings.threads)) as pool:
            scores = list(pool.map(lambda item: ucd(item.partial, infer(network, item.partial, item.pairs[0],
                                                                     self.config.seed, item.target_id)),
                                   items))
        return float(np.mean(scores))


def load_network(checkpoint: Checkpoint) -> RefCompNetwork:
    """由检查点中的配置快照重建网络"""
    config = checkpoint.config()
    return RefCompNetwork.from_snapshot(config.architecture, checkpoint.snapshot(), config.no_share,
                                        config.adversarial, config.only_gan)


def infer(model: Union[Checkpoint, RefCompNetwork], partial: PointCloud, pair: ReferencePair,
          seed: Optional[int] = None, target_id: Optional[str] = None) -> PointCloud:
    """用参考对的掩码特征补全 p_x，输出还原到输入的原坐标系

    与训练相同: p_x 归一化到自身单位球，参考对换算到 p_y 的坐标系，重采样种子由
    (seed, target_id) 与 (seed, 参考 source_id) 派生。seed 缺省取检查点配置中的种子。
    """
    if isinstance(model, Checkpoint):
        seed = model.config().seed if seed is None else seed
        network = load_network(model)
    else:
        network = model
    seed = 0 if seed is None else seed
    arch = network.arch
    frame, ref_frame = partial_frame(partial), partial_frame(pair.partial_ref)
    points = fit_size(to_frame(partial.points, frame), arch.partial_size,
                      _item_seed(seed, target_id or partial.source_id or ""))
    mask = fit_size(to_frame(pair.mask.points, ref_frame), arch.partial_size, _item_seed(seed, pair.source_id))
    completed = network.complete(points, network.encode_mask(mask), "target").values[0]
    cloud = PointCloud(points=completed, class_label=partial.class_label, source_id=partial.source_id)
    return denormalize(cloud, frame[0], frame[1])
