# app/services/losses.py
"""训练目标: 可微 CD、Wasserstein 对齐、最小二乘对抗损失与加权总损失"""
import logging
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from app.models.errors import InvalidArgumentError, ShapeError
from app.models.schemas import LossWeights
from app.services.autodiff import (Node, add, as_node, concat, constant, gather_rows, mean_reduce, reshape, scale,
                                   shift, sqrt, square, sub, sum_reduce)
from app.services.geometry import nearest_neighbors, pairwise_sq_dists
from app.services.refdata import degrade_indices

logger = logging.getLogger(__name__)

CD_PARTS = ("cd_ref", "cd_aux_ref", "cd_tar", "cd_aux_tar")
ALL_PARTS = CD_PARTS + ("wasserstein", "adv_gen")


def _batched(node: Node, what: str) -> Node:
    if node.values.ndim == 2:
        node = reshape(node, (1, *node.shape))
    if node.values.ndim != 3 or node.shape[-1] != 3:
        raise ShapeError(f"{what} 需要 (B, N, 3) 点云", node.shape)
    if node.shape[1] == 0:
        raise InvalidArgumentError(f"{what} 点云为空")
    return node


def cd_loss(pred: Node, target) -> Node:
    """可微 Chamfer 损失（批内均值）；最近邻下标在反向时视为常量"""
    a = _batched(as_node(pred), "预测")
    b = np.asarray(target.values if isinstance(target, Node) else target, dtype=np.float64)
    if b.ndim == 2:
        b = b[None]
    if b.ndim != 3 or b.shape[-1] != 3 or b.shape[1] == 0:
        raise InvalidArgumentError(f"目标点云形状错误: {b.shape}")
    if b.shape[0] != a.shape[0]:
        raise ShapeError("CD 批大小不一致", a.shape, b.shape)

    idx_ab = np.stack([nearest_neighbors(a.values[i], b[i])[0] for i in range(b.shape[0])])
    idx_ba = np.stack([nearest_neighbors(b[i], a.values[i])[0] for i in range(b.shape[0])])
    matched = np.take_along_axis(b, idx_ab[..., None], axis=1)
    forward = mean_reduce(sum_reduce(square(sub(a, constant(matched))), axis=-1), axis=-1)
    reverse = mean_reduce(sum_reduce(square(sub(constant(b), gather_rows(a, idx_ba))), axis=-1), axis=-1)
    return mean_reduce(add(forward, reverse))


def degrade_prediction(completed: Node, templates: np.ndarray, k: int, out_size: int,
                       rng: np.random.Generator) -> Node:
    """训练期 Deg(c_x̂): 以 p_x 为模板在预测点云中选 KNN 并重采样；坐标可导，下标不可导"""
    templates = np.asarray(templates, dtype=np.float64)
    if templates.shape[0] != completed.shape[0]:
        raise ShapeError("Deg 批大小不一致", completed.shape, templates.shape)
    chosen = np.stack([degrade_indices(templates[i], completed.values[i], k, out_size, rng)[1]
                       for i in range(templates.shape[0])])
    return gather_rows(completed, chosen)


def branch_losses(c_hat_y: Node, c_hat_y_aux: Node, c_y, p_hat_x: Node, p_hat_x_aux: Node, p_x) -> Dict[str, Node]:
    """两个分支的四个 CD 项

    Args:
        c_hat_y: 参考分支补全 c_ŷ
        c_hat_y_aux: 辅助解码器输出 c_ŷ^r
        c_y: 参考完整点云
        p_hat_x: Deg(c_x̂)
        p_hat_x_aux: 主解码器直接解码 z_{p_x} 的结果 p̂_x^r
        p_x: 目标部分点云
    """
    return {
        "cd_ref": cd_loss(c_hat_y, c_y),
        "cd_aux_ref": cd_loss(c_hat_y_aux, c_y),
        "cd_tar": cd_loss(p_hat_x, p_x),
        "cd_aux_tar": cd_loss(p_hat_x_aux, p_x),
    }


def assignment_cost(fake: np.ndarray, real: np.ndarray) -> Tuple[float, np.ndarray]:
    """两组等权经验分布间的精确 1-Wasserstein（L2 代价），返回 (代价, fake 第 i 个匹配的 real 下标)"""
    fake = np.asarray(fake, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if fake.ndim != 2 or fake.shape != real.shape:
        raise ShapeError("Wasserstein 两组特征形状不一致", fake.shape, real.shape)
    if fake.shape[0] == 0:
        raise InvalidArgumentError("Wasserstein 批大小必须 ≥ 1")
    cost = np.sqrt(pairwise_sq_dists(fake, real))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean()), cols.astype(np.int64)


def wasserstein_loss(fake: Node, real: Union[Node, np.ndarray]) -> Node:
    """匹配后 L2 距离的均值；最优匹配在反向时视为常量"""
    fake = as_node(fake)
    real = as_node(real)
    _, cols = assignment_cost(fake.values, real.values)
    matched = gather_rows(real, cols)
    return mean_reduce(sqrt(sum_reduce(square(sub(fake, matched)), axis=-1)))


def adversarial_losses(scores_real: Node, scores_fake: Node) -> Tuple[Node, Node]:
    """最小二乘对抗损失，返回 (生成器损失, 判别器损失)"""
    if scores_real.values.size == 0 or scores_fake.values.size == 0:
        raise InvalidArgumentError("判别分数不能为空")
    disc = add(scale(mean_reduce(square(shift(scores_real, -1.0))), 0.5),
               scale(mean_reduce(square(scores_fake)), 0.5))
    gen = scale(mean_reduce(square(shift(scores_fake, -1.0))), 0.5)
    return gen, disc


def stack_batches(*features: Node) -> Node:
    """沿批维拼接多组假样本"""
    return features[0] if len(features) == 1 else concat(list(features), axis=0)


def zero_part() -> Node:
    return constant(np.float64(0.0))


def total_loss(parts: Mapping[str, Node], weights: LossWeights, adversarial: bool = False) -> Node:
    """𝓛 = α(cd_ref + cd_aux_ref) + β(cd_tar + cd_aux_tar) + γ·W (+ λ·adv_gen)，缺失项按 0 计"""
    unknown = [name for name in parts if name not in ALL_PARTS]
    if unknown:
        raise InvalidArgumentError(f"未知损失项: {', '.join(unknown)}")

    def part(name: str) -> Node:
        node: Optional[Node] = parts.get(name)
        return node if node is not None else zero_part()

    total = add(add(scale(add(part("cd_ref"), part("cd_aux_ref")), weights.alpha),
                    scale(add(part("cd_tar"), part("cd_aux_tar")), weights.beta)),
                scale(part("wasserstein"), weights.gamma))
    if adversarial:
        total = add(total, scale(part("adv_gen"), weights.lambda_adv))
    return total
