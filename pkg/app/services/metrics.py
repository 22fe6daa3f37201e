# app/services/metrics.py
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from app.config import settings
from app.models.errors import InvalidArgumentError
from app.models.geometry import PointCloud
from app.models.schemas import METRIC_SCALES, MetricReport
from app.services.geometry import CloudLike, as_points, nearest_neighbors

logger = logging.getLogger(__name__)


def chamfer(a: CloudLike, b: CloudLike) -> float:
    """对称 Chamfer 距离（平方 L2，两方向均值之和）"""
    pa, pb = as_points(a, "a"), as_points(b, "b")
    _, d_ab = nearest_neighbors(pa, pb)
    _, d_ba = nearest_neighbors(pb, pa)
    return float(d_ab.mean() + d_ba.mean())


def ucd(partial: CloudLike, completed: CloudLike) -> float:
    """单向 Chamfer 距离: 部分输入到补全结果"""
    pp, pc = as_points(partial, "partial"), as_points(completed, "completed")
    _, d = nearest_neighbors(pp, pc)
    return float(d.mean())


def f1(pred: CloudLike, gt: CloudLike, epsilon: float = 0.03) -> Tuple[float, float, float]:
    """F1 分数，阈值作用于未平方的 L2 距离且严格小于

    Returns:
        (f1, accuracy, completeness)
    """
    if not epsilon > 0:
        raise InvalidArgumentError(f"epsilon 必须为正，实际 {epsilon}")
    pp, pg = as_points(pred, "pred"), as_points(gt, "gt")
    d_pred, _ = cKDTree(pg).query(pp, k=1)
    d_gt, _ = cKDTree(pp).query(pg, k=1)
    accuracy = float(np.mean(d_pred < epsilon))
    completeness = float(np.mean(d_gt < epsilon))
    if accuracy + completeness == 0.0:
        return 0.0, accuracy, completeness
    return 2.0 * accuracy * completeness / (accuracy + completeness), accuracy, completeness


def _min_chamfer(pred: CloudLike, gts: Sequence[CloudLike]) -> float:
    return min(chamfer(pred, gt) for gt in gts)


def mmd(preds: Sequence[CloudLike], gts: Sequence[CloudLike]) -> float:
    """每个补全结果到真值集合的最小 CD 的无权平均"""
    preds, gts = list(preds), list(gts)
    if not preds or not gts:
        raise InvalidArgumentError("MMD 的预测集合与真值集合都不能为空")
    with ThreadPoolExecutor(max_workers=max(1, settings.threads)) as pool:
        minima = list(pool.map(lambda p: _min_chamfer(p, gts), preds))
    return float(np.mean(np.asarray(minima)))


def evaluate(preds: Dict[str, PointCloud], gts: Dict[str, PointCloud], metrics: Sequence[str],
             partials: Optional[Dict[str, PointCloud]] = None, epsilon: float = 0.03) -> List[MetricReport]:
    """按文件名配对计算 cd/ucd/f1，mmd 把两个目录当作集合"""
    unknown = [m for m in metrics if m not in METRIC_SCALES]
    if unknown:
        raise InvalidArgumentError(f"未知指标: {', '.join(unknown)}")
    paired = [m for m in metrics if m in ("cd", "f1")]
    if paired:
        missing = sorted(set(preds) ^ set(gts))
        if missing:
            raise InvalidArgumentError(f"预测与真值无法按名称配对: {', '.join(missing)}")
    if "ucd" in metrics:
        if partials is None:
            raise InvalidArgumentError("计算 UCD 需要部分输入点云目录")
        missing = sorted(set(preds) - set(partials))
        if missing:
            raise InvalidArgumentError(f"以下预测缺少部分输入: {', '.join(missing)}")

    names = sorted(preds)
    reports: List[MetricReport] = []
    with ThreadPoolExecutor(max_workers=max(1, settings.threads)) as pool:
        for metric in metrics:
            if metric == "mmd":
                value = mmd([preds[n] for n in names], [gts[n] for n in sorted(gts)])
                reports.append(MetricReport(name="mmd", value=value, scale_factor=METRIC_SCALES["mmd"]))
                continue
            if metric == "cd":
                values = list(pool.map(lambda n: chamfer(preds[n], gts[n]), names))
            elif metric == "ucd":
                values = list(pool.map(lambda n: ucd(partials[n], preds[n]), names))
            else:
                values = list(pool.map(lambda n: f1(preds[n], gts[n], epsilon)[0], names))
            reports.append(MetricReport(name=metric, value=float(np.mean(np.asarray(values))),
                                        scale_factor=METRIC_SCALES[metric],
                                        per_item=list(zip(names, values))))
            logger.info(f"指标 {metric} 计算完成: {reports[-1].value:.6g}")
    return reports
