# app/services/geometry.py
import logging
from typing import Literal, Optional, Tuple, Union

import numpy as np

from app.config import settings
from app.models.errors import InvalidArgumentError
from app.models.geometry import NeighborList, PointCloud

logger = logging.getLogger(__name__)

CloudLike = Union[PointCloud, np.ndarray]


def as_points(cloud: CloudLike, name: str = "cloud") -> np.ndarray:
    """取出 (N, 3) float64 坐标数组，空点云报错"""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if points.ndim != 2 or points.shape[-1] != 3:
        raise InvalidArgumentError(f"{name} 必须是 (N, 3) 数组，实际 {points.shape}")
    if points.shape[0] == 0:
        raise InvalidArgumentError(f"{name} 为空点云")
    return points


def _as_query(query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape != (3,) or not np.all(np.isfinite(q)):
        raise InvalidArgumentError(f"查询点必须是有限的三维坐标，实际 {q}")
    return q


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """精确的两两平方 L2 距离矩阵（逐坐标差平方求和）"""
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=-1)


def nearest_neighbors(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """a 中每点在 b 中的最近邻下标与平方距离，并列取最小下标"""
    rows = max(1, settings.knn_chunk_rows)
    indices = np.empty(a.shape[0], dtype=np.int64)
    dists = np.empty(a.shape[0], dtype=np.float64)
    for start in range(0, a.shape[0], rows):
        block = pairwise_sq_dists(a[start:start + rows], b)
        idx = np.argmin(block, axis=1)
        indices[start:start + rows] = idx
        dists[start:start + rows] = block[np.arange(block.shape[0]), idx]
    return indices, dists


def knn_indices(queries: np.ndarray, target: np.ndarray, k: int) -> np.ndarray:
    """批量精确 KNN，返回 (Q, k) 下标；稳定排序保证并列时小下标优先"""
    if k < 1 or k > target.shape[0]:
        raise InvalidArgumentError(f"k={k} 超出范围 [1, {target.shape[0]}]")
    rows = max(1, settings.knn_chunk_rows)
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for start in range(0, queries.shape[0], rows):
        block = pairwise_sq_dists(queries[start:start + rows], target)
        out[start:start + rows] = np.argsort(block, axis=1, kind="stable")[:, :k]
    return out


def knn(query, target: CloudLike, k: int) -> NeighborList:
    """单点精确 KNN"""
    q = _as_query(query)
    points = as_points(target, "target")
    if k < 1 or k > points.shape[0]:
        raise InvalidArgumentError(f"k={k} 超出范围 [1, {points.shape[0]}]")
    diff = points - q
    dists = (diff * diff).sum(axis=1)
    order = np.argsort(dists, kind="stable")[:k]
    return NeighborList(indices=order, distances=dists[order])


def nn_sq_dist(query, target: CloudLike) -> float:
    """到目标点云最近点的平方 L2 距离"""
    q = _as_query(query)
    points = as_points(target, "target")
    diff = points - q
    return float((diff * diff).sum(axis=1).min())


def normalize_unit_sphere(cloud: PointCloud) -> Tuple[PointCloud, np.ndarray, float]:
    """平移到质心为原点并缩放到最大范数为 1；返回逆变换参数"""
    points = as_points(cloud)
    centroid = points.mean(axis=0)
    centered = points - centroid
    scale = float(np.sqrt((centered * centered).sum(axis=1)).max())
    if not scale > 0.0:
        scale = 1.0
    return cloud.with_points(centered / scale), centroid, scale


def denormalize(cloud: PointCloud, centroid: np.ndarray, scale: float) -> PointCloud:
    """normalize_unit_sphere 的逆变换"""
    return cloud.with_points(as_points(cloud) * scale + np.asarray(centroid, dtype=np.float64))


def farthest_point_indices(points: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """贪心最远点采样，argmax 并列取最小下标；已选下标置 -inf，重复坐标也不会被选两次"""
    points = np.asarray(points, dtype=np.float64)
    selected = [start]
    diff = points - points[start]
    dists = (diff * diff).sum(axis=1)
    dists[start] = -np.inf
    while len(selected) < m:
        idx = int(np.argmax(dists))
        selected.append(idx)
        diff = points - points[idx]
        dists = np.minimum(dists, (diff * diff).sum(axis=1))
        dists[idx] = -np.inf
    return np.asarray(selected, dtype=np.int64)


def random_indices(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """m ≤ n 时无放回，否则有放回"""
    return rng.choice(n, size=m, replace=m > n).astype(np.int64)


def resample(cloud: PointCloud, m: int, strategy: Literal["random", "farthest-point"] = "random", seed: int = 0,
             start: Optional[int] = None) -> PointCloud:
    """重采样到恰好 m 个点，结果只由 (cloud, m, strategy, seed) 决定"""
    points = as_points(cloud)
    n = points.shape[0]
    if m <= 0:
        raise InvalidArgumentError(f"采样点数必须为正，实际 {m}")
    rng = np.random.default_rng(seed)
    if strategy == "random":
        indices = random_indices(n, m, rng)
    elif strategy == "farthest-point":
        if m > n:
            raise InvalidArgumentError(f"最远点采样无法从 {n} 个点中取 {m} 个")
        first = int(rng.integers(n)) if start is None else start
        indices = farthest_point_indices(points, m, first)
    else:
        raise InvalidArgumentError(f"未知采样策略: {strategy}")
    return cloud.with_points(points[indices])
