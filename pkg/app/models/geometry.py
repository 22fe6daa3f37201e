# app/models/geometry.py
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator


def _as_point_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"点云数组必须为 (N, 3)，实际 {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("点云不能为空")
    if not np.all(np.isfinite(arr)):
        raise ValueError("点云坐标包含 NaN/Inf")
    arr.setflags(write=False)
    return arr


class PointCloud(BaseModel):
    """有序点云，顺序与加载/生成时一致（退化掩码依赖下标）"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    points: np.ndarray
    class_label: Optional[str] = None
    source_id: Optional[str] = None

    @field_validator("points", mode="before")
    def points_must_be_finite(cls, v):
        return _as_point_array(v)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points=points, class_label=self.class_label, source_id=self.source_id)


class NeighborList(BaseModel):
    """KNN 查询结果，距离为平方 L2，升序"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    indices: np.ndarray
    distances: np.ndarray


class DegradationResult(BaseModel):
    """模板引导退化的结果: p_y、被选下标集合与掩码 m_y"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    partial: PointCloud
    selected_indices: np.ndarray
    partial_indices: np.ndarray
    mask: Optional[PointCloud] = None
    mask_indices: Optional[np.ndarray] = None


class ReferencePair(BaseModel):
    """参考对 (p_y, c_y, m_y) 及其与模板的 CD"""
    model_config = ConfigDict(frozen=True)

    partial_ref: PointCloud
    complete_ref: PointCloud
    mask: PointCloud
    cd_to_template: float
    source_id: str
