# app/services/corpus.py
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from app.models.errors import InvalidArgumentError
from app.models.geometry import PointCloud
from app.models.schemas import SHAPE_SIZE_RANGES, ShapeSpec
from app.services.geometry import normalize_unit_sphere
from app.services.storage import CloudStore

logger = logging.getLogger(__name__)

SHAPE_CLASSES = tuple(SHAPE_SIZE_RANGES)


def _sample_box(half: Sequence[float], n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """按面积在长方体六个面上均匀采样，返回点和面编号 (0..5 = -x,+x,-y,+y,-z,+z)"""
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    points = np.empty((n, 3))
    for face in range(6):
        sel = faces == face
        axis, sign = face // 2, (-1.0 if face % 2 == 0 else 1.0)
        others = [a for a in range(3) if a != axis]
        points[sel, axis] = sign * half[axis]
        points[sel, others[0]] = u[sel, 0] * half[others[0]]
        points[sel, others[1]] = u[sel, 1] * half[others[1]]
    return points, faces


def _sample_cylinder(radius: float, half_height: float, n: int,
                     rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """侧面 + 上下底面，按面积采样；部件编号 0=侧面, 1=底, 2=顶"""
    areas = np.array([2.0 * np.pi * radius * 2.0 * half_height, np.pi * radius ** 2, np.pi * radius ** 2])
    parts = rng.choice(3, size=n, p=areas / areas.sum())
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    points = np.empty((n, 3))
    side = parts == 0
    points[side, 0] = radius * np.cos(theta[side])
    points[side, 1] = radius * np.sin(theta[side])
    points[side, 2] = rng.uniform(-half_height, half_height, size=int(side.sum()))
    caps = ~side
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=int(caps.sum())))
    points[caps, 0] = r * np.cos(theta[caps])
    points[caps, 1] = r * np.sin(theta[caps])
    points[caps, 2] = np.where(parts[caps] == 1, -half_height, half_height)
    return points, parts


def _sample_torus(major: float, minor: float, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """拒绝采样保证按面积均匀（面积元与 R + r cos φ 成正比）"""
    chunks: List[np.ndarray] = []
    count = 0
    while count < n:
        theta = rng.uniform(0.0, 2.0 * np.pi, size=2 * n)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=2 * n)
        keep = rng.uniform(0.0, major + minor, size=2 * n) < major + minor * np.cos(phi)
        theta, phi = theta[keep], phi[keep]
        ring = major + minor * np.cos(phi)
        chunk = np.stack([ring * np.cos(theta), ring * np.sin(theta), minor * np.sin(phi)], axis=1)
        chunks.append(chunk)
        count += chunk.shape[0]
    points = np.concatenate(chunks)[:n]
    return points, np.zeros(n, dtype=np.int64)


def sample_surface(spec: ShapeSpec) -> Tuple[np.ndarray, np.ndarray]:
    """在位姿变换之前的参数曲面上采样，返回 (点, 部件编号)"""
    rng = np.random.default_rng(spec.seed)
    if spec.class_name == "box":
        return _sample_box(spec.size, spec.n_points, rng)
    if spec.class_name == "plane-slab":
        return _sample_box(spec.size, spec.n_points, rng)
    if spec.class_name == "cylinder":
        return _sample_cylinder(spec.size[0], spec.size[1], spec.n_points, rng)
    if spec.class_name == "torus":
        return _sample_torus(spec.size[0], spec.size[1], spec.n_points, rng)
    raise InvalidArgumentError(f"未知形状类别: {spec.class_name}")


def rotation_matrix(angles: Sequence[float]) -> np.ndarray:
    """按 z·y·x 顺序组合的欧拉角旋转矩阵"""
    ax, ay, az = angles
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def generate_shape(spec: ShapeSpec, source_id: str = None) -> PointCloud:
    """采样、位姿变换并归一化到单位球；坐标量化到 float32，与 pcb 落盘后读回的值一致"""
    points, _ = sample_surface(spec)
    posed = points @ rotation_matrix(spec.rotation).T + np.asarray(spec.translation)
    cloud = PointCloud(points=posed, class_label=spec.class_name, source_id=source_id)
    normalized, _, _ = normalize_unit_sphere(cloud)
    return normalized.with_points(normalized.points.astype(np.float32).astype(np.float64))


def random_spec(class_name: str, n_points: int, seed: int) -> ShapeSpec:
    """在各类参数范围内随机生成形状描述"""
    if class_name not in SHAPE_SIZE_RANGES:
        raise InvalidArgumentError(f"未知形状类别: {class_name}")
    rng = np.random.default_rng(seed)
    size = tuple(float(rng.uniform(lo, hi)) for lo, hi in SHAPE_SIZE_RANGES[class_name])
    rotation = tuple(float(a) for a in rng.uniform(0.0, 2.0 * np.pi, size=3))
    translation = tuple(float(t) for t in rng.uniform(-0.5, 0.5, size=3))
    return ShapeSpec(class_name=class_name, size=size, rotation=rotation, translation=translation,
                     n_points=n_points, seed=seed)


def crop_partial(cloud: PointCloud, out_size: int, seed: int) -> PointCloud:
    """模拟单视角缺失: 保留在随机视线方向上投影最大的 out_size 个点，保持原顺序"""
    if not 0 < out_size <= len(cloud):
        raise InvalidArgumentError(f"部分点数 {out_size} 超出范围 [1, {len(cloud)}]")
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    order = np.argsort(-(cloud.points @ direction), kind="stable")[:out_size]
    return cloud.with_points(cloud.points[np.sort(order)])


def shape_seed(seed: int, class_index: int, item: int) -> int:
    return int(np.random.SeedSequence([seed, class_index, item]).generate_state(1)[0])


def generate_corpus(classes: Sequence[str], per_class: int, n_points: int = 2048, seed: int = 0,
                    out_dir: Path = Path("corpus"), partial_size: int = 1024,
                    fmt: str = None) -> Dict[str, List[Path]]:
    """生成完整形状目录 complete/ 与对应的部分视角目录 partial/"""
    unknown = [c for c in classes if c not in SHAPE_SIZE_RANGES]
    if unknown:
        raise InvalidArgumentError(f"未知形状类别: {', '.join(unknown)}")
    if per_class <= 0:
        raise InvalidArgumentError("每类数量必须大于0")
    if partial_size > n_points:
        raise InvalidArgumentError("部分点数不能超过完整点数")

    complete_store = CloudStore(Path(out_dir) / "complete", fmt)
    partial_store = CloudStore(Path(out_dir) / "partial", fmt)
    written: Dict[str, List[Path]] = {"complete": [], "partial": []}
    jobs = [(ci, name, i) for ci, name in enumerate(classes) for i in range(per_class)]
    for class_index, class_name, item in tqdm(jobs, desc="生成形状", disable=len(jobs) < 50):
        s = shape_seed(seed, class_index, item)
        stem = f"{class_name}_{item:04d}"
        cloud = generate_shape(random_spec(class_name, n_points, s), source_id=stem)
        written["complete"].append(complete_store.put_cloud(cloud, seed=s))
        written["partial"].append(partial_store.put_cloud(crop_partial(cloud, partial_size, s), seed=s))
    complete_store.flush_index()
    partial_store.flush_index()
    logger.info(f"语料生成完成: {len(jobs)} 个形状 -> {out_dir}")
    return written
