# app/services/storage.py
import logging
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from app.config import settings
from app.models.errors import ParseError
from app.models.geometry import PointCloud

logger = logging.getLogger(__name__)

PCB_MAGIC = b"PCB1"
INDEX_NAME = "index.tsv"
SUFFIXES = {"pcb": ".pcb", "xyz": ".xyz"}


@contextmanager
def atomic_write(path: Path, binary: bool = True) -> Iterator:
    """先写临时文件再原子改名，失败时不留下半成品"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        mode = "wb" if binary else "w"
        kwargs = {} if binary else {"encoding": "utf-8", "newline": "\n"}
        with os.fdopen(fd, mode, **kwargs) as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def detect_format(path: Path) -> str:
    suffix = Path(path).suffix.lower()
    for fmt, ext in SUFFIXES.items():
        if suffix == ext:
            return fmt
    raise ParseError(f"无法识别的点云文件后缀 '{suffix}'", path=str(path))


def encode_cloud(cloud: PointCloud, fmt: str) -> bytes:
    points = cloud.points
    if fmt == "pcb":
        return PCB_MAGIC + struct.pack("<I", points.shape[0]) + points.astype("<f4").tobytes()
    lines = [" ".join(f"{v:.9g}" for v in row) for row in points]
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_cloud(path: Path, cloud: PointCloud, fmt: Optional[str] = None) -> Path:
    """写点云文件（xyz 文本或 pcb 二进制）"""
    path = Path(path)
    fmt = fmt or detect_format(path)
    with atomic_write(path) as handle:
        handle.write(encode_cloud(cloud, fmt))
    return path


def _parse_pcb(data: bytes, path: str) -> np.ndarray:
    if len(data) < 8:
        raise ParseError("PCB 文件头不完整", path=path, offset=len(data))
    if data[:4] != PCB_MAGIC:
        raise ParseError(f"PCB 魔数错误: {data[:4]!r}", path=path, offset=0)
    (count,) = struct.unpack_from("<I", data, 4)
    if count == 0:
        raise ParseError("点云不包含任何点", path=path, offset=4)
    expected = 8 + count * 12
    if len(data) < expected:
        raise ParseError(f"PCB 数据截断，需要 {expected} 字节", path=path, offset=len(data))
    if len(data) > expected:
        raise ParseError("PCB 文件尾部有多余数据", path=path, offset=expected)
    return np.frombuffer(data, dtype="<f4", count=count * 3, offset=8).reshape(count, 3).astype(np.float64)


def _parse_xyz(data: bytes, path: str) -> np.ndarray:
    rows: List[List[float]] = []
    for lineno, line in enumerate(data.decode("utf-8").split("\n"), start=1):
        if not line.strip():
            continue
        tokens = line.split(" ")
        if len(tokens) != 3:
            raise ParseError(f"每行需要 3 个坐标，实际 {len(tokens)} 个", path=path, line=lineno)
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise ParseError(f"非数值记号: {line!r}", path=path, line=lineno)
    if not rows:
        raise ParseError("点云不包含任何点", path=path, line=1)
    return np.asarray(rows, dtype=np.float64)


def read_cloud(path: Path, fmt: Optional[str] = None, class_label: Optional[str] = None) -> PointCloud:
    """读点云文件，source_id 取文件名主干"""
    path = Path(path)
    fmt = fmt or detect_format(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        logger.error(f"读取点云失败: {e}")
        raise ParseError(f"无法读取文件: {e}", path=str(path))
    points = _parse_pcb(data, str(path)) if fmt == "pcb" else _parse_xyz(data, str(path))
    if not np.all(np.isfinite(points)):
        raise ParseError("坐标包含 NaN/Inf", path=str(path))
    return PointCloud(points=points, class_label=class_label, source_id=path.stem)


class CloudStore:
    """以目录为单位的点云存储，附带 index.tsv (path \\t class \\t seed)"""

    def __init__(self, root: Path, fmt: Optional[str] = None):
        self.root = Path(root)
        self.fmt = fmt or settings.cloud_format
        self._index: Dict[str, Tuple[str, str]] = {}
        self._ensure_dir_exists()

    def _ensure_dir_exists(self):
        """确保目录存在并加载已有索引"""
        self.root.mkdir(parents=True, exist_ok=True)
        index_path = self.root / INDEX_NAME
        if index_path.exists():
            for name, class_name, seed in read_index(index_path):
                self._index[name] = (class_name, seed)

    def path_for(self, stem: str) -> Path:
        return self.root / f"{stem}{SUFFIXES[self.fmt]}"

    def put_cloud(self, cloud: PointCloud, seed: int = 0) -> Path:
        """写入点云并登记到索引"""
        if not cloud.source_id:
            raise ParseError("写入存储的点云必须带 source_id")
        path = write_cloud(self.path_for(cloud.source_id), cloud, self.fmt)
        self._index[path.name] = (cloud.class_label or "", str(seed))
        return path

    def flush_index(self) -> Path:
        rows = [(name, cls, seed) for name, (cls, seed) in sorted(self._index.items())]
        return write_index(self.root / INDEX_NAME, rows)

    def load_all(self) -> Dict[str, Tuple[Path, PointCloud]]:
        """按 source_id 返回 (路径, 点云)，类别取自索引"""
        clouds: Dict[str, Tuple[Path, PointCloud]] = {}
        for path in sorted(self.root.iterdir()):
            if path.suffix.lower() not in SUFFIXES.values() or path.name.startswith("."):
                continue
            class_name = self._index.get(path.name, (None, None))[0] or None
            cloud = read_cloud(path, class_label=class_name)
            clouds[cloud.source_id] = (path, cloud)
        logger.info(f"从 {self.root} 读取 {len(clouds)} 个点云")
        return clouds


def write_index(path: Path, rows: List[Tuple[str, str, str]]) -> Path:
    with atomic_write(path, binary=False) as handle:
        for row in rows:
            handle.write("\t".join(row) + "\n")
    return path


def read_index(path: Path) -> List[Tuple[str, str, str]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError("索引行需要 3 列", path=str(path), line=lineno)
        rows.append((fields[0], fields[1], fields[2]))
    return rows
