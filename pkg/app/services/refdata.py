# app/services/refdata.py
import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from app.config import settings
from app.models.errors import (DegenerateMaskError, InsufficientReferencesError, InvalidArgumentError,
                               ParseError)
from app.models.geometry import DegradationResult, PointCloud, ReferencePair
from app.models.schemas import ManifestEntry, ReferenceManifest
from app.services.geometry import as_points, knn_indices, random_indices
from app.services.metrics import chamfer
from app.services.storage import atomic_write, read_cloud, write_cloud

logger = logging.getLogger(__name__)

MANIFEST_HEADER = "#refcomp-manifest v1"


def degrade_indices(template: np.ndarray, complete: np.ndarray, k: int, out_size: int,
                    rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """模板每点取完整点云中的 k 个近邻，返回 (并集下标, 重采样后的部分点下标)"""
    selected = np.unique(knn_indices(template, complete, k))
    chosen = selected[random_indices(selected.shape[0], out_size, rng)]
    return selected, chosen


def degrade(template: PointCloud, complete: PointCloud, k: int, out_size: int, seed: int,
            with_mask: bool = True) -> DegradationResult:
    """模板引导退化 Deg(·)，同时给出掩码 m_y = c_y − p_y"""
    tpl = as_points(template, "template")
    full = as_points(complete, "complete")
    if out_size <= 0:
        raise InvalidArgumentError(f"输出点数必须为正，实际 {out_size}")
    rng = np.random.default_rng(seed)
    selected, chosen = degrade_indices(tpl, full, k, out_size, rng)
    partial = complete.with_points(full[chosen])
    if not with_mask:
        return DegradationResult(partial=partial, selected_indices=selected, partial_indices=chosen)

    complement = np.setdiff1d(np.arange(full.shape[0]), selected, assume_unique=True)
    if complement.size == 0:
        raise DegenerateMaskError(f"模板覆盖了全部 {full.shape[0]} 个点 (k={k})，掩码为空")
    if complement.size >= out_size:
        mask_idx = complement[rng.choice(complement.size, size=out_size, replace=False)]
    else:
        pad = complement[rng.choice(complement.size, size=out_size - complement.size, replace=True)]
        mask_idx = np.concatenate([complement, pad])
    mask = complete.with_points(full[mask_idx])
    return DegradationResult(partial=partial, selected_indices=selected, partial_indices=chosen, mask=mask,
                             mask_indices=mask_idx)


def reference_seed(seed: int, source_id: str) -> int:
    """每个语料条目的退化种子只依赖其 source_id，与遍历顺序无关"""
    return int(np.random.SeedSequence([seed, zlib.crc32(source_id.encode("utf-8"))]).generate_state(1)[0])


def build_reference_pairs(target: PointCloud, corpus: Sequence[PointCloud], k: int = 15, top_n: int = 3,
                          min_cd: float = 1.0e-4,
                          class_scope: Literal["same-class", "all-classes"] = "same-class",
                          out_size: Optional[int] = None, seed: int = 0) -> List[ReferencePair]:
    """以目标为模板退化语料中每个完整点云，按 CD 取前 top_n 个参考对"""
    if class_scope == "same-class":
        candidates = [c for c in corpus if c.class_label == target.class_label]
    elif class_scope == "all-classes":
        candidates = list(corpus)
    else:
        raise InvalidArgumentError(f"未知类别范围: {class_scope}")
    if not candidates:
        raise InvalidArgumentError(f"类别 {target.class_label} 下没有可用的语料")
    out_size = out_size or len(target)

    def _evaluate(cloud: PointCloud) -> Optional[ReferencePair]:
        source_id = cloud.source_id or ""
        try:
            result = degrade(target, cloud, k, out_size, reference_seed(seed, source_id))
        except DegenerateMaskError as e:
            logger.warning(f"跳过语料 {source_id}: {e}")
            return None
        cd = chamfer(target, result.partial)
        return ReferencePair(partial_ref=result.partial, complete_ref=cloud, mask=result.mask,
                             cd_to_template=cd, source_id=source_id)

    with ThreadPoolExecutor(max_workers=max(1, settings.threads)) as pool:
        evaluated = [pair for pair in pool.map(_evaluate, candidates) if pair is not None]

    survivors = sorted((p for p in evaluated if p.cd_to_template >= min_cd),
                       key=lambda p: (p.cd_to_template, p.source_id))
    if len(survivors) < top_n:
        raise InsufficientReferencesError(
            f"目标 {target.source_id} 只有 {len(survivors)} 个参考对满足 min_cd={min_cd}，需要 {top_n}",
            [(p.source_id, p.cd_to_template) for p in survivors])
    return survivors[:top_n]


def select_training_pair(pairs: Sequence[ReferencePair], rng: np.random.Generator) -> ReferencePair:
    """在参考对中均匀随机选择一个"""
    if not pairs:
        raise InvalidArgumentError("参考对列表为空")
    return pairs[int(rng.integers(len(pairs)))]


def save_manifest(manifest: ReferenceManifest, path: Path) -> Path:
    """写参考清单 TSV，CD 保留 17 位有效数字"""
    with atomic_write(path, binary=False) as handle:
        handle.write(MANIFEST_HEADER + "\n")
        for entry in manifest.rows():
            handle.write("\t".join([entry.target_path, str(entry.rank), entry.ref_partial_path,
                                    entry.ref_complete_path, entry.ref_mask_path, f"{entry.cd:.17g}"]) + "\n")
    logger.info(f"参考清单已保存: {path} ({len(manifest.rows())} 行)")
    return Path(path)


def load_manifest(path: Path, check_files: bool = True) -> ReferenceManifest:
    """读取并校验参考清单，相对路径以清单所在目录为基准"""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").split("\n")
    except OSError as e:
        raise ParseError(f"无法读取参考清单: {e}", path=str(path))
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ParseError(f"缺少清单头 '{MANIFEST_HEADER}'", path=str(path), line=1)

    manifest = ReferenceManifest(base_dir=path.parent)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise ParseError(f"需要 6 列，实际 {len(fields)} 列", path=str(path), line=lineno)
        try:
            entry = ManifestEntry(target_path=fields[0], rank=int(fields[1]), ref_partial_path=fields[2],
                                  ref_complete_path=fields[3], ref_mask_path=fields[4], cd=float(fields[5]))
        except ValueError as e:
            raise ParseError(f"字段格式错误: {e}", path=str(path), line=lineno)
        ranked = manifest.entries.setdefault(entry.target_path, [])
        if entry.rank != len(ranked) + 1:
            raise ParseError(f"目标 {entry.target_path} 的排名不连续", path=str(path), line=lineno)
        if ranked and entry.cd < ranked[-1].cd:
            raise ParseError(f"目标 {entry.target_path} 的 CD 未按升序排列", path=str(path), line=lineno)
        if check_files:
            for ref in (entry.target_path, entry.ref_partial_path, entry.ref_complete_path, entry.ref_mask_path):
                if not manifest.resolve(ref).exists():
                    raise ParseError(f"引用的文件不存在: {ref}", path=str(path), line=lineno)
        ranked.append(entry)
    return manifest


def load_pairs(manifest: ReferenceManifest, target_path: str) -> List[ReferencePair]:
    """按清单读取某个目标的全部参考对"""
    pairs = []
    for entry in manifest.entries[target_path]:
        complete = read_cloud(manifest.resolve(entry.ref_complete_path))
        pairs.append(ReferencePair(partial_ref=read_cloud(manifest.resolve(entry.ref_partial_path)),
                                   complete_ref=complete, mask=read_cloud(manifest.resolve(entry.ref_mask_path)),
                                   cd_to_template=entry.cd, source_id=complete.source_id or ""))
    return pairs


def _relative(path: Path, base: Path) -> str:
    return Path(os.path.relpath(Path(path).resolve(), Path(base).resolve())).as_posix()


def build_manifest(targets: Dict[str, Tuple[Path, PointCloud]], corpus: Dict[str, Tuple[Path, PointCloud]],
                   out_path: Path, k: int = 15, top_n: int = 3, min_cd: float = 1.0e-4,
                   class_scope: Literal["same-class", "all-classes"] = "same-class", seed: int = 0,
                   fmt: str = "pcb") -> ReferenceManifest:
    """为目录中的全部目标构建参考对，全部成功后才写出退化文件与清单"""
    out_path = Path(out_path)
    base = out_path.parent
    refs_dir = base / f"{out_path.stem}_refs"
    corpus_paths = {cloud.source_id: path for path, cloud in corpus.values()}
    corpus_clouds = [cloud for _, cloud in corpus.values()]

    retrieved: Dict[str, List[ReferencePair]] = {}
    failures: List[str] = []
    for target_id in tqdm(sorted(targets), desc="检索参考对", disable=len(targets) < 20):
        try:
            retrieved[target_id] = build_reference_pairs(targets[target_id][1], corpus_clouds, k=k, top_n=top_n,
                                                         min_cd=min_cd, class_scope=class_scope, seed=seed)
        except InsufficientReferencesError as e:
            logger.error(f"参考对不足: {e}")
            failures.append(target_id)
    if failures:
        raise InsufficientReferencesError(f"{len(failures)} 个目标参考对不足: {', '.join(failures)}")

    manifest = ReferenceManifest(base_dir=base)
    for target_id, pairs in retrieved.items():
        target_rel = _relative(targets[target_id][0], base)
        rows = []
        for rank, pair in enumerate(pairs, start=1):
            stem = f"{target_id}_r{rank}"
            partial_path = write_cloud(refs_dir / f"{stem}_partial.{fmt}", pair.partial_ref, fmt)
            mask_path = write_cloud(refs_dir / f"{stem}_mask.{fmt}", pair.mask, fmt)
            rows.append(ManifestEntry(target_path=target_rel, rank=rank,
                                      ref_partial_path=_relative(partial_path, base),
                                      ref_complete_path=_relative(corpus_paths[pair.source_id], base),
                                      ref_mask_path=_relative(mask_path, base), cd=pair.cd_to_template))
        manifest.entries[target_rel] = rows
    save_manifest(manifest, out_path)
    return manifest
