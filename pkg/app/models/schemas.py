import json
import typing
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.models.errors import ConfigError

ShapeClass = Literal["plane-slab", "box", "cylinder", "torus"]

# 每类形状的尺寸参数及取值范围
SHAPE_SIZE_RANGES: Dict[str, Tuple[Tuple[float, float], ...]] = {
    "plane-slab": ((0.6, 1.5), (0.6, 1.5), (0.02, 0.08)),  # 半长、半宽、半厚
    "box": ((0.3, 1.2), (0.3, 1.2), (0.3, 1.2)),  # 三个半边长
    "cylinder": ((0.3, 1.0), (0.3, 1.2)),  # 半径、半高
    "torus": ((0.6, 1.0), (0.15, 0.4)),  # 主半径、管半径
}

METRIC_SCALES: Dict[str, float] = {"cd": 1e4, "ucd": 1e4, "mmd": 1e4, "f1": 1e2}


class ShapeSpec(BaseModel):
    """程序化形状描述"""
    model_config = ConfigDict(frozen=True)

    class_name: ShapeClass
    size: Tuple[float, ...]
    rotation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    n_points: int = 2048
    seed: int = 0

    @field_validator("n_points")
    def n_points_must_be_positive(cls, v):
        if v <= 0:
            raise ValueError("点数必须大于0")
        return v

    @model_validator(mode="after")
    def size_within_ranges(self):
        ranges = SHAPE_SIZE_RANGES[self.class_name]
        if len(self.size) != len(ranges):
            raise ValueError(f"{self.class_name} 需要 {len(ranges)} 个尺寸参数")
        for value, (lo, hi) in zip(self.size, ranges):
            if not lo <= value <= hi:
                raise ValueError(f"{self.class_name} 尺寸 {value} 超出范围 [{lo}, {hi}]")
        return self


class MetricReport(BaseModel):
    """评估指标结果"""
    name: str
    value: float
    scale_factor: float
    per_item: Optional[List[Tuple[str, float]]] = None

    @property
    def scaled(self) -> float:
        return self.value * self.scale_factor


class OptimizerConfig(BaseModel):
    """AdamW + 余弦调度参数（完整规模默认: lr=5e-4, weight decay=5e-4）"""
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = 5e-4
    weight_decay: float = 5e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    total_steps: Optional[int] = None

    @field_validator("learning_rate")
    def lr_must_be_positive(cls, v):
        if v <= 0:
            raise ValueError("学习率必须大于0")
        return v

    @field_validator("weight_decay")
    def wd_must_be_non_negative(cls, v):
        if v < 0:
            raise ValueError("权重衰减不能为负")
        return v


class LossWeights(BaseModel):
    """总损失权重（完整规模默认: α=0.35, β=0.65, γ=0.001）"""
    model_config = ConfigDict(extra="forbid")

    alpha: float = 0.35
    beta: float = 0.65
    gamma: float = 0.001
    lambda_adv: float = 0.1

    @field_validator("alpha", "beta", "gamma", "lambda_adv")
    def weights_must_be_non_negative(cls, v):
        if v < 0:
            raise ValueError("损失权重不能为负")
        return v


class ModelArchitecture(BaseModel):
    """网络结构。默认值为完整规模结构: 潜在宽度 256，LSFM 256→512→256，输出 2048×3"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    partial_size: int = 1024
    complete_size: int = 2048
    encoder_widths: Tuple[int, ...] = (128, 256)
    latent_width: int = 256
    lsfm_width: int = 512
    lsfm_blocks: int = 5
    decoder_widths: Tuple[int, ...] = (512, 512, 1024, 3072)
    latent_disc_widths: Tuple[int, ...] = (256, 64)
    cloud_disc_point_widths: Tuple[int, ...] = (64, 128)
    cloud_disc_head_widths: Tuple[int, ...] = (64,)

    @model_validator(mode="after")
    def widths_consistent(self):
        if self.encoder_widths[-1] != self.latent_width:
            raise ValueError("编码器最后一层宽度必须等于潜在宽度")
        widths = (self.partial_size, self.complete_size, self.latent_width, self.lsfm_width, self.lsfm_blocks,
                  *self.encoder_widths, *self.decoder_widths, *self.latent_disc_widths,
                  *self.cloud_disc_point_widths, *self.cloud_disc_head_widths)
        if min(widths) <= 0:
            raise ValueError("网络宽度与点数必须为正")
        return self

    @classmethod
    def desk(cls) -> "ModelArchitecture":
        """桌面规模: 仅缩小解码器隐藏层，其余保持完整规模取值"""
        return cls(decoder_widths=(256, 256, 256, 512))

    @classmethod
    def toy(cls) -> "ModelArchitecture":
        """梯度检查与单元测试用的微型结构"""
        return cls(partial_size=8, complete_size=16, encoder_widths=(8, 6), latent_width=6, lsfm_width=10,
                   decoder_widths=(8, 8, 12, 12), latent_disc_widths=(6, 4), cloud_disc_point_widths=(4, 6),
                   cloud_disc_head_widths=(4,))


class TrainConfig(BaseModel):
    """训练配置。桌面默认值与完整规模默认值见 docs/config_keys.md"""
    model_config = ConfigDict(extra="forbid")

    mode: Literal["plain", "wdis", "unified"] = "plain"
    epochs: int = 30  # 完整规模 600
    batch_size: int = 8  # 完整规模 50
    max_steps: Optional[int] = None
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    architecture: ModelArchitecture = Field(default_factory=ModelArchitecture.desk)
    top_n_refs: int = 3
    degrade_k_ref: int = 15
    degrade_k_train: int = 5
    min_cd: float = 1.0e-4
    class_scope: Optional[Literal["same-class", "all-classes"]] = None
    target_class: Optional[str] = None
    seed: int = 0
    fixed_ref: bool = False
    only_gan: bool = False
    no_share: bool = False
    eval_every: int = 0

    @field_validator("epochs", "batch_size", "top_n_refs", "degrade_k_ref", "degrade_k_train")
    def must_be_positive(cls, v):
        if v <= 0:
            raise ValueError("必须大于0")
        return v

    @model_validator(mode="after")
    def mode_defaults(self):
        if self.class_scope is None:
            self.class_scope = "all-classes" if self.mode == "unified" else "same-class"
        if self.mode == "unified" and self.target_class is not None:
            raise ValueError("unified 模式不能指定 target_class")
        return self

    @property
    def partial_size(self) -> int:
        return self.architecture.partial_size

    @property
    def complete_size(self) -> int:
        return self.architecture.complete_size

    @property
    def adversarial(self) -> bool:
        return self.mode in ("wdis", "unified") or self.only_gan

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """完整规模预设（600 epoch, batch 50, 原始解码器宽度）"""
        values = {"epochs": 600, "batch_size": 50, "architecture": ModelArchitecture()}
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path: Path, **overrides) -> "TrainConfig":
        """读取 `key = value` 配置文件，点号表示嵌套，未知键报错"""
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise ConfigError(f"无法读取配置文件 {path}: {e}")

        raw: Dict[str, str] = {}
        for lineno, line in enumerate(lines, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path} 第{lineno}行缺少 '='")
            key, value = (part.strip() for part in line.split("=", 1))
            raw[key] = value

        unknown = [key for key in raw if _field_annotation(cls, key) is None]
        if unknown:
            raise ConfigError("未知配置键", unknown)

        nested: Dict[str, object] = {}
        for key, value in raw.items():
            parts = key.split(".")
            node = nested
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = _coerce_value(_field_annotation(cls, key), value)
        nested.update(overrides)
        try:
            return cls.model_validate(nested)
        except ValidationError as e:
            raise ConfigError(f"配置无效 {path}: {e}")

    def snapshot_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def _field_annotation(model: type, dotted: str):
    """返回点号键对应字段的类型注解，不存在时返回 None"""
    current = model
    annotation = None
    for part in dotted.split("."):
        fields = getattr(current, "model_fields", None)
        if fields is None or part not in fields:
            return None
        annotation = fields[part].annotation
        current = annotation
    return annotation


def _coerce_value(annotation, value: str):
    if value.lower() in ("none", "null", ""):
        return None
    args = typing.get_args(annotation)
    origin = typing.get_origin(annotation)
    if origin is tuple or any(typing.get_origin(a) is tuple for a in args):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class LossBreakdown(BaseModel):
    """单步损失分解"""
    cd_ref: float = 0.0
    cd_aux_ref: float = 0.0
    cd_tar: float = 0.0
    cd_aux_tar: float = 0.0
    wasserstein: float = 0.0
    adv_gen: float = 0.0
    adv_disc: float = 0.0
    total: float = 0.0

    def recombine(self, weights: LossWeights, adversarial: bool) -> float:
        """按总损失公式由各分量重新组合"""
        total = (weights.alpha * (self.cd_ref + self.cd_aux_ref)
                 + weights.beta * (self.cd_tar + self.cd_aux_tar)
                 + weights.gamma * self.wasserstein)
        if adversarial:
            total = total + weights.lambda_adv * self.adv_gen
        return total


class GradCheckReport(BaseModel):
    """有限差分梯度检查报告"""
    errors: Dict[str, float]
    tolerance: float
    max_error: float
    passed: bool


class CheckResult(BaseModel):
    """verify 子命令中单项检查的结果"""
    suite: str
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


class ManifestEntry(BaseModel):
    """参考清单中的一行"""
    target_path: str
    rank: int
    ref_partial_path: str
    ref_complete_path: str
    ref_mask_path: str
    cd: float


class ReferenceManifest(BaseModel):
    """每个目标按 CD 升序排列的 N 个参考对"""
    base_dir: Path = Path(".")
    entries: Dict[str, List[ManifestEntry]] = Field(default_factory=dict)

    def resolve(self, relative: str) -> Path:
        path = Path(relative)
        return path if path.is_absolute() else self.base_dir / path

    def rows(self) -> List[ManifestEntry]:
        return [entry for target in self.entries for entry in self.entries[target]]

    def targets(self) -> List[str]:
        return list(self.entries)
