# app/services/network.py
"""RefComp 网络: 编码器 E_p/E_c/E_m、LSFM 补全模块、解码器 D_c/D_c^r 与两个判别器。

参数全部按名称存放在 ParamStore。共享模式下参考分支与目标分支读取同一组
encoder_p / lsfm / decoder_c 参数；no_share 时两支各自带 "reference." / "target." 前缀。
"""
import logging
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np

from app.models.errors import CheckpointError, InvalidArgumentError, ShapeError
from app.models.geometry import PointCloud
from app.models.schemas import ModelArchitecture
from app.services.autodiff import (Node, ParamStore, bias_add, concat, constant, leaky_relu, matmul, max_reduce,
                                   relu, reshape)

logger = logging.getLogger(__name__)

Branch = Literal["reference", "target"]
Head = Literal["main", "aux"]
CloudInput = Union[Node, PointCloud, np.ndarray]

SHARED_MODULES = ("encoder_p", "lsfm", "decoder_c")
LEAKY_SLOPE = 0.2


def _chain(prefix: str, widths: Tuple[int, ...]) -> Dict[str, Tuple[int, int]]:
    return {f"{prefix}{i}": (a, b) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))}


class RefCompNetwork:
    """按名称读取参数的函数式网络，每次前向都在当前参数上重建计算图"""

    def __init__(self, architecture: ModelArchitecture, store: Optional[ParamStore] = None, no_share: bool = False,
                 adversarial: bool = False, bypass_lsfm: bool = False):
        self.arch = architecture
        self.store = store if store is not None else ParamStore()
        self.no_share = no_share
        self.adversarial = adversarial
        self.bypass_lsfm = bypass_lsfm

    # ------------------------------------------------------------ 参数布局

    def scope(self, module: str, branch: Branch = "reference") -> str:
        if self.no_share and module in SHARED_MODULES:
            return f"{branch}.{module}"
        return module

    def layer_shapes(self) -> Dict[str, Tuple[int, int]]:
        """全部线性层的 (输入宽度, 输出宽度)，键为层名（不含 .weight/.bias）"""
        a = self.arch
        latent, hidden = a.latent_width, a.lsfm_width
        decoder = (latent, *a.decoder_widths, a.complete_size * 3)
        shapes: Dict[str, Tuple[int, int]] = {}
        branches: List[Branch] = ["reference", "target"] if self.no_share else ["reference"]
        for branch in branches:
            enc = self.scope("encoder_p", branch)
            shapes.update(_chain(f"{enc}.layer", (3, *a.encoder_widths)))
            lsfm = self.scope("lsfm", branch)
            shapes[f"{lsfm}.lift_p"] = (latent, hidden)
            shapes[f"{lsfm}.lift_m"] = (latent, hidden)
            for i in range(a.lsfm_blocks):
                shapes[f"{lsfm}.block{i}"] = (hidden, hidden)
            shapes[f"{lsfm}.fuse_mask"] = (2 * hidden, hidden)
            shapes[f"{lsfm}.fuse_block"] = (hidden, hidden)
            shapes[f"{lsfm}.fuse_res"] = (2 * hidden, hidden)
            shapes[f"{lsfm}.out"] = (hidden, latent)
            shapes.update(_chain(f"{self.scope('decoder_c', branch)}.layer", decoder))
        shapes.update(_chain("encoder_c.layer", (3, *a.encoder_widths)))
        shapes.update(_chain("encoder_m.layer", (3, *a.encoder_widths)))
        shapes.update(_chain("decoder_r.layer", decoder))
        if self.adversarial:
            shapes.update(_chain("disc_latent.layer", (latent, *a.latent_disc_widths, 1)))
            point = (3, *a.cloud_disc_point_widths)
            shapes.update(_chain("disc_cloud.point", point))
            shapes.update(_chain("disc_cloud.head", (point[-1], *a.cloud_disc_head_widths, 1)))
        return shapes

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for layer, (fan_in, fan_out) in self.layer_shapes().items():
            shapes[f"{layer}.weight"] = (fan_in, fan_out)
            shapes[f"{layer}.bias"] = (fan_out,)
        return shapes

    def initialize(self, seed: int = 0) -> "RefCompNetwork":
        """He 正态初始化权重，偏置置零"""
        rng = np.random.default_rng(seed)
        for layer, (fan_in, fan_out) in self.layer_shapes().items():
            self.store.create(f"{layer}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            self.store.create(f"{layer}.bias", np.zeros(fan_out))
        logger.info(f"网络参数初始化完成: {len(self.store)} 个张量, {self.store.count()} 个标量")
        return self

    @classmethod
    def from_snapshot(cls, architecture: ModelArchitecture, snapshot: Dict[str, np.ndarray], no_share: bool = False,
                      adversarial: bool = False, bypass_lsfm: bool = False) -> "RefCompNetwork":
        """从参数快照构建独立的网络（评估线程只读使用）"""
        network = cls(architecture, no_share=no_share, adversarial=adversarial, bypass_lsfm=bypass_lsfm)
        expected = network.parameter_shapes()
        missing = sorted(set(expected) - set(snapshot))
        if missing:
            raise CheckpointError(f"参数快照缺少 {len(missing)} 个参数，例如 {missing[0]}")
        for name, shape in expected.items():
            values = snapshot[name]
            if tuple(values.shape) != shape:
                raise CheckpointError(f"参数 {name} 形状 {tuple(values.shape)} 与结构 {shape} 不一致")
            network.store.create(name, values)
        return network

    def generator_names(self) -> List[str]:
        return [n for n in self.store if not n.startswith("disc_")]

    def discriminator_names(self) -> List[str]:
        return [n for n in self.store if n.startswith("disc_")]

    def shared_trio_count(self, branch: Branch = "reference") -> int:
        """共享三件套 (E_p, LSFM, D_c) 在某一分支下的参数标量数"""
        return self.store.count([self.scope(module, branch) + "." for module in SHARED_MODULES])

    # ------------------------------------------------------------ 基本层

    def _dense(self, x: Node, layer: str) -> Node:
        return bias_add(matmul(x, self.store.get(f"{layer}.weight")), self.store.get(f"{layer}.bias"))

    def _points(self, cloud: CloudInput, expected: Optional[int], what: str) -> Node:
        if isinstance(cloud, Node):
            node = cloud
        elif isinstance(cloud, PointCloud):
            node = constant(cloud.points[None])
        else:
            arr = np.asarray(cloud, dtype=np.float64)
            node = constant(arr[None] if arr.ndim == 2 else arr)
        if node.values.ndim != 3 or node.shape[-1] != 3 or (expected is not None and node.shape[1] != expected):
            raise ShapeError(f"{what} 输入形状错误", node.shape, (-1, expected if expected else -1, 3))
        return node

    def _feature(self, z: Node, what: str) -> Node:
        if z.values.ndim != 2 or z.shape[1] != self.arch.latent_width:
            raise ShapeError(f"{what} 潜在特征宽度错误", z.shape, (-1, self.arch.latent_width))
        return z

    def _pointnet(self, x: Node, prefix: str, depth: int) -> Node:
        """逐点两层变换 + 点轴最大池化"""
        h = x
        for i in range(depth):
            h = relu(self._dense(h, f"{prefix}.layer{i}"))
        return max_reduce(h, axis=-2)

    def _residual(self, x: Node, layer: str) -> Node:
        """R(x) = x + relu(Wx + b)"""
        return x + relu(self._dense(x, layer))

    # ------------------------------------------------------------ 编码器

    def encode_partial(self, cloud: CloudInput, branch: Branch = "reference") -> Node:
        """E_p，参考分支的 p_y 与目标分支的 p_x 共用"""
        x = self._points(cloud, self.arch.partial_size, "E_p")
        return self._pointnet(x, self.scope("encoder_p", branch), len(self.arch.encoder_widths))

    def encode_complete(self, cloud: CloudInput) -> Node:
        x = self._points(cloud, self.arch.complete_size, "E_c")
        return self._pointnet(x, "encoder_c", len(self.arch.encoder_widths))

    def encode_mask(self, cloud: CloudInput) -> Node:
        x = self._points(cloud, self.arch.partial_size, "E_m")
        return self._pointnet(x, "encoder_m", len(self.arch.encoder_widths))

    # ------------------------------------------------------------ 补全模块

    def lsfm(self, z_partial: Node, z_mask: Node, branch: Branch = "reference") -> Node:
        """z = [[R(R⁵(z_p) ⊕ z_m) + z_m] ⊕ R⁵(z_p)] + R⁵(z_p)

        入口把两路特征提升到 lsfm_width，每次拼接后线性投影回 lsfm_width，出口投影回 latent_width。
        """
        z_partial = self._feature(z_partial, "LSFM z_p")
        z_mask = self._feature(z_mask, "LSFM z_m")
        if z_partial.shape[0] != z_mask.shape[0]:
            raise ShapeError("LSFM 批大小不一致", z_partial.shape, z_mask.shape)
        prefix = self.scope("lsfm", branch)
        h_p = relu(self._dense(z_partial, f"{prefix}.lift_p"))
        h_m = relu(self._dense(z_mask, f"{prefix}.lift_m"))
        r = h_p
        for i in range(self.arch.lsfm_blocks):
            r = self._residual(r, f"{prefix}.block{i}")
        fused = self._residual(self._dense(concat([r, h_m]), f"{prefix}.fuse_mask"), f"{prefix}.fuse_block") + h_m
        fused = self._dense(concat([fused, r]), f"{prefix}.fuse_res") + r
        return self._dense(fused, f"{prefix}.out")

    # ------------------------------------------------------------ 解码器

    def decode(self, z: Node, head: Head = "main", branch: Branch = "reference") -> Node:
        """五层 MLP，最后一层线性，输出 (B, complete_size, 3)"""
        z = self._feature(z, "解码器")
        if head == "main":
            prefix = self.scope("decoder_c", branch)
        elif head == "aux":
            prefix = "decoder_r"
        else:
            raise InvalidArgumentError(f"未知解码头: {head}")
        depth = len(self.arch.decoder_widths) + 1
        h = z
        for i in range(depth):
            h = self._dense(h, f"{prefix}.layer{i}")
            if i < depth - 1:
                h = relu(h)
        return reshape(h, (z.shape[0], self.arch.complete_size, 3))

    # ------------------------------------------------------------ 判别器

    def discriminate_latent(self, z: Node) -> Node:
        """潜在特征判别器，输出未压缩的原始分数 (B,)"""
        self._require_discriminators()
        h = self._feature(z, "潜在判别器")
        depth = len(self.arch.latent_disc_widths) + 1
        for i in range(depth):
            h = self._dense(h, f"disc_latent.layer{i}")
            if i < depth - 1:
                h = leaky_relu(h, LEAKY_SLOPE)
        return reshape(h, (z.shape[0],))

    def discriminate_cloud(self, cloud: CloudInput) -> Node:
        """点云判别器: 逐点 MLP + 最大池化 + MLP 头，输出 (B,)"""
        self._require_discriminators()
        h = self._points(cloud, None, "点云判别器")
        batch = h.shape[0]
        for i in range(len(self.arch.cloud_disc_point_widths)):
            h = leaky_relu(self._dense(h, f"disc_cloud.point{i}"), LEAKY_SLOPE)
        h = max_reduce(h, axis=-2)
        depth = len(self.arch.cloud_disc_head_widths) + 1
        for i in range(depth):
            h = self._dense(h, f"disc_cloud.head{i}")
            if i < depth - 1:
                h = leaky_relu(h, LEAKY_SLOPE)
        return reshape(h, (batch,))

    def _require_discriminators(self):
        if not self.adversarial:
            raise InvalidArgumentError("非对抗模式下网络不包含判别器")

    # ------------------------------------------------------------ 组合

    def complete(self, partial: CloudInput, z_mask: Node, branch: Branch = "target") -> Node:
        """D_c ∘ T ∘ E_p，掩码特征来自参考对；bypass_lsfm 时直接解码 z_{p_x}"""
        z_partial = self.encode_partial(partial, branch)
        if self.bypass_lsfm:
            return self.decode(z_partial, "main", branch)
        return self.decode(self.lsfm(z_partial, z_mask, branch), "main", branch)
