# app/services/verification.py
"""verify 子命令的三套自检: 有限差分梯度检查、暴力枚举对照、结构不变量"""
import itertools
import logging
import math
import time
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from app.models.geometry import PointCloud
from app.models.schemas import CheckResult, LossBreakdown, LossWeights, ModelArchitecture, TrainConfig
from app.services import autodiff as ad
from app.services.autodiff import Node, ParamStore, backward, grad_check, reachable_parameters
from app.services.corpus import crop_partial, generate_shape, random_spec
from app.services.geometry import knn_indices, random_indices
from app.services.losses import adversarial_losses, assignment_cost, cd_loss, total_loss, wasserstein_loss
from app.services.metrics import chamfer, f1, ucd
from app.services.network import RefCompNetwork
from app.services.refdata import build_reference_pairs, degrade, degrade_indices, reference_seed
from app.services.trainer import RefCompTrainer, TrainingBatch

logger = logging.getLogger(__name__)

Check = Callable[[], Tuple[bool, str]]
GRAD_TOLERANCE = 1e-4


def _run(suite: str, name: str, check: Check) -> CheckResult:
    started = time.perf_counter()
    try:
        passed, detail = check()
    except Exception as e:
        logger.error(f"检查 {suite}/{name} 异常: {e}")
        passed, detail = False, f"{type(e).__name__}: {e}"
    return CheckResult(suite=suite, name=name, passed=bool(passed), detail=detail,
                       seconds=time.perf_counter() - started)


# ---------------------------------------------------------------- 梯度检查

def _store(rng: np.random.Generator, **shapes: Tuple[int, ...]) -> ParamStore:
    store = ParamStore()
    for name, shape in shapes.items():
        store.create(name, rng.normal(size=shape))
    return store


def _gradcheck(builder: Callable[[ParamStore], Node], store: ParamStore, **kwargs) -> Tuple[bool, str]:
    report = grad_check(builder, store, tolerance=GRAD_TOLERANCE, **kwargs)
    return report.passed, f"最大相对误差 {report.max_error:.2e}"


def _sum_sq(node: Node) -> Node:
    return ad.sum_reduce(ad.square(node))


def corrupted_square(x: Node) -> Node:
    """前向正确、VJP 故意写错 (3x 而非 2x) 的平方，作为梯度检查的反例"""
    return Node(x.values * x.values, (x,), "square", lambda g: (3.0 * x.values * g,))


def primitive_builders(rng: np.random.Generator) -> Dict[str, Tuple[Callable[[ParamStore], Node], ParamStore]]:
    idx = rng.integers(0, 5, size=(2, 4))
    cases = {
        "matmul": (lambda s: _sum_sq(ad.matmul(s["x"], s["w"])), dict(x=(2, 3, 4), w=(4, 5))),
        "add/sub": (lambda s: _sum_sq(ad.sub(ad.add(s["a"], s["b"]), s["c"])), dict(a=(3, 4), b=(3, 4), c=(3, 4))),
        "bias_add": (lambda s: _sum_sq(ad.bias_add(s["x"], s["b"])), dict(x=(2, 3, 4), b=(4,))),
        "concat": (lambda s: _sum_sq(ad.concat([s["a"], s["b"]])) + ad.sum_reduce(ad.concat([s["a"], s["b"]])),
                   dict(a=(2, 3), b=(2, 5))),
        "relu": (lambda s: _sum_sq(ad.relu(s["x"])), dict(x=(4, 5))),
        "leaky_relu": (lambda s: _sum_sq(ad.leaky_relu(s["x"], 0.2)), dict(x=(4, 5))),
        "max_reduce": (lambda s: _sum_sq(ad.max_reduce(s["x"], axis=-2)), dict(x=(2, 6, 3))),
        "gather": (lambda s: _sum_sq(ad.gather_rows(s["x"], idx)), dict(x=(2, 5, 3))),
        "mean": (lambda s: _sum_sq(ad.mean_reduce(s["x"], axis=1)), dict(x=(3, 4, 2))),
        "sum": (lambda s: _sum_sq(ad.sum_reduce(s["x"], axis=(0, 2))), dict(x=(3, 4, 2))),
        "scale/shift": (lambda s: _sum_sq(ad.shift(ad.scale(s["x"], -1.7), 0.3)), dict(x=(5,))),
        "square": (lambda s: ad.sum_reduce(ad.square(ad.square(s["x"]))), dict(x=(6,))),
        "sqrt": (lambda s: ad.sum_reduce(ad.sqrt(ad.shift(ad.square(s["x"]), 0.5))), dict(x=(6,))),
        "reshape": (lambda s: _sum_sq(ad.matmul(ad.reshape(s["x"], (3, 4)), s["w"])), dict(x=(2, 6), w=(4, 2))),
    }
    return {name: (builder, _store(rng, **shapes)) for name, (builder, shapes) in cases.items()}


def _toy_network(seed: int, adversarial: bool = True) -> RefCompNetwork:
    network = RefCompNetwork(ModelArchitecture.toy(), adversarial=adversarial).initialize(seed)
    rng = np.random.default_rng([seed, 7])
    for name, param in network.store.items():
        if name.endswith(".bias"):
            param.values[...] = rng.normal(scale=0.1, size=param.values.shape)
    return network


def _toy_batch(arch: ModelArchitecture, rng: np.random.Generator, batch: int = 4) -> TrainingBatch:
    def cloud(n):
        return rng.normal(scale=0.5, size=(batch, n, 3))
    return TrainingBatch(target_ids=[f"toy_{i}" for i in range(batch)], partials=cloud(arch.partial_size),
                         ref_partials=cloud(arch.partial_size), ref_completes=cloud(arch.complete_size),
                         ref_masks=cloud(arch.partial_size))


def gradcheck_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [_run("gradcheck", f"primitive:{name}", lambda b=builder, s=store: _gradcheck(b, s))
               for name, (builder, store) in primitive_builders(rng).items()]

    net = _toy_network(seed)
    arch = net.arch
    store = net.store
    partial = rng.normal(scale=0.5, size=(2, arch.partial_size, 3))
    complete = rng.normal(scale=0.5, size=(2, arch.complete_size, 3))
    z_a = np.abs(rng.normal(size=(2, arch.latent_width)))
    z_b = np.abs(rng.normal(size=(2, arch.latent_width)))
    module_checks: Dict[str, Tuple[Callable[[ParamStore], Node], str]] = {
        "encoder_p": (lambda s: _sum_sq(net.encode_partial(partial)), "encoder_p."),
        "encoder_c": (lambda s: _sum_sq(net.encode_complete(complete)), "encoder_c."),
        "encoder_m": (lambda s: _sum_sq(net.encode_mask(partial)), "encoder_m."),
        "lsfm": (lambda s: _sum_sq(net.lsfm(ad.constant(z_a), ad.constant(z_b))), "lsfm."),
        "decoder_c+cd": (lambda s: cd_loss(net.decode(ad.constant(z_a), "main"), complete), "decoder_c."),
        "decoder_r+cd": (lambda s: cd_loss(net.decode(ad.constant(z_a), "aux"), complete), "decoder_r."),
        "disc_latent": (lambda s: _sum_sq(net.discriminate_latent(ad.constant(z_a))), "disc_latent."),
        "disc_cloud": (lambda s: _sum_sq(net.discriminate_cloud(complete)), "disc_cloud."),
    }
    for name, (builder, prefix) in module_checks.items():
        results.append(_run("gradcheck", f"module:{name}",
                            lambda b=builder, p=prefix: _gradcheck(b, store, names=store.names(p), max_entries=8,
                                                                   seed=seed)))

    loss_store = _store(rng, a=(2, 7, 3), fake=(5, 4), scores_real=(4,), scores_fake=(4,))
    target = rng.normal(size=(2, 9, 3))
    real = rng.normal(size=(5, 4))
    loss_checks: Dict[str, Tuple[Callable[[ParamStore], Node], List[str]]] = {
        "cd_loss": (lambda s: cd_loss(s["a"], target), ["a"]),
        "wasserstein_loss": (lambda s: wasserstein_loss(s["fake"], real), ["fake"]),
        "adversarial_losses": (lambda s: ad.add(*adversarial_losses(s["scores_real"], s["scores_fake"])),
                               ["scores_real", "scores_fake"]),
    }
    for name, (builder, names) in loss_checks.items():
        results.append(_run("gradcheck", f"loss:{name}",
                            lambda b=builder, n=names: _gradcheck(b, loss_store, names=n)))

    def full_objective() -> Tuple[bool, str]:
        config = TrainConfig(architecture=ModelArchitecture.toy(), batch_size=4, seed=seed)
        trainer = RefCompTrainer(config, _toy_network(seed, adversarial=False))
        batch = _toy_batch(config.architecture, np.random.default_rng([seed, 3]))

        def builder(store: ParamStore) -> Node:
            parts, _ = trainer.forward_losses(batch, 0)
            return total_loss(parts, config.weights)

        return _gradcheck(builder, trainer.store, max_entries=4, seed=seed)

    results.append(_run("gradcheck", "objective:total_loss", full_objective))

    def negative_control() -> Tuple[bool, str]:
        control = _store(rng, w=(5,))
        report = grad_check(lambda s: ad.sum_reduce(corrupted_square(s["w"])), control, tolerance=GRAD_TOLERANCE)
        return not report.passed, f"错误 VJP 的最大相对误差 {report.max_error:.2e}（应当失败）"

    results.append(_run("gradcheck", "negative-control", negative_control))
    return results


# ---------------------------------------------------------------- 暴力对照

def brute_sq_dist(p, q) -> float:
    return (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2])


def brute_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    la, lb = a.tolist(), b.tolist()
    ab = sum(min(brute_sq_dist(p, q) for q in lb) for p in la) / len(la)
    ba = sum(min(brute_sq_dist(q, p) for p in la) for q in lb) / len(lb)
    return ab + ba


def brute_ucd(partial: np.ndarray, completed: np.ndarray) -> float:
    lc = completed.tolist()
    return sum(min(brute_sq_dist(p, q) for q in lc) for p in partial.tolist()) / len(partial)


def brute_f1(pred: np.ndarray, gt: np.ndarray, epsilon: float) -> float:
    lp, lg = pred.tolist(), gt.tolist()
    acc = sum(min(math.sqrt(brute_sq_dist(p, q)) for q in lg) < epsilon for p in lp) / len(lp)
    comp = sum(min(math.sqrt(brute_sq_dist(q, p)) for p in lp) < epsilon for q in lg) / len(lg)
    return 0.0 if acc + comp == 0 else 2 * acc * comp / (acc + comp)


def brute_knn(queries: np.ndarray, target: np.ndarray, k: int) -> np.ndarray:
    lt = target.tolist()
    rows = []
    for q in queries.tolist():
        ranked = sorted(range(len(lt)), key=lambda j: (brute_sq_dist(q, lt[j]), j))
        rows.append(ranked[:k])
    return np.asarray(rows, dtype=np.int64)


def brute_wasserstein(fake: np.ndarray, real: np.ndarray) -> float:
    diff = fake[:, None, :] - real[None, :, :]
    cost = np.sqrt((diff * diff).sum(-1))
    rows = np.arange(fake.shape[0])
    return min(float(cost[rows, list(perm)].mean()) for perm in itertools.permutations(range(fake.shape[0])))


def _close(a: float, b: float, rel: float = 1e-12) -> bool:
    return abs(a - b) <= rel * max(1.0, abs(a), abs(b))


def oracle_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results: List[CheckResult] = []

    def hand_examples() -> Tuple[bool, str]:
        a, b = np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])
        partial = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        ok = chamfer(a, b) == 2.0 and ucd(partial, a) == 2.0 and ucd(a, partial) == 0.0
        pred = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        score, _, _ = f1(pred, np.zeros((1, 3)), 0.03)
        ok = ok and abs(score - 2.0 / 3.0) < 1e-15
        return ok, f"CD=2.0, UCD=2.0, F1=2/3: {'一致' if ok else '不一致'}"

    def metric_oracles() -> Tuple[bool, str]:
        worst = 0.0
        for _ in range(200):
            n, m = (int(v) for v in rng.integers(1, 129, size=2))
            a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
            pairs = [(chamfer(a, b), brute_chamfer(a, b)), (ucd(a, b), brute_ucd(a, b))]
            for got, want in pairs:
                worst = max(worst, abs(got - want) / max(1.0, abs(want)))
            if f1(a, b, 0.5)[0] != brute_f1(a, b, 0.5):
                return False, "F1 与双重循环结果不一致"
        return worst <= 1e-12, f"最大相对偏差 {worst:.1e}"

    def knn_oracle() -> Tuple[bool, str]:
        for trial in range(200):
            n = int(rng.integers(1, 257))
            k = int(rng.integers(1, min(16, n) + 1))
            target = np.round(rng.normal(size=(n, 3)), 1)
            queries = np.round(rng.normal(size=(int(rng.integers(1, 10)), 3)), 1)
            if not np.array_equal(knn_indices(queries, target, k), brute_knn(queries, target, k)):
                return False, f"第 {trial} 组 KNN 与穷举排序不一致"
        return True, "200 组全部一致（含并列）"

    def transport_oracle() -> Tuple[bool, str]:
        for trial in range(50):
            batch = int(rng.integers(1, 7))
            fake, real = rng.normal(size=(batch, 4)), rng.normal(size=(batch, 4))
            if assignment_cost(fake, real)[0] != brute_wasserstein(fake, real):
                return False, f"第 {trial} 组最优匹配与全排列枚举不一致"
        return True, "50 组与全排列枚举完全相等"

    def transport_metric() -> Tuple[bool, str]:
        for _ in range(100):
            x, y, z = (rng.normal(size=(6, 4)) for _ in range(3))
            xy, yx = assignment_cost(x, y)[0], assignment_cost(y, x)[0]
            xz, yz = assignment_cost(x, z)[0], assignment_cost(y, z)[0]
            if assignment_cost(x, x)[0] != 0.0 or abs(xy - yx) > 1e-9 or xz > xy + yz + 1e-9:
                return False, "不满足 W(X,X)=0、对称性或三角不等式"
        return True, "100 组三元组满足度量性质"

    def retrieval_oracle() -> Tuple[bool, str]:
        classes = ("box", "cylinder", "torus", "plane-slab")
        corpus = [generate_shape(random_spec(classes[i % 4], 64, seed * 100 + i), source_id=f"shape_{i:02d}")
                  for i in range(20)]
        target = crop_partial(generate_shape(random_spec("box", 64, seed * 100 + 99), source_id="target"), 16, seed)
        got = build_reference_pairs(target, corpus, k=3, top_n=3, min_cd=0.0, class_scope="all-classes", seed=seed)
        scored = []
        for cloud in corpus:
            sel = np.unique(brute_knn(target.points, cloud.points, 3))
            rng_ref = np.random.default_rng(reference_seed(seed, cloud.source_id))
            partial = cloud.points[sel[random_indices(sel.shape[0], len(target), rng_ref)]]
            scored.append((brute_chamfer(target.points, partial), cloud.source_id))
        want = [sid for _, sid in sorted(scored)[:3]]
        have = [pair.source_id for pair in got]
        return have == want, f"检索 {have} / 穷举 {want}"

    for name, check in (("metrics:hand-examples", hand_examples), ("metrics:brute-force", metric_oracles),
                        ("knn:exhaustive-sort", knn_oracle), ("ot:permutations", transport_oracle),
                        ("ot:metric-axioms", transport_metric), ("retrieval:exhaustive-rank", retrieval_oracle)):
        results.append(_run("oracle", name, check))
    return results


# ---------------------------------------------------------------- 不变量

def invariants_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    net = _toy_network(seed)
    arch = net.arch
    results: List[CheckResult] = []

    def permutation_invariance() -> Tuple[bool, str]:
        partial = rng.normal(size=(1, arch.partial_size, 3))
        complete = rng.normal(size=(1, arch.complete_size, 3))
        perm_p, perm_c = rng.permutation(arch.partial_size), rng.permutation(arch.complete_size)
        diffs = [
            np.abs(net.encode_partial(partial).values - net.encode_partial(partial[:, perm_p]).values).max(),
            np.abs(net.encode_mask(partial).values - net.encode_mask(partial[:, perm_p]).values).max(),
            np.abs(net.encode_complete(complete).values - net.encode_complete(complete[:, perm_c]).values).max(),
            np.abs(net.discriminate_cloud(complete).values - net.discriminate_cloud(complete[:, perm_c]).values).max(),
        ]
        return max(diffs) <= 1e-9, f"最大偏差 {max(diffs):.1e}"

    def degradation_partition() -> Tuple[bool, str]:
        for trial in range(100):
            complete = PointCloud(points=rng.normal(size=(int(rng.integers(8, 40)), 3)))
            template = PointCloud(points=rng.normal(size=(int(rng.integers(1, 4)), 3)))
            k = int(rng.integers(1, 4))
            selected, _ = degrade_indices(template.points, complete.points, k, 1, np.random.default_rng(trial))
            if selected.size == len(complete):
                continue
            result = degrade(template, complete, k, selected.size, seed=trial)
            sel = set(result.selected_indices.tolist())
            complement = set(range(len(complete))) - sel
            mask = set(result.mask_indices.tolist())
            if set(result.partial_indices.tolist()) != sel or not mask <= complement:
                return False, f"第 {trial} 组退化结果不满足划分性质"
            if len(complement) <= selected.size and mask != complement:
                return False, f"第 {trial} 组掩码没有覆盖全部补集"
            if not np.array_equal(result.partial.points, complete.points[result.partial_indices]):
                return False, f"第 {trial} 组部分点不是完整点云中的点"
            wider = degrade_indices(template.points, complete.points, k + 1, 1, np.random.default_rng(trial))[0]
            if not sel <= set(wider.tolist()):
                return False, f"第 {trial} 组增大 k 后覆盖集合缩小"
        return True, "100 组满足划分与单调覆盖"

    def sharing_audit() -> Tuple[bool, str]:
        partial = rng.normal(size=(2, arch.partial_size, 3))
        z_m = net.encode_mask(partial)
        reference = reachable_parameters(net.decode(net.lsfm(net.encode_partial(partial, "reference"), z_m,
                                                             "reference"), "main", "reference"))
        target = reachable_parameters(net.decode(net.lsfm(net.encode_partial(partial, "target"), z_m, "target"),
                                                 "main", "target"))
        same_storage = all(net.store.get(n) is net.store.get(n) for n in reference)
        return reference == target and same_storage, f"两分支共触及 {len(reference)} 个参数"

    def no_share_doubling() -> Tuple[bool, str]:
        shared = RefCompNetwork(arch).initialize(seed)
        split = RefCompNetwork(arch, no_share=True).initialize(seed)
        trio = shared.shared_trio_count()
        doubled = split.shared_trio_count("reference") + split.shared_trio_count("target")
        partial = rng.normal(size=(1, arch.partial_size, 3))
        z_m = split.encode_mask(partial)
        touched_ref = reachable_parameters(split.complete(partial, z_m, "reference"))
        touched_tar = reachable_parameters(split.complete(partial, z_m, "target"))
        disjoint = not ({n for n in touched_ref if not n.startswith("encoder_m")}
                        & {n for n in touched_tar if not n.startswith("encoder_m")})
        return doubled == 2 * trio and disjoint, f"共享三件套 {trio} 个标量，no_share 下 {doubled} 个"

    def recombination() -> Tuple[bool, str]:
        ones = {name: ad.constant(1.0) for name in ("cd_ref", "cd_aux_ref", "cd_tar", "cd_aux_tar", "wasserstein")}
        value = total_loss(ones, LossWeights()).item()
        parts = LossBreakdown(**{name: 1.0 for name in ones})
        ok = abs(value - 2.001) <= 1e-12 and abs(parts.recombine(LossWeights(), False) - value) <= 1e-12
        return ok, f"总损失 {value!r}"

    def beta_zero() -> Tuple[bool, str]:
        config = TrainConfig(architecture=arch, batch_size=2, seed=seed, weights=LossWeights(beta=0.0))
        trainer = RefCompTrainer(config, _toy_network(seed, adversarial=False))
        batch = _toy_batch(arch, np.random.default_rng([seed, 5]), batch=2)
        names = trainer.network.generator_names()
        parts, _ = trainer.forward_losses(batch, 0)
        target_only = {name: parts[name] for name in ("cd_tar", "cd_aux_tar")}
        trainer.store.zero_grad(names)
        backward(total_loss(target_only, config.weights))
        leaked = [n for n in names if np.any(trainer.store.get(n).grad != 0.0)]
        return not leaked, "β=0 时目标分支对共享参数的梯度恰为 0" if not leaked else f"梯度泄漏到 {leaked[:3]}"

    for name, check in (("permutation-invariance", permutation_invariance),
                        ("degradation-partition", degradation_partition),
                        ("parameter-sharing", sharing_audit), ("no-share-doubling", no_share_doubling),
                        ("loss-recombination", recombination), ("beta-zero", beta_zero)):
        results.append(_run("invariants", name, check))
    return results


SUITES: Dict[str, Callable[[int], List[CheckResult]]] = {
    "gradcheck": gradcheck_suite,
    "oracle": oracle_suite,
    "invariants": invariants_suite,
}


def run_suites(names: Sequence[str], seed: int = 0) -> List[CheckResult]:
    results: List[CheckResult] = []
    for name in names:
        logger.info(f"运行自检套件: {name}")
        results.extend(SUITES[name](seed))
    return results
