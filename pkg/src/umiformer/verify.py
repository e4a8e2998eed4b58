"""Release-gate suites: finite-difference gradients, brute-force oracles and
architectural invariants.

Each suite returns a list of :class:`Check` rows; :func:`run_suites` bundles
them into a JSON-serializable summary.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.gradcheck import check_gradients
from .autodiff.nn import MultiHeadAttention
from .autodiff.tensor import Tensor, precision
from .encoder import IVDB, Encoder, EncoderConfig
from .geometry import dpc_knn_cluster, dpc_oracle, inter_view_knn, knn_oracle
from .metrics import dice_loss, dice_oracle, dice_value, f_score, f_score_oracle, iou, iou_oracle

SUITES = ("gradcheck", "oracles", "invariants")
OP_TOLERANCE = 1e-4
COMPOSED_TOLERANCE = 1e-3


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


# ---------------------------------------------------------------- gradcheck


def _param(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ops.reduce_sum(ops.mul(out, Tensor(w)))


OpCase = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _unary(name: str, low=-1.0, high=1.0, **attrs) -> OpCase:
    def build(rng):
        a = _param(rng, 3, 4, low=low, high=high)
        fn = getattr(ops, name)
        w = rng.normal(size=fn(a, **attrs).shape)
        return (lambda: _weighted(getattr(ops, name)(a, **attrs), w)), [a]

    return build


def _binary(name: str, positive_b: bool = False) -> OpCase:
    def build(rng):
        a = _param(rng, 3, 4)
        b = _param(rng, 3, 4, low=0.5 if positive_b else -1.0, high=2.0 if positive_b else 1.0)
        w = rng.normal(size=(3, 4))
        return (lambda: _weighted(getattr(ops, name)(a, b), w)), [a, b]

    return build


def _case_scalar_mul(rng):
    a = _param(rng, 2, 5)
    c = float(rng.normal())
    w = rng.normal(size=(2, 5))
    return (lambda: _weighted(ops.scalar_mul(a, c), w)), [a]


def _case_reduce(name: str, axis) -> OpCase:
    def build(rng):
        # distinct entries keep reduce_max differentiable at the probe points
        a = Tensor(rng.permutation(24).reshape(2, 3, 4) * 0.1 + rng.uniform(0, 0.01, (2, 3, 4)), requires_grad=True)
        w = rng.normal(size=getattr(ops, name)(a, axis).shape)
        return (lambda: _weighted(getattr(ops, name)(a, axis), w)), [a]

    return build


def _case_reshape(rng):
    a = _param(rng, 2, 6)
    w = rng.normal(size=(3, 4))
    return (lambda: _weighted(ops.reshape(a, (3, 4)), w)), [a]


def _case_transpose(rng):
    a = _param(rng, 2, 3, 4)
    w = rng.normal(size=(4, 2, 3))
    return (lambda: _weighted(ops.transpose(a, (2, 0, 1)), w)), [a]


def _case_concat(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 2)
    w = rng.normal(size=(2, 5))
    return (lambda: _weighted(ops.concat([a, b], axis=1), w)), [a, b]


def _case_gather(rng):
    a = _param(rng, 5, 3)
    idx = np.array([[4, 0], [0, 2], [4, 4]])
    w = rng.normal(size=(3, 2, 3))
    return (lambda: _weighted(ops.gather(a, idx, axis=0), w)), [a]


def _case_broadcast(rng):
    a = _param(rng, 1, 3, 1)
    w = rng.normal(size=(2, 3, 4))
    return (lambda: _weighted(ops.broadcast(a, (2, 3, 4)), w)), [a]


def _case_upsample(rng):
    a = _param(rng, 1, 2, 2, 2, 3)
    w = rng.normal(size=(1, 4, 4, 4, 3))
    return (lambda: _weighted(ops.nearest_upsample_3d(a, 2), w)), [a]


def _case_conv(rng):
    a, k = _param(rng, 1, 2, 2, 2, 3), _param(rng, 3, 4)
    w = rng.normal(size=(1, 2, 2, 2, 4))
    return (lambda: _weighted(ops.conv3d_pointwise(a, k), w)), [a, k]


def _case_matmul(rng):
    a, b = _param(rng, 2, 3, 4), _param(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    return (lambda: _weighted(ops.matmul(a, b), w)), [a, b]


def _case_batched_matmul(rng):
    a, b = _param(rng, 2, 3, 4), _param(rng, 2, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    return (lambda: _weighted(ops.matmul(a, b), w)), [a, b]


OP_CASES: dict[str, OpCase] = {
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "div": _binary("div", positive_b=True),
    "scalar_mul": _case_scalar_mul,
    "exp": _unary("exp"),
    "log": _unary("log", low=0.2, high=3.0),
    "tanh": _unary("tanh", low=-2.0, high=2.0),
    "gelu": _unary("gelu", low=-3.0, high=3.0),
    "softmax": _unary("softmax", low=-2.0, high=2.0, axis=-1),
    "layernorm": _unary("layernorm", axis=-1),
    "reduce_sum": _case_reduce("reduce_sum", (0, 2)),
    "reduce_mean": _case_reduce("reduce_mean", 1),
    "reduce_max": _case_reduce("reduce_max", 1),
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "concat": _case_concat,
    "gather": _case_gather,
    "broadcast": _case_broadcast,
    "nearest_upsample_3d": _case_upsample,
    "conv3d_pointwise": _case_conv,
    "matmul": _case_matmul,
    "matmul_batched": _case_batched_matmul,
}


def composed_config():
    """Small encoder+decoder used for the end-to-end gradient check."""
    from .config import RunConfig

    return RunConfig(
        dim=16, heads=2, depth=2, ivdb_period=1, g=8, k=2, k_dpc=3,
        query_count=8, decoder_depth=1, voxel_size=8, upsample_stages=2, decoder_channels=(8, 4),
    )


def composed_case(seed: int, coords_per_tensor: int = 2):
    """(loss_fn, tensors, probe rng) for the full pipeline with Dice loss."""
    from .train import build_model

    rng = np.random.default_rng(seed)
    cfg = composed_config().replace(seed=seed)
    model = build_model(cfg, np.float64)
    # zero-initialized heads would make most upstream gradients exactly 0
    for _, p in model.named_parameters():
        if not p.data.any():
            p.data[...] = rng.normal(scale=0.3, size=p.shape)
    images = rng.random((2, 3, cfg.image_size, cfg.image_size, 1))
    gt = (rng.random((2, cfg.voxel_size, cfg.voxel_size, cfg.voxel_size)) > 0.5).astype(np.float64)

    def loss():
        return ops.reduce_mean(dice_loss(model(images), gt))

    return loss, model.parameters(), coords_per_tensor


def gradcheck_suite(seeds: Sequence[int] = range(20), composed_seeds: Optional[Sequence[int]] = None) -> list[Check]:
    composed_seeds = seeds if composed_seeds is None else composed_seeds
    rows = []
    with precision(np.float64):
        for name, build in OP_CASES.items():
            worst = 0.0
            for seed in seeds:
                rng = np.random.default_rng(seed)
                fn, tensors = build(rng)
                worst = max(worst, check_gradients(fn, tensors))
            rows.append(Check("gradcheck", f"op:{name}", worst < OP_TOLERANCE, worst, OP_TOLERANCE, f"{len(seeds)} seeds"))
        worst = 0.0
        for seed in composed_seeds:
            fn, tensors, m = composed_case(seed)
            worst = max(worst, check_gradients(fn, tensors, max_coords=m, rng=np.random.default_rng(seed)))
        rows.append(
            Check("gradcheck", "composed:encoder+decoder+dice", worst < COMPOSED_TOLERANCE, worst, COMPOSED_TOLERANCE,
                  f"{len(composed_seeds)} seeds")
        )
    return rows


@contextlib.contextmanager
def flipped_backward(op_name: str) -> Iterator[None]:
    """Temporarily negate the gradient an op passes to its first input.

    This is the deliberate mutant the gradient suite must catch.
    """
    original = getattr(ops, op_name)

    def mutant(*args, **kwargs):
        out = original(*args, **kwargs)
        if out._backward is not None:
            inner = out._backward

            def backward(g):
                grads = list(inner(g))
                if grads[0] is not None:
                    grads[0] = -grads[0]
                return tuple(grads)

            out._backward = backward
        return out

    setattr(ops, op_name, mutant)
    ops.OPS[op_name] = mutant
    try:
        yield
    finally:
        setattr(ops, op_name, original)
        ops.OPS[op_name] = original


# ------------------------------------------------------------------ oracles


def _random_tokens(rng, n, t, d):
    if rng.random() < 0.3:
        # small integer grid: plenty of exact distance ties
        return rng.integers(0, 3, size=(n, t, d)).astype(np.float64)
    return rng.normal(size=(n, t, d))


def _same_neighbors(a, b) -> bool:
    return (
        np.array_equal(a.views, b.views)
        and np.array_equal(a.tokens, b.tokens)
        and np.allclose(a.sqdist, b.sqdist, rtol=1e-12, atol=1e-12)
    )


def _same_clusters(a, b) -> bool:
    return np.array_equal(a.assignment, b.assignment) and np.array_equal(a.centers, b.centers)


def oracle_suite(instances: int = 500, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    rows = []
    start, bad = time.perf_counter(), 0
    for _ in range(instances):
        n, t, d = int(rng.integers(2, 5)), int(rng.integers(1, 33)), int(rng.integers(1, 17))
        k = int(rng.integers(1, t + 1))
        x = _random_tokens(rng, n, t, d)
        bad += not _same_neighbors(inter_view_knn(x, k), knn_oracle(x, k))
    rows.append(Check("oracles", "inter_view_knn", bad == 0, bad, 0, f"{instances} instances, {time.perf_counter() - start:.1f}s"))
    start, bad = time.perf_counter(), 0
    for _ in range(instances):
        n, t, d = int(rng.integers(1, 5)), int(rng.integers(1, 33)), int(rng.integers(1, 17))
        x = _random_tokens(rng, n, t, d).reshape(n * t, d)
        total = n * t
        g = int(rng.integers(1, total + 1))
        k_dpc = int(rng.integers(1, total)) if total > 1 else 0
        bad += not _same_clusters(dpc_knn_cluster(x, k_dpc, g), dpc_oracle(x, k_dpc, g))
    rows.append(Check("oracles", "dpc_knn_cluster", bad == 0, bad, 0, f"{instances} instances, {time.perf_counter() - start:.1f}s"))
    worst_dice = worst_iou = 0.0
    for _ in range(100):
        p = rng.random((4, 4, 4))
        gt = (rng.random((4, 4, 4)) > 0.5).astype(np.float64)
        worst_dice = max(worst_dice, abs(dice_value(p, gt) - dice_oracle(p, gt)))
        worst_iou = max(worst_iou, abs(iou(p, gt) - iou_oracle(p, gt)))
    rows.append(Check("oracles", "dice_loss", worst_dice <= 1e-12, worst_dice, 1e-12, "100 random 4^3 grids"))
    rows.append(Check("oracles", "iou", worst_iou == 0.0, worst_iou, 0.0, "100 random 4^3 grids"))
    worst_f = 0.0
    for _ in range(100):
        r = rng.random((int(rng.integers(1, 65)), 3)) * 0.1
        g = rng.random((int(rng.integers(1, 65)), 3)) * 0.1
        worst_f = max(worst_f, abs(f_score(r, g) - f_score_oracle(r, g)))
    rows.append(Check("oracles", "f_score", worst_f == 0.0, worst_f, 0.0, "100 random clouds of <= 64 points"))
    return rows


# --------------------------------------------------------------- invariants


def _encoder(rng_seed: int, **overrides) -> Encoder:
    cfg = EncoderConfig(**overrides)
    return Encoder(cfg, np.random.default_rng(rng_seed))


def _tie_free_images(rng, n, cfg: EncoderConfig) -> np.ndarray:
    return rng.random((1, n, cfg.image_size, cfg.image_size, cfg.channels))


def invariant_suite(seed: int = 0, permutations: int = 20) -> list[Check]:
    rows = []
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        enc = _encoder(seed)
        cfg = enc.cfg
        bad = []
        for n in range(1, 9):
            out = enc(_tie_free_images(rng, n, cfg))
            if out.shape != (1, cfg.g, cfg.dim):
                bad.append(f"n={n}: {out.shape}")
        rows.append(Check("invariants", "encoder_output_shape", not bad, len(bad), 0, "; ".join(bad) or "n=1..8"))

        # random (non-identity) rectification and importance weights so that
        # neighbour gathering and weighted merging actually shape the output
        for module in enc.ivdbs + [enc.merger.fusion]:
            for p in module.parameters():
                p.data[...] = rng.normal(scale=0.3, size=p.shape)
        images = _tie_free_images(rng, 4, cfg)
        ref = enc(images).data
        worst = 0.0
        for _ in range(permutations):
            perm = rng.permutation(4)
            worst = max(worst, float(np.abs(enc(images[:, perm]).data - ref).max()))
        rows.append(Check("invariants", "view_permutation", worst <= 1e-6, worst, 1e-6, f"{permutations} permutations"))

        ivdb = IVDB(cfg, np.random.default_rng(seed))
        x = Tensor(rng.normal(size=(2, 3, cfg.tokens_per_view, cfg.dim)))
        diff = float(np.abs(ivdb(x).data - x.data).max())
        rows.append(Check("invariants", "ivdb_identity_at_init", diff == 0.0, diff, 0.0, "zero-initialized offset head"))

        ivdb = IVDB(cfg, np.random.default_rng(seed + 1))
        for layer in ivdb.head.parameters():
            layer.data[...] = np.random.default_rng(seed + 2).normal(scale=3.0, size=layer.shape)
        tokens = Tensor(rng.normal(size=(1, 2, 500, cfg.dim)))
        r = ivdb.related(tokens, ivdb.neighbor_indices(tokens.data)[0])
        o = ivdb.offset(tokens, r).data
        excess = float((np.abs(o) - np.abs(tokens.data)).max())
        rows.append(Check("invariants", "offset_weight_bound", excess <= 0.0, excess, 0.0, "1000 random tokens"))

        attn = MultiHeadAttention(cfg.dim, cfg.heads, np.random.default_rng(seed))
        q = Tensor(rng.normal(size=(2, 5, cfg.dim)))
        kv = Tensor(rng.normal(size=(2, 7, cfg.dim)))
        zero = Tensor(np.zeros((2, cfg.heads, 5, 7)))
        gap = float(np.abs(attn(q, kv, bias=zero).data - attn(q, kv).data).max())
        rows.append(Check("invariants", "zero_bias_attention", gap <= 1e-9, gap, 1e-9, "W = 0"))

        gt = (rng.random((2, 6, 6, 6)) > 0.5).astype(np.float64)
        same = dice_loss(Tensor(gt), gt).data
        flipped = dice_loss(Tensor(1.0 - gt), gt).data
        ok = bool(np.all(same == 0.0) and np.all(flipped == 1.0))
        rows.append(Check("invariants", "dice_analytic", ok, float(np.abs(same).max() + np.abs(flipped - 1).max()), 0.0,
                          "p == gt gives 0, p == 1 - gt gives 1"))
        one = iou(gt[0], gt[0])
        rows.append(Check("invariants", "iou_identical", one == 1.0, one, 1.0))
        cloud = rng.random((64, 3))
        fs = f_score(cloud, cloud)
        rows.append(Check("invariants", "f_score_identical", fs == 1.0, fs, 1.0))
    return rows


SUITE_FUNCS = {"gradcheck": gradcheck_suite, "oracles": oracle_suite, "invariants": invariant_suite}


def run_suites(names: Sequence[str]) -> dict:
    checks = []
    timings = {}
    for name in names:
        start = time.perf_counter()
        checks.extend(SUITE_FUNCS[name]())
        timings[name] = round(time.perf_counter() - start, 3)
    return {
        "passed": all(c.passed for c in checks),
        "suites": list(names),
        "seconds": timings,
        "checks": [asdict(c) for c in checks],
    }
