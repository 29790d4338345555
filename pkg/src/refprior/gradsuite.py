"""Randomised finite-difference checks for every differentiable operation.

Each case builder takes a numpy Generator and returns ``(objective, params)``
where ``objective()`` is a scalar Tensor built from ``params``. Objectives
contract the operation's output with a fixed random weight tensor so every
output element contributes a gradient of order one. Checks run in float64.
"""

import time
from dataclasses import dataclass

import numpy as np

from .autograd import functional as F
from .autograd import tensor as T
from .autograd.gradcheck import finite_difference_check
from .autograd.tensor import Tensor, default_dtype
from .prrn import PRRN, PrrnConfig, ResBlock, fwa, prrn_forward, prrn_loss
from .rng import stream
from .rpen import RPEN, RpenConfig, rpen_forward, rpen_loss

TOLERANCE = 1e-4
EPS = 1e-5
# Central differences at eps=1e-5 carry roundoff near 1e-11 * |f|. Some gradients are
# exactly zero by construction (attention key biases: softmax ignores a per-row shift),
# so the denominator floor must sit well above that noise for the ratio to mean anything.
FLOOR = 1e-5


def _leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def _unary(op, low=-1.0, high=1.0):
    def build(rng):
        x = _leaf(rng, 3, 4, low=low, high=high)
        w = rng.normal(size=(3, 4))
        return lambda: (op(x) * Tensor(w)).sum(), {"x": x}

    return build


def _binary(op, b_low=-1.0, b_high=1.0):
    def build(rng):
        a = _leaf(rng, 3, 4)
        b = _leaf(rng, 4, low=b_low, high=b_high)  # broadcast along the first axis
        w = rng.normal(size=(3, 4))
        return lambda: (op(a, b) * Tensor(w)).sum(), {"a": a, "b": b}

    return build


def _away_from(rng, shape, points, gap=1e-2, low=-1.0, high=1.0):
    """Uniform samples pushed at least ``gap`` away from the given kinks."""
    x = rng.uniform(low, high, shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.where(x[near] >= p, gap, -gap) * 2
    return Tensor(x, requires_grad=True)


def _fixed_probe(build_out, rng, params):
    out_shape = build_out().shape
    w = Tensor(rng.normal(size=out_shape))
    return lambda: (build_out() * w).sum(), params


def _case_abs(rng):
    x = _away_from(rng, (3, 4), [0.0])
    return _fixed_probe(lambda: T.tabs(x), rng, {"x": x})


def _case_relu(rng):
    x = _away_from(rng, (3, 4), [0.0])
    return _fixed_probe(lambda: T.relu(x), rng, {"x": x})


def _case_clip(rng):
    x = _away_from(rng, (3, 4), [-0.5, 0.5])
    return _fixed_probe(lambda: T.clip(x, -0.5, 0.5), rng, {"x": x})


def _case_sum(rng):
    x = _leaf(rng, 2, 3, 4)
    keep = bool(rng.integers(2))
    return _fixed_probe(lambda: T.tsum(x, axis=(0, 2), keepdims=keep), rng, {"x": x})


def _case_mean(rng):
    x = _leaf(rng, 2, 3, 4)
    axis = int(rng.integers(3))
    return _fixed_probe(lambda: T.mean(x, axis=axis), rng, {"x": x})


def _case_softmax(rng):
    x = _leaf(rng, 2, 5, low=-2, high=2)
    return _fixed_probe(lambda: T.softmax(x, axis=-1), rng, {"x": x})


def _case_reshape(rng):
    x = _leaf(rng, 2, 6)
    return _fixed_probe(lambda: T.reshape(x, (3, 4)), rng, {"x": x})


def _case_transpose(rng):
    x = _leaf(rng, 2, 3, 4)
    return _fixed_probe(lambda: T.transpose(x, (2, 0, 1)), rng, {"x": x})


def _case_getitem(rng):
    x = _leaf(rng, 4, 5)
    rows = rng.integers(0, 4, size=6)  # repeated indices exercise accumulation
    return _fixed_probe(lambda: x[1:3, ::2] * 2.0 + T.tsum(x[rows]), rng, {"x": x})


def _case_concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    return _fixed_probe(lambda: T.concat([a, b], axis=1), rng, {"a": a, "b": b})


def _case_matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 2)
    return _fixed_probe(lambda: T.matmul(a, b), rng, {"a": a, "b": b})


def _case_conv2d(rng):
    stride = int(rng.integers(1, 3))
    dilation = int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    padding = int(rng.integers(0, 2)) * dilation * (k // 2)
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = _leaf(rng, 2, c_in, 7, 6)
    w = _leaf(rng, c_out, c_in, k, k)
    b = _leaf(rng, c_out)
    return _fixed_probe(lambda: F.conv2d(x, w, b, stride, padding, dilation), rng, {"x": x, "w": w, "b": b})


def _case_linear(rng):
    x, w, b = _leaf(rng, 2, 3, 5), _leaf(rng, 4, 5), _leaf(rng, 4)
    return _fixed_probe(lambda: F.linear(x, w, b), rng, {"x": x, "w": w, "b": b})


def _case_group_norm(rng):
    groups = int(rng.choice([1, 2, 4]))
    x = _leaf(rng, 2, 4, 3, 3)
    gamma, beta = _leaf(rng, 4, low=0.5, high=1.5), _leaf(rng, 4)
    return _fixed_probe(lambda: F.group_norm(x, groups, gamma, beta), rng, {"x": x, "gamma": gamma, "beta": beta})


def _case_upsample(rng):
    x = _leaf(rng, 1, 2, 2, 3)
    fh, fw = (int(v) for v in rng.integers(1, 4, 2))
    return _fixed_probe(lambda: F.nearest_upsample(x, 2 * fh, 3 * fw), rng, {"x": x})


def _case_global_pool(rng):
    x = _leaf(rng, 2, 3, 4, 4)
    return _fixed_probe(lambda: F.global_avg_pool(x), rng, {"x": x})


def _case_attention(rng):
    heads = int(rng.choice([1, 2]))
    d = 4
    x = _leaf(rng, 2, int(rng.integers(1, 5)), d)
    wqkv, bqkv = _leaf(rng, 3 * d, d), _leaf(rng, 3 * d)
    wo, bo = _leaf(rng, d, d), _leaf(rng, d)
    params = {"x": x, "w_qkv": wqkv, "b_qkv": bqkv, "w_out": wo, "b_out": bo}
    return _fixed_probe(lambda: F.self_attention(x, heads, wqkv, bqkv, wo, bo), rng, params)


def _case_fwa(rng):
    p = int(rng.choice([1, 2, 4]))
    feat = _leaf(rng, 2, 3, 4, 4)
    prior = _leaf(rng, 2, p, p, 6)
    w, b = _leaf(rng, 3, 6), _leaf(rng, 3)
    return _fixed_probe(lambda: fwa(feat, prior, w, b), rng, {"feat": feat, "prior": prior, "w": w, "b": b})


def _tiny_prrn(rng):
    return PrrnConfig(
        image_size=8, base_channels=4, channel_multipliers=(1, 2), resblocks_per_scale=1,
        attention_heads=2, prior_grid=int(rng.choice([1, 2, 4])), prior_dim=4, norm_groups=2,
        fwa_scale=bool(rng.integers(2)),
    )


def _case_resblock(rng):
    cfg = _tiny_prrn(rng)
    block = ResBlock(rng, 2, 4, cfg)
    x = _leaf(rng, 2, 2, 4, 4)
    prior = _leaf(rng, 2, 2, 2, cfg.prior_dim)
    params = dict(block.named_parameters(), x=x, prior=prior)
    return _fixed_probe(lambda: block(x, prior), rng, params)


def _case_prrn_loss(rng):
    cfg = _tiny_prrn(rng)
    model = PRRN(cfg, rng)
    images = rng.uniform(0, 1, (2, 8, 8, 3))
    priors = rng.uniform(0, 1, (2, cfg.prior_grid, cfg.prior_grid))
    # keep every |output - target| well clear of the L1 kink
    out0 = prrn_forward(images, priors, model).data
    target = out0 + rng.choice([-1.0, 1.0], out0.shape) * rng.uniform(0.05, 0.3, out0.shape)
    params = dict(model.named_parameters())
    return lambda: prrn_loss(prrn_forward(images, priors, model), target), params


def _case_rpen_loss(rng):
    cfg = RpenConfig(
        image_size=12, stem_channels=4, stage_multipliers=(1, 2), stage_strides=(2, 1),
        feature_grid=6, aspp_dilations=(1, 2), aspp_channels=2, norm_groups=2, zero_init_heads=False,
    )
    model = RPEN(cfg, rng)
    images = rng.uniform(0, 1, (2, 12, 12, 3))
    # targets away from the clip bounds so the patch map stays in its smooth region
    tg = rng.uniform(0.2, 0.8, 2)
    tp = rng.uniform(0.2, 0.8, (2, 6, 6))
    params = dict(model.named_parameters())
    return lambda: rpen_loss(rpen_forward(images, model), tg, tp), params


CASES = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, 0.5, 2.0),
    "power": _unary(lambda x: T.power(x, 3.0)),
    "exp": _unary(T.exp),
    "log": _unary(T.log, 0.2, 2.0),
    "sqrt": _unary(T.sqrt, 0.2, 2.0),
    "tanh": _unary(T.tanh, -2, 2),
    "sigmoid": _unary(T.sigmoid, -3, 3),
    "silu": _unary(T.silu, -3, 3),
    "relu": _case_relu,
    "abs": _case_abs,
    "clip": _case_clip,
    "sum": _case_sum,
    "mean": _case_mean,
    "softmax": _case_softmax,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "getitem": _case_getitem,
    "concat": _case_concat,
    "matmul": _case_matmul,
    "conv2d": _case_conv2d,
    "linear": _case_linear,
    "group_norm": _case_group_norm,
    "nearest_upsample": _case_upsample,
    "global_avg_pool": _case_global_pool,
    "self_attention": _case_attention,
    "fwa": _case_fwa,
    "resblock": _case_resblock,
    "prrn_loss": _case_prrn_loss,
    "rpen_loss": _case_rpen_loss,
}

# Whole-network cases sample this many entries per parameter tensor.
SAMPLED = {"resblock": 6, "prrn_loss": 4, "rpen_loss": 4}


@dataclass
class GradResult:
    name: str
    trials: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def check_case(name, trials=20, seed=0, eps=EPS, floor=FLOOR):
    """Run ``trials`` randomised finite-difference checks of one case."""
    build = CASES[name]
    worst = 0.0
    start = time.perf_counter()
    with default_dtype(np.float64):
        for trial in range(trials):
            rng = stream(seed, "gradcheck", name, trial)
            objective, params = build(rng)
            err = finite_difference_check(
                objective, params, eps=eps, max_elements=SAMPLED.get(name), rng=rng, floor=floor
            )
            worst = max(worst, err)
    return GradResult(name, trials, worst, time.perf_counter() - start)


def run_suite(names=None, trials=20, seed=0, eps=EPS, floor=FLOOR):
    return [check_case(n, trials, seed, eps, floor) for n in (names or CASES)]
