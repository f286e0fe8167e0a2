"""Gradient verification suite shared by the CLI and the acceptance tests."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import Config
from .gradcheck import GradCheckReport, grad_check
from .model import FERFormer
from .tensor import Tensor

PRIMITIVE_TOL = 1e-5
END_TO_END_TOL = 1e-3
TINY = dict(embed_dim=16, depth=2, heads=2, patch_sizes=(6, 12), stem_channels=(4, 8, 8), text_dim=16,
            text_heads=2, mlp_ratio=2, logit_scale=1.0, precision="f64")
TINY_CLASSES = ("happy", "sad", "angry")


def _weights(shape, rng):
    return rng.standard_normal(shape)


def primitive_checks(rng: np.random.Generator) -> list[tuple[str, callable, list[Tensor]]]:
    """(name, f, inputs) triples; f maps the inputs to a scalar tensor."""
    t = lambda *shape: Tensor(_weights(shape, rng))
    probe = lambda shape: Tensor(_weights(shape, rng))  # fixed random projection for scalarising outputs

    def scal(out_fn, shape):
        w = probe(shape)
        return lambda *xs: T.tsum(T.mul(out_fn(*xs), w))

    ids = rng.integers(0, 5, size=(2, 3))
    mean_probe = probe((2, 4))
    targets = np.array([0, 2, 1])
    mh_rng = np.random.default_rng(int(rng.integers(1 << 31)))

    from .encoder import MultiHeadAttention

    with T.precision("f64"):
        mhsa = MultiHeadAttention(4, 2, mh_rng)

    checks = [
        ("matmul", scal(T.matmul, (3, 2)), [t(3, 4), t(4, 2)]),
        ("matmul_batched", scal(T.matmul, (2, 3, 2)), [t(2, 3, 4), t(2, 4, 2)]),
        ("add_trailing", scal(T.add, (2, 3, 4)), [t(2, 3, 4), t(4)]),
        ("mul", scal(T.mul, (3, 4)), [t(3, 4), t(3, 4)]),
        ("sum_mean", lambda x: T.tsum(T.mul(T.mean(x, axis=1), mean_probe)) + T.tsum(x), [t(2, 3, 4)]),
        ("reshape_permute", scal(lambda x: T.permute(T.reshape(x, (2, 6)), (1, 0)), (6, 2)), [t(3, 4)]),
        ("getitem_concat", scal(lambda a, b: T.concat([a[:, 1:], b], axis=1), (2, 5)), [t(2, 3), t(2, 3)]),
        ("expand", scal(lambda x: T.expand(x, (3,)), (3, 2, 4)), [t(2, 4)]),
        ("gelu", scal(T.gelu, (3, 5)), [t(3, 5)]),
        ("softmax", scal(lambda x: T.softmax(x, -1), (3, 5)), [t(3, 5)]),
        ("log_softmax", scal(lambda x: T.log_softmax(x, -1), (3, 5)), [t(3, 5)]),
        ("softmax_cross_entropy", lambda x: T.cross_entropy_from_logits(x, targets), [t(3, 4)]),
        ("layer_norm", scal(T.layer_norm, (3, 6)), [t(3, 6), t(6), t(6)]),
        ("l2_normalize", scal(T.l2_normalize, (3, 4)), [t(3, 4)]),
        ("adaptive_avg_pool2d", scal(lambda x: T.adaptive_avg_pool2d(x, 12, 12), (2, 12, 12)), [t(2, 14, 14)]),
        ("conv2d", scal(lambda x, w, b: T.conv2d(x, w, b, stride=2, pad=1), (2, 3, 4, 4)),
         [t(2, 2, 7, 8), t(3, 2, 3, 3), t(3)]),
        ("embedding", scal(lambda w: T.embedding(w, ids), (2, 3, 4)), [t(5, 4)]),
        ("attention", scal(lambda z: mhsa(z), (5, 4)), [t(5, 4)]),
    ]
    return checks


def tiny_model(seed: int = 0, precision: str = "f64") -> tuple[FERFormer, np.ndarray, np.ndarray]:
    cfg = Config(seed=seed, **{**TINY, "precision": precision})
    model = FERFormer(cfg, TINY_CLASSES)
    rng = np.random.default_rng(seed + 1)
    # classifier is zero-initialised; give it random weights so every path carries gradient
    model.head.proj.weight.data = rng.standard_normal(model.head.proj.weight.shape) * 0.3
    images = rng.random((2, 3, 112, 112))
    labels = np.array([0, 2])
    return model, images, labels


def end_to_end_check(seed: int = 0, max_coords: int = 4, eps: float = 1e-5,
                     tol: float = END_TO_END_TOL, precision: str = "f64") -> GradCheckReport:
    """Joint loss of the tiny model vs central differences over sampled coordinates of every parameter."""
    with T.precision(precision):
        model, images, labels = tiny_model(seed, precision)
        params = model.parameters()

        def f(*_):
            return model.loss(images, labels)[1].L

        return grad_check(f, params, eps=eps, tol=tol, max_coords=max_coords, seed=seed)


def gradient_suite(precision: str = "f64", seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    rows = []
    with T.precision(precision):
        rng = np.random.default_rng(seed)
        for name, f, xs in primitive_checks(rng):
            rows.append((name, grad_check(f, xs, eps=1e-6, tol=PRIMITIVE_TOL)))
    rows.append(("end_to_end_joint_loss", end_to_end_check(seed, precision=precision)))
    return rows


# desk-scale budgets shared by the acceptance tests and scripts/
OVERFIT = Config(embed_dim=32, depth=2, heads=2, lr0=0.01, logit_scale=10.0, epochs=200, augment=False, seed=7,
                 num_classes=7, per_class=8, noise_level=0.1, ambiguity_rate=0.0)
ABLATION = Config(embed_dim=32, depth=2, heads=2, lr0=0.01, epochs=30, augment=False, num_classes=7, per_class=8,
                  test_per_class=10, noise_level=0.3, ambiguity_rate=0.3)
ABLATION_SEEDS = (0, 1, 2)
