"""Image-label and image-text supervision heads, joint loss and prediction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Linear, Module
from .tensor import Tensor


@dataclass
class HeadOutputs:
    I_S: Tensor
    I_C: Tensor
    S_il: Tensor
    S_it: Tensor | None = None

    @property
    def P_il(self) -> np.ndarray:
        return _probs(self.S_il.data)

    @property
    def P_it(self) -> np.ndarray | None:
        return None if self.S_it is None else _probs(self.S_it.data)


@dataclass
class LossBundle:
    L: Tensor
    L_image: Tensor
    L_text: Tensor | None
    y: np.ndarray

    def values(self) -> dict[str, float]:
        return {
            "L": self.L.item(),
            "L_text": self.L_text.item() if self.L_text is not None else 0.0,
            "L_image": self.L_image.item(),
        }


def _probs(s: np.ndarray) -> np.ndarray:
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _rows(x: Tensor) -> Tensor:
    return T.reshape(x, (1, x.shape[-1])) if x.ndim == 1 else x


def similarity(I_S: Tensor, text_features: Tensor, normalize: bool = True, logit_scale: float = 1.0) -> Tensor:
    """S_it = scale * normalize(I_S) @ T^T, shape (B, M)."""
    s = _rows(I_S)
    if normalize:
        s = T.l2_normalize(s)
    S = T.matmul(s, T.swap_last(text_features))
    return S if logit_scale == 1.0 else S * logit_scale


def text_similarity_loss(I_S: Tensor, text_features, y, normalize: bool = True, logit_scale: float = 1.0):
    tf = getattr(text_features, "T", text_features)
    S_it = similarity(I_S, tf, normalize, logit_scale)
    return S_it, T.cross_entropy_from_logits(S_it, np.atleast_1d(y))


def image_label_loss(I_C: Tensor, projection: Linear, y):
    S_il = projection(_rows(I_C))
    return S_il, T.cross_entropy_from_logits(S_il, np.atleast_1d(y))


def joint_loss(L_image: Tensor, L_text: Tensor | None, y) -> LossBundle:
    L = L_image if L_text is None else T.add(L_text, L_image)
    return LossBundle(L, L_image, L_text, np.atleast_1d(np.asarray(y)))


def predict(outputs: HeadOutputs, head_mode: str = "image") -> np.ndarray:
    """Class index per row; ties resolve to the lowest index."""
    if head_mode == "image":
        scores = outputs.S_il.data
    elif head_mode in ("text", "fused"):
        if outputs.S_it is None:
            raise ConfigError(f"head {head_mode!r} needs text supervision, which is disabled")
        scores = outputs.S_it.data if head_mode == "text" else (outputs.P_il + outputs.P_it) / 2.0
    else:
        raise ConfigError(f"unknown head mode {head_mode!r}")
    return np.argmax(np.atleast_2d(scores), axis=-1)


class HDSSHead(Module):
    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator,
                 normalize_steering: bool = True, logit_scale: float = 1.0):
        self.proj = Linear(dim, num_classes, rng)
        # zero-initialised classifier: uniform logits at the start of training
        self.proj.weight.data[...] = 0.0
        self._normalize = normalize_steering
        self._scale = float(logit_scale)

    def forward(self, I_C: Tensor, I_S: Tensor, text_features: Tensor | None) -> HeadOutputs:
        S_il = self.proj(_rows(I_C))
        S_it = None
        if text_features is not None:
            S_it = similarity(I_S, text_features, self._normalize, self._scale)
        return HeadOutputs(I_S=_rows(I_S), I_C=_rows(I_C), S_il=S_il, S_it=S_it)

    def loss(self, out: HeadOutputs, y) -> LossBundle:
        y = np.atleast_1d(np.asarray(y))
        L_image = T.cross_entropy_from_logits(out.S_il, y)
        L_text = None if out.S_it is None else T.cross_entropy_from_logits(out.S_it, y)
        return joint_loss(L_image, L_text, y)
