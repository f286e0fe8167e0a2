"""End-to-end model: stem -> MGEI tokens -> hybrid encoder -> supervision heads."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import Config
from .encoder import HybridEncoder
from .head import HDSSHead, HeadOutputs, LossBundle
from .nn import Module
from .stem import MGEI, ConvStem
from .tensor import Tensor
from .text import TextEncoder, TextFeatureSet, Vocabulary, build_labels


class FERFormer(Module):
    def __init__(self, cfg: Config, class_names, seed: int | None = None):
        cfg.validate()
        with T.precision(cfg.precision):
            rng = np.random.default_rng(cfg.seed if seed is None else seed)
            self._cfg = cfg
            self._class_names = tuple(class_names)
            self._labels = build_labels(self._class_names, cfg.text_mode)
            dim = cfg.embed_dim
            self.stem = ConvStem(cfg.stem_channels, rng)
            self.mgei = MGEI(self.stem.out_channels, cfg.patch_sizes, dim, rng)
            self.encoder = HybridEncoder(self.mgei.num_tokens, dim, cfg.depth, cfg.heads, cfg.mlp_ratio, rng,
                                         drop=cfg.dropout)
            # built for every text mode so parameter layout is mode-independent
            self.text = TextEncoder(Vocabulary.for_classes(self._class_names), dim, rng, dim=cfg.text_dim,
                                    depth=cfg.text_depth, heads=cfg.text_heads, max_len=cfg.text_max_len)
            self.head = HDSSHead(dim, len(self._class_names), rng, cfg.normalize_steering, cfg.logit_scale)
        if cfg.freeze_text:
            self.text.freeze()
        self._text_cache: TextFeatureSet | None = None

    @property
    def cfg(self) -> Config:
        return self._cfg

    def set_epochs(self, epochs: int) -> None:
        # training length is the only setting that may change after construction
        self._cfg = self._cfg.replace(epochs=epochs)

    @property
    def class_names(self) -> tuple[str, ...]:
        return self._class_names

    @property
    def labels(self):
        return self._labels

    @property
    def num_classes(self) -> int:
        return len(self._class_names)

    @property
    def dtype(self):
        return self.head.proj.weight.data.dtype

    def text_features(self) -> TextFeatureSet | None:
        if not self._labels.enabled:
            return None
        if self._cfg.freeze_text:
            if self._text_cache is None:
                with T.no_grad():
                    self._text_cache = self.text(self._labels)
            return self._text_cache
        return self.text(self._labels)

    def features(self, images, rng=None) -> tuple[Tensor, Tensor]:
        """(I_C, I_S), each (B, D), for a (B, 3, H, W) batch."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images), dtype=self.dtype)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        tokens = self.mgei(self.stem(x))
        I_C, I_S, _ = self.encoder(tokens, rng=rng)
        return I_C, I_S

    def forward(self, images, rng=None) -> HeadOutputs:
        I_C, I_S = self.features(images, rng)
        tf = self.text_features()
        return self.head(I_C, I_S, None if tf is None else tf.T)

    def loss(self, images, y, rng=None) -> tuple[HeadOutputs, LossBundle]:
        out = self.forward(images, rng)
        return out, self.head.loss(out, y)
