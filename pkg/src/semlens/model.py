"""Full model: semantic extractor + channel compression + pixel enhancer."""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .enhancer import Enhancer, EnhancerConfig
from .numcore import Module, Rng, Tensor
from .semantics import SemanticBundle, SemanticExtractor, compress_semantics, oracle_bundle


def enhancer_config(cfg: RunConfig) -> EnhancerConfig:
    return EnhancerConfig(
        width=cfg["model.C"], blocks=cfg["model.blocks"], heads=cfg["model.heads"],
        win=cfg["model.win"], mlp_ratio=cfg["model.mlp_ratio"], radius=cfg["model.r"],
        isee_heads=cfg["model.isee_heads"], isee_scaling=cfg["model.isee_scaling"],
        image_scaling=cfg["model.image_scaling"], image_locality=cfg["model.image_locality"],
        space_every_block=cfg["model.space_every_block"],
        use_gps=cfg["model.use_gps"], use_isee=cfg["model.use_isee"], use_image=cfg["model.use_image"],
    )


class SemanticLens(Module):
    def __init__(self, cfg: RunConfig, seed: int | None = None):
        rng = Rng(cfg["train.seed"] if seed is None else seed)
        self.mode = cfg["train.extractor_mode"]
        self.n_tokens = cfg["model.N_v"]
        ecfg = enhancer_config(cfg)
        self.ecfg = ecfg
        # separate child streams keep init of one part independent of the others
        self.extractor = SemanticExtractor(rng.spawn(1), cfg["model.C_s"], cfg["model.N_f"],
                                           cfg["model.N_c"], cfg["model.w"], cfg["model.shift"])
        cs, c = cfg["model.C_s"], cfg["model.C"]
        proj = np.eye(cs, c) if cs == c else rng.spawn(2).normal((cs, c), std=1.0 / np.sqrt(cs))
        self.compress = nc.param(proj)
        self.enhancer = Enhancer(rng.spawn(3), ecfg)

    @property
    def needs_semantics(self) -> bool:
        return self.ecfg.use_space or self.ecfg.use_image

    def trainable(self) -> list[tuple[str, Tensor]]:
        named = self.named_parameters()
        if self.mode == "oracle":
            named = [(n, p) for n, p in named if not n.startswith("extractor.")]
        if not self.ecfg.use_space:
            named = [(n, p) for n, p in named if n != "compress"]
        return named

    def semantics(self, lr, labels: np.ndarray | None) -> SemanticBundle:
        """Raw-width bundle: ground truth in oracle mode, predicted otherwise."""
        lr = lr.data if isinstance(lr, Tensor) else np.asarray(lr)
        if self.mode == "oracle":
            if labels is None:
                raise ValueError("oracle extractor needs ground-truth label maps")
            with nc.no_grad():
                decoded = self.extractor.decoded_features(lr)
            return oracle_bundle(labels, decoded, self.n_tokens)
        return self.extractor(lr)

    def __call__(self, lr, labels: np.ndarray | None, t_ref: int,
                 bundle: SemanticBundle | None = None) -> tuple[Tensor, SemanticBundle | None]:
        if bundle is None and self.needs_semantics:
            bundle = self.semantics(lr, labels)
        small = compress_semantics(bundle, self.compress) if bundle is not None else None
        return self.enhancer(lr, small, t_ref), bundle
