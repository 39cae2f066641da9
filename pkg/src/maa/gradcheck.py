"""Whole-model gradient check on a tiny 64-bit configuration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .dataio import GLOBAL, LOCAL, TEXT, SyntheticModality, collate, gen_synthetic
from .model import MAAModel, ce_loss
from .numcore import GradcheckReport, finite_diff_gradcheck, set_sabotage

# Parameters are drawn wider than the training init (std 0.02) so attention is
# far from uniform and every nonlinearity is exercised; at std 0.02 many
# gradients sit near 1e-10, where central differences are pure roundoff.
GRADCHECK_INIT_STD = 0.3
GRADCHECK_JITTER = 0.1


@dataclass
class GradcheckCase:
    model: MAAModel
    batch: object

    def loss(self, backward: bool) -> float:
        if backward:
            return self.model.forward_backward(self.batch)[0]
        return ce_loss(self.model.forward(self.batch), self.batch.labels)[0]


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        dim=16, ffn_dim=32, heads=2, layers=1, dropout=0.0, precision=64,
        init_std=GRADCHECK_INIT_STD, modalities="G,L,T",
    )
    base.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**base)


def build_case(config: TrainConfig, num_classes: int = 3, per_class: int = 2, seed: int = 0) -> GradcheckCase:
    """A padded batch with all three modalities (text has a variable count and
    may be absent), and a model whose LN/bias params are jittered off their
    identity init."""
    if config.precision != 64:
        raise ValueError("gradcheck needs precision=64")
    d = config.dim
    text_dim = d if config.adapter_mode != "independent" else max(2, d - 4)
    specs = [
        SyntheticModality(GLOBAL, d, 1, 0.5, 0.5),
        SyntheticModality(LOCAL, d, 5, 0.5, 0.5),
        SyntheticModality(TEXT, text_dim, (1, 4), 0.5, 0.5, dropout=0.3),
    ]
    specs = [s for s in specs if s.id in config.modality_ids]
    header, records = gen_synthetic(num_classes, per_class, specs, seed)
    model = MAAModel(config, header.dims, num_classes)
    rng = np.random.default_rng([seed, 99])
    for p in model.params():
        if p.name.endswith(("gamma", "beta", "bias")):
            p.value += rng.normal(0.0, GRADCHECK_JITTER, p.shape)
    batch = collate(records, config.modality_ids, config.max_len, dtype=np.float64)
    return GradcheckCase(model, batch)


def run_gradcheck(
    config: TrainConfig,
    num_classes: int = 3,
    seed: int = 0,
    eps: float = 1e-4,
    tol: float = 1e-4,
    break_layer_norm: bool = False,
) -> GradcheckReport:
    case = build_case(config, num_classes, seed=seed)
    set_sabotage("layer_norm", break_layer_norm)
    try:
        return finite_diff_gradcheck(case.loss, case.model.params(), eps=eps, tol=tol, seed=seed)
    finally:
        set_sabotage("layer_norm", False)
