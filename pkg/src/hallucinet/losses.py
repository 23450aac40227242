"""Loss terms: median-frequency-balanced cross-entropy, feature mimicry
between branch taps, and the composite single/multi-missing objectives.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, channel_softmax, clamp_min, gather_channel, log, mul, sigmoid, tmean, tsum

IGNORE_LABEL = 255
PROB_FLOOR = 1e-12

SINGLE_HAL_TERMS = ("hallucinate",)
SINGLE_CE_TERMS = ("depth", "rgb", "hal", "rgb+depth", "rgb+hal")
MULTI_HAL_TERMS = ("hallucinate_ir", "hallucinate_depth")
MULTI_CE_TERMS = ("ir", "depth", "rgb", "hal_depth", "hal_ir",
                  "rgb+hal_ir+depth", "rgb+ir+hal_depth", "rgb+ir+depth",
                  "rgb+hal_ir+hal_depth")


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights, indexable by class id."""
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or not np.all(w > 0):
            raise ValueError("class weights must be a 1-d vector of positive reals")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, class_count: int) -> "ClassWeights":
        return cls(np.ones(class_count))


def compute_class_weights(frequencies) -> ClassWeights:
    """Median-frequency balancing: w_c = median(f) / f_c.

    The median over an even class count is the mean of the two middle
    values. Zero frequencies are rejected; drop absent classes first.
    """
    f = np.asarray(frequencies, dtype=np.float64)
    if f.ndim != 1 or f.size == 0:
        raise ValueError("frequencies must be a non-empty 1-d vector")
    if np.any(f < 0) or not np.any(f > 0):
        raise ValueError("frequencies must be nonnegative with at least one positive")
    if np.any(f == 0):
        raise ValueError("zero class frequency: drop classes absent from the training data")
    return ClassWeights(np.median(f) / f)


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray,
                           weights: ClassWeights,
                           ignore_label: int = IGNORE_LABEL) -> Tensor:
    """Mean of -w_label * log(softmax prob of the true class) over non-ignored pixels."""
    labels = np.asarray(labels)
    valid = labels != ignore_label
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("all pixels ignored: cross-entropy undefined")
    safe = np.where(valid, labels, 0).astype(np.int64)
    pixel_w = np.where(valid, weights.weights[safe], 0.0).astype(logits.dtype)

    probs = gather_channel(channel_softmax(logits), safe)
    logp = log(clamp_min(probs, PROB_FLOOR))
    return mul(tsum(mul(logp, Tensor(pixel_w))), -1.0 / n_valid)


def hallucination_loss(tap_target: Tensor, tap_hal: Tensor) -> Tensor:
    """Mean squared difference of sigmoid-squashed taps.

    The target tap is detached: gradient reaches the hallucination branch
    only (the target features are not adapted by this term).
    """
    if tap_target.shape != tap_hal.shape:
        raise ValueError(f"tap shape mismatch: {tap_target.shape} vs {tap_hal.shape}")
    diff = sigmoid(tap_target.detach()) - sigmoid(tap_hal)
    return tmean(mul(diff, diff))


@dataclass
class LossBreakdown:
    """All named terms of the composite objective plus the weighted total."""
    terms: dict[str, Tensor]
    gamma: float
    hallucination_terms: tuple[str, ...]
    total: Tensor = field(init=False)

    def __post_init__(self):
        acc = None
        for name, term in self.terms.items():
            scaled = mul(term, self.gamma) if name in self.hallucination_terms else term
            acc = scaled if acc is None else acc + scaled
        self.total = acc

    def term_values(self) -> dict[str, float]:
        return {name: term.item() for name, term in self.terms.items()}

    def total_value(self) -> float:
        return self.total.item()

    def recompose(self) -> float:
        """Recompute the total from the individual term values."""
        vals = self.term_values()
        return (self.gamma * sum(vals[n] for n in self.hallucination_terms)
                + sum(v for n, v in vals.items() if n not in self.hallucination_terms))

    def raw_hallucination_value(self) -> float:
        return sum(self.terms[n].item() for n in self.hallucination_terms)

    def max_other_value(self) -> float:
        return max(term.item() for name, term in self.terms.items()
                   if name not in self.hallucination_terms)


def _fuse(logit_list: list[Tensor]) -> Tensor:
    acc = logit_list[0]
    for t in logit_list[1:]:
        acc = acc + t
    return mul(acc, 1.0 / len(logit_list))


def composite_loss_single(outputs, labels: np.ndarray, weights: ClassWeights,
                          gamma: float) -> LossBreakdown:
    """Six-term objective for one hallucinated modality.

    `outputs` maps the roles rgb, depth, hal to objects carrying `.tap`
    and `.logits`. All cross-entropy terms share the minibatch and class
    weights; the mimicry term is unweighted.
    """
    for role in ("rgb", "depth", "hal"):
        if role not in outputs:
            raise ValueError(f"missing branch output: {role}")
    rgb, depth = outputs["rgb"], outputs["depth"]
    hal = outputs["hal"]

    def ce(logits):
        return weighted_cross_entropy(logits, labels, weights)

    terms = {
        "hallucinate": hallucination_loss(depth.tap, hal.tap),
        "depth": ce(depth.logits),
        "rgb": ce(rgb.logits),
        "hal": ce(hal.logits),
        "rgb+depth": ce(_fuse([rgb.logits, depth.logits])),
        "rgb+hal": ce(_fuse([rgb.logits, hal.logits])),
    }
    return LossBreakdown(terms, gamma, SINGLE_HAL_TERMS)


def composite_loss_multi(outputs, labels: np.ndarray, weights: ClassWeights,
                         gamma: float) -> LossBreakdown:
    """Eleven-term objective for two hallucinated modalities (ir and depth)."""
    for role in ("rgb", "ir", "depth", "hal_ir", "hal_depth"):
        if role not in outputs:
            raise ValueError(f"missing branch output: {role}")
    rgb, ir, depth = outputs["rgb"], outputs["ir"], outputs["depth"]
    hal_ir, hal_depth = outputs["hal_ir"], outputs["hal_depth"]

    def ce(logits):
        return weighted_cross_entropy(logits, labels, weights)

    terms = {
        "hallucinate_ir": hallucination_loss(ir.tap, hal_ir.tap),
        "hallucinate_depth": hallucination_loss(depth.tap, hal_depth.tap),
        "ir": ce(ir.logits),
        "depth": ce(depth.logits),
        "rgb": ce(rgb.logits),
        "hal_depth": ce(hal_depth.logits),
        "hal_ir": ce(hal_ir.logits),
        "rgb+hal_ir+depth": ce(_fuse([rgb.logits, hal_ir.logits, depth.logits])),
        "rgb+ir+hal_depth": ce(_fuse([rgb.logits, ir.logits, hal_depth.logits])),
        "rgb+ir+depth": ce(_fuse([rgb.logits, ir.logits, depth.logits])),
        "rgb+hal_ir+hal_depth": ce(_fuse([rgb.logits, hal_ir.logits, hal_depth.logits])),
    }
    return LossBreakdown(terms, gamma, MULTI_HAL_TERMS)


@dataclass(frozen=True)
class GammaPolicy:
    """Calibration rule for the mimicry-loss weight."""
    multiplier: float = 10.0
    sample_batches: int = 1

    def __post_init__(self):
        if self.multiplier <= 0:
            raise ValueError("gamma multiplier must be positive")


def calibrate_gamma(breakdown: LossBreakdown, policy: GammaPolicy) -> float:
    """Weight so the scaled mimicry loss is `multiplier` times the largest other term."""
    raw_hal = breakdown.raw_hallucination_value()
    if raw_hal <= 0.0:
        warnings.warn("raw hallucination loss is zero; gamma defaults to 1")
        return 1.0
    return policy.multiplier * breakdown.max_other_value() / raw_hal
