"""Objective terms: binary cross-entropy, cross-subspace orthogonality
penalty, spectral energy consistency penalty, and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .decomposition import DecomposedLayer, recompose

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    orth_weight: float = 1.0
    spectral_weight: float = 1.0

    def validate(self) -> None:
        if self.orth_weight < 0.0 or self.spectral_weight < 0.0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossReport:
    cls: float
    orth_mean: float
    spec_mean: float
    total: float
    n_layers: int


def orth_loss(layer: DecomposedLayer) -> float:
    """Pairwise squared Frobenius overlap of artifact factor bases, averaged
    over the pair count.  Zero for a single subspace.

    The right-factor term is computed as ||V_i^T V_j||_F^2 on column-stored V;
    with row-stored right factors the same quantity reads ||V_i V_j^T||_F^2,
    so the two spellings are one Gram matrix in different conventions.
    """
    k = layer.n_subspaces
    if k < 2:
        return 0.0
    acc = 0.0
    for i in range(k):
        ai = layer.artifacts[i]
        for j in range(i + 1, k):
            aj = layer.artifacts[j]
            gu = ai.u.T @ aj.u
            gv = ai.v.T @ aj.v
            acc += float(np.sum(gu * gu)) + float(np.sum(gv * gv))
    return 2.0 / (k * (k - 1)) * acc


def orth_loss_grads(layer: DecomposedLayer, scale: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients of ``scale * orth_loss`` w.r.t. each artifact's (U, V)."""
    k = layer.n_subspaces
    out: list[tuple[np.ndarray, np.ndarray]] = []
    if k < 2:
        return [(np.zeros_like(a.u), np.zeros_like(a.v)) for a in layer.artifacts]
    coef = scale * 2.0 / (k * (k - 1))
    for i in range(k):
        ai = layer.artifacts[i]
        du = np.zeros_like(ai.u)
        dv = np.zeros_like(ai.v)
        for j in range(k):
            if j == i:
                continue
            aj = layer.artifacts[j]
            du += 2.0 * (aj.u @ (aj.u.T @ ai.u))
            dv += 2.0 * (aj.v @ (aj.v.T @ ai.v))
        out.append((coef * du, coef * dv))
    return out


def spec_loss(layer: DecomposedLayer, w_eff: np.ndarray | None = None) -> float:
    """Absolute drift of the effective weight's squared Frobenius energy from
    the pretrained value."""
    if w_eff is None:
        w_eff = recompose(layer)
    return abs(linalg.frobenius_sq(w_eff) - layer.pretrained_frob_sq)


def cls_loss(p: np.ndarray, y: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError(f"probability/label shapes differ: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("cannot score an empty batch")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))


def total_loss(
    cls: float,
    orth_values: list[float],
    spec_values: list[float],
    weights: LossWeights,
) -> LossReport:
    if len(orth_values) != len(spec_values) or not orth_values:
        raise ValueError("need one orthogonality and one spectral value per decomposed layer")
    weights.validate()
    n = len(orth_values)
    orth_mean = float(np.mean(orth_values))
    spec_mean = float(np.mean(spec_values))
    total = cls + weights.orth_weight * orth_mean + weights.spectral_weight * spec_mean
    return LossReport(cls=cls, orth_mean=orth_mean, spec_mean=spec_mean, total=total, n_layers=n)
