"""Self-interpretation of T and V models.

The importance tensor of class ``c`` distributes the bias-free logit over input
elements::

    IM = sum_k sum_r lam[c,k,r] * (U_kr * X_k) * <U_kr, X_k>^(k-1)

where ``X_k`` is the same per-order (optionally rescaled) input the forward pass
uses, so the entries always sum to ``z_c - b_c``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ShapeError, UnsupportedVariantError
from .model import TpamModel, _as_batch, _features, _rescaled
from .tensor import geometric_rescale, normalize_map


@dataclass
class ImportanceTensor:
    values: np.ndarray
    class_index: int
    model_ref: dict = field(default_factory=dict)


@dataclass
class InterpretationMap:
    values: np.ndarray
    normalization: str = "none"


def _model_ref(model: TpamModel) -> dict:
    cfg = model.config
    return {"variant": cfg.variant, "order": cfg.K, "rank": cfg.R, "seed": cfg.seed}


def importance_batch(model: TpamModel, X, classes) -> np.ndarray:
    """Importance tensors for a batch; ``classes`` holds one class index per input."""
    cfg = model.config
    if cfg.variant not in ("T", "V"):
        raise UnsupportedVariantError(
            f"importance tensors are defined for T and V models, not {cfg.variant}"
        )
    probe = model.astype(np.float64)
    X = _as_batch(probe, X)
    classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (X.shape[0],))
    if classes.min() < 0 or classes.max() >= cfg.C:
        raise ArgumentError(f"class index out of range for {cfg.C} classes")
    (s, _), = _features(probe, X)  # (B, K, R)
    lam = probe.params["lam"][classes]  # (B, K, R)
    U = probe.factor_tensors().reshape(cfg.K, cfg.R, -1)
    B = X.shape[0]
    out = np.zeros((B, U.shape[-1]))
    for k, Xk in _rescaled(cfg, X):
        coef = lam[:, k - 1] * s[:, k - 1] ** (k - 1)  # (B, R)
        out += (coef @ U[k - 1]) * Xk.reshape(B, -1)
    return out.reshape(X.shape)


def importance_tensor(model: TpamModel, x, c: int) -> ImportanceTensor:
    x = np.asarray(x)
    if x.shape != model.config.input_shape:
        raise ShapeError(f"input shape {x.shape} != model input shape {model.config.input_shape}")
    values = importance_batch(model, x[np.newaxis], [c])[0]
    return ImportanceTensor(values, int(c), _model_ref(model))


def importance_vector_spam(model: TpamModel, x, c: int) -> ImportanceTensor:
    """Importance vector of a model trained on the flattened input.

    Evaluated term by term on the factor vectors of an order-1-input model, so
    it doubles as an independent check of :func:`importance_tensor` at N=1.
    """
    cfg = model.config
    if len(cfg.input_shape) != 1:
        raise ShapeError(f"SPAM importance needs a vector-input model, got input shape {cfg.input_shape}")
    if cfg.variant not in ("T", "V"):
        raise UnsupportedVariantError(f"importance is not defined for {cfg.variant} models")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != cfg.input_shape:
        raise ShapeError(f"flattened input has {x.size} entries, model expects {cfg.input_shape[0]}")
    u = model.params["U" if cfg.variant == "T" else "u0"].astype(np.float64)
    lam = model.params["lam"].astype(np.float64)
    out = np.zeros_like(x)
    for k in range(1, cfg.K + 1):
        xk = geometric_rescale(x, k) if cfg.rescale else x
        for r in range(cfg.R):
            out += lam[c, k - 1, r] * (u[k - 1, r] * xk) * float(np.dot(u[k - 1, r], xk)) ** (k - 1)
    return ImportanceTensor(out, int(c), _model_ref(model))


def channel_sum(values: np.ndarray) -> np.ndarray:
    """Sum over the leading channel axis of a (C, H, W) tensor; (H, W) passes through."""
    values = np.asarray(values)
    if values.ndim == 2:
        return values.copy()
    if values.ndim == 3:
        return values.sum(axis=0)
    raise ShapeError(f"expected a (H, W) or (C, H, W) tensor, got shape {values.shape}")


def interpretation_map(im: ImportanceTensor, spatial_shape=None) -> InterpretationMap:
    """Channel-summed importance.  Flattened (SPAM) vectors need ``spatial_shape``."""
    values = im.values
    if values.ndim == 1:
        if spatial_shape is None:
            raise ArgumentError("a vector importance needs spatial_shape to form a map")
        values = values.reshape(spatial_shape)
    return InterpretationMap(channel_sum(values))


def normalized(m: InterpretationMap, mode: str = "max-abs") -> InterpretationMap:
    return InterpretationMap(normalize_map(m.values, mode), mode)


def explanation_variance(maps) -> float:
    """Mean over maps of the population variance of the min-max normalized pixels."""
    maps = list(maps)
    if not maps:
        raise ArgumentError("explanation variance needs at least one map")
    variances = []
    for m in maps:
        values = m.values if isinstance(m, InterpretationMap) else np.asarray(m)
        variances.append(float(np.var(normalize_map(values, "min-max"))))
    return float(np.mean(variances))
