"""TPAM: additive polynomial classifiers built from low-rank tensor factors.

Four variants share one parameterization scheme:

``T``   factor tensors ``U`` of shape (K, R, *input_shape), class weights
        ``lam`` (C, K, R) and biases ``b`` (C,).
``V``   the factor tensor of each (k, r) is a rank-one outer product; stored as
        ``u0 .. u{N-1}`` with shapes (K, R, I_n).
``PT``  factor tensors of patch shape slid over the input; the head ``W0``
        (C, K, R, P) weights every (order, rank, position) feature.
``MPT`` several PT branches (``U{j}``, ``W{j}``) whose logits are summed,
        with a single shared bias.

Order ``k`` terms see the per-order rescaled input sign(x)|x|^(1/k) when
``rescale`` is on.  All batched functions take inputs of shape
(B, *input_shape) and return logits of shape (B, C).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .errors import ArgumentError, CapacityError, ShapeError, UnsupportedVariantError
from .tensor import check_shape, geometric_rescale, patch_grid, patch_windows

VARIANTS = ("T", "V", "PT", "MPT")
DENSE_ORACLE_CAP = 10**6


@dataclass(frozen=True)
class PatchSpec:
    patch: tuple[int, ...]
    step: tuple[int, ...]

    @classmethod
    def make(cls, patch, step) -> "PatchSpec":
        patch = tuple(int(p) for p in patch)
        step = (int(step),) * len(patch) if np.isscalar(step) else tuple(int(s) for s in step)
        return cls(patch, step)


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    order: int
    rank: int
    input_shape: tuple[int, ...]
    num_classes: int
    init_factor: float = 1.0
    rescale: bool = True
    patch_specs: tuple[PatchSpec, ...] = ()
    seed: int = 0

    def __post_init__(self):
        variant = str(self.variant).upper()
        if variant not in VARIANTS:
            raise ArgumentError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "variant", variant)
        object.__setattr__(self, "input_shape", check_shape(self.input_shape))
        specs = tuple(
            s if isinstance(s, PatchSpec) else PatchSpec.make(*s) for s in self.patch_specs
        )
        object.__setattr__(self, "patch_specs", specs)
        for name in ("order", "rank", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ArgumentError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.init_factor < 0:
            raise ArgumentError(f"init_factor must be >= 0, got {self.init_factor}")
        if not 0 <= int(self.seed) < 2**64:
            raise ArgumentError("seed must fit in an unsigned 64-bit integer")
        if variant == "PT" and len(specs) != 1:
            raise ArgumentError("PT needs exactly one patch spec")
        if variant == "MPT" and len(specs) < 2:
            raise ArgumentError("MPT needs at least two patch specs")
        if variant in ("T", "V") and specs:
            raise ArgumentError(f"variant {variant} takes no patch specs")
        for s in specs:
            patch_grid(self.input_shape, s.patch, s.step)  # raises on bad geometry

    @property
    def K(self) -> int:
        return int(self.order)

    @property
    def R(self) -> int:
        return int(self.rank)

    @property
    def C(self) -> int:
        return int(self.num_classes)

    def full_patch(self, j: int) -> tuple[int, ...]:
        patch = self.patch_specs[j].patch
        return self.input_shape[: len(self.input_shape) - len(patch)] + patch

    def num_positions(self, j: int) -> int:
        s = self.patch_specs[j]
        return int(np.prod(patch_grid(self.input_shape, s.patch, s.step)))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        K, R, C = self.K, self.R, self.C
        shapes: dict[str, tuple[int, ...]] = {}
        if self.variant == "T":
            shapes["U"] = (K, R) + self.input_shape
            shapes["lam"] = (C, K, R)
        elif self.variant == "V":
            for n, extent in enumerate(self.input_shape):
                shapes[f"u{n}"] = (K, R, extent)
            shapes["lam"] = (C, K, R)
        else:
            for j in range(len(self.patch_specs)):
                shapes[f"U{j}"] = (K, R) + self.full_patch(j)
                shapes[f"W{j}"] = (C, K, R, self.num_positions(j))
        shapes["b"] = (C,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "order": self.K,
            "rank": self.R,
            "input_shape": list(self.input_shape),
            "num_classes": self.C,
            "init_factor": float(self.init_factor),
            "rescale": bool(self.rescale),
            "patch_specs": [{"patch": list(s.patch), "step": list(s.step)} for s in self.patch_specs],
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["patch_specs"] = tuple(
            PatchSpec.make(s["patch"], s["step"]) for s in d.get("patch_specs", ())
        )
        return cls(**d)


@dataclass
class TpamModel:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.config.param_shapes()
        if set(self.params) != set(expected):
            raise ShapeError(f"parameter names {sorted(self.params)} != {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name}: shape {self.params[name].shape} != {shape}")

    @property
    def dtype(self):
        return self.params["b"].dtype

    def copy(self) -> "TpamModel":
        return TpamModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "TpamModel":
        return TpamModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def factor_tensors(self) -> np.ndarray:
        """U of shape (K, R, *input_shape); materialized from vectors for V."""
        if self.config.variant == "T":
            return self.params["U"]
        if self.config.variant == "V":
            vecs = [self.params[f"u{n}"] for n in range(len(self.config.input_shape))]
            U = vecs[0]
            for v in vecs[1:]:
                U = U[..., np.newaxis] * v.reshape(v.shape[:2] + (1,) * (U.ndim - 2) + v.shape[2:])
            return U
        raise UnsupportedVariantError(f"{self.config.variant} has no global factor tensors")


def zeros(config: ModelConfig, dtype=np.float64) -> TpamModel:
    return TpamModel(config, {k: np.zeros(s, dtype=dtype) for k, s in config.param_shapes().items()})


def factor_names(config: ModelConfig) -> list[str]:
    return [n for n in config.param_shapes() if n.startswith(("U", "u"))]


def head_names(config: ModelConfig) -> list[str]:
    return [n for n in config.param_shapes() if n == "lam" or n.startswith("W")]


def order_param_count(config: ModelConfig) -> int:
    """M_k: learnable parameters attached to a single order (factors + head slice)."""
    shapes = config.param_shapes()
    total = 0
    for name in factor_names(config):
        total += int(np.prod(shapes[name][1:]))
    for name in head_names(config):
        s = shapes[name]
        total += int(np.prod(s)) // s[1]
    return total


def poly_mean_sigma(init_factor: float, k: int, m_k: int) -> float:
    return init_factor * k * math.sqrt(1.0 / m_k)


def init_poly_mean(config: ModelConfig, dtype=np.float64) -> TpamModel:
    """Gaussian factors with sigma_k = Q * k * sqrt(1 / M_k); head and bias at zero.

    Draws come from ``numpy.random.default_rng(config.seed)`` order by order,
    factor groups in ``param_shapes`` order within each order.
    """
    model = zeros(config, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    m_k = order_param_count(config)
    names = factor_names(config)
    for k in range(1, config.K + 1):
        sigma = poly_mean_sigma(config.init_factor, k, m_k)
        for name in names:
            slot = model.params[name][k - 1]
            slot[...] = rng.normal(0.0, 1.0, size=slot.shape) * sigma
    return model.astype(dtype) if dtype != np.float64 else model


def random_model(config: ModelConfig, rng: np.random.Generator, scale: float = 0.5) -> TpamModel:
    """Every parameter (head and bias included) drawn from N(0, scale^2); used by checks."""
    return TpamModel(
        config, {k: rng.normal(0.0, scale, size=s) for k, s in config.param_shapes().items()}
    )


def parameter_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in config.param_shapes().values()))


def dominant_parameter_term(config: ModelConfig) -> int:
    """Leading complexity term: K R prod(I) for T, K R sum(I) for V, per patch for PT/MPT."""
    K, R = config.K, config.R
    if config.variant == "T":
        return K * R * int(np.prod(config.input_shape))
    if config.variant == "V":
        return K * R * int(sum(config.input_shape))
    return K * R * sum(int(np.prod(config.full_patch(j))) for j in range(len(config.patch_specs)))


# ---------------------------------------------------------------------------
# forward / backward


def _as_batch(model: TpamModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=model.dtype)
    if X.shape[1:] != model.config.input_shape:
        raise ShapeError(f"input shape {X.shape[1:]} != model input shape {model.config.input_shape}")
    return X


def _rescaled(config: ModelConfig, X: np.ndarray) -> Iterator[tuple[int, np.ndarray]]:
    for k in range(1, config.K + 1):
        yield k, geometric_rescale(X, k) if config.rescale else X


def _v_contract(Xk: np.ndarray, vecs: list[np.ndarray]) -> np.ndarray:
    """s[b, r] = <u_r^(1) o ... o u_r^(N), X_b>, contracting one mode at a time."""
    B = Xk.shape[0]
    last = vecs[-1]  # (R, I_N)
    t = Xk.reshape(-1, Xk.shape[-1]) @ last.T  # (B * I_1..I_{N-1}, R)
    t = t.reshape(Xk.shape[:-1] + (last.shape[0],))
    for v in reversed(vecs[:-1]):
        # t: (B, I_1..I_m, R), contract mode m against v (R, I_m)
        t = np.einsum("...ir,ri->...r", t, v)
    return t.reshape(B, -1)


def _v_partials(Xk: np.ndarray, vecs: list[np.ndarray], n: int) -> np.ndarray:
    """ds[b, r]/du^(n)_r: contraction of X with every factor vector except mode n."""
    N = len(vecs)
    if N == 1:
        return np.broadcast_to(Xk[:, np.newaxis, :], (Xk.shape[0], vecs[0].shape[0], Xk.shape[1]))
    letters = "ijlmnopqstuvwxyz"[:N]
    operands = [Xk]
    subs = ["b" + letters]
    for m, v in enumerate(vecs):
        if m != n:
            operands.append(v)
            subs.append("r" + letters[m])
    expr = ",".join(subs) + "->br" + letters[n]
    return np.einsum(expr, *operands, optimize=True)


def _features(model: TpamModel, X: np.ndarray):
    """Per-branch inner products s and features s**k.

    Returns a list over branches of ``(s, head_name)`` where ``s`` has shape
    (B, K, R) for T/V and (B, K, R, P) for PT/MPT.
    """
    cfg = model.config
    p = model.params
    B = X.shape[0]
    if cfg.variant == "T":
        s = np.empty((B, cfg.K, cfg.R), dtype=X.dtype)
        for k, Xk in _rescaled(cfg, X):
            s[:, k - 1] = Xk.reshape(B, -1) @ p["U"][k - 1].reshape(cfg.R, -1).T
        return [(s, "lam")]
    if cfg.variant == "V":
        s = np.empty((B, cfg.K, cfg.R), dtype=X.dtype)
        N = len(cfg.input_shape)
        for k, Xk in _rescaled(cfg, X):
            s[:, k - 1] = _v_contract(Xk, [p[f"u{n}"][k - 1] for n in range(N)])
        return [(s, "lam")]
    out = []
    for j, spec in enumerate(cfg.patch_specs):
        P = cfg.num_positions(j)
        s = np.empty((B, cfg.K, cfg.R, P), dtype=X.dtype)
        for k, Xk in _rescaled(cfg, X):
            win = patch_windows(Xk, spec.patch, spec.step, batch_dims=1).reshape(B, P, -1)
            s[:, k - 1] = np.swapaxes(win @ p[f"U{j}"][k - 1].reshape(cfg.R, -1).T, 1, 2)
        out.append((s, f"W{j}"))
    return out


def _powers(s: np.ndarray, K: int) -> np.ndarray:
    kshape = (1, K) + (1,) * (s.ndim - 2)
    return s ** np.arange(1, K + 1).reshape(kshape)


def forward_batch(model: TpamModel, X) -> np.ndarray:
    X = _as_batch(model, X)
    z = np.zeros((X.shape[0], model.config.C), dtype=X.dtype)
    for s, head in _features(model, X):
        f = _powers(s, model.config.K)
        W = model.params[head]
        z += f.reshape(f.shape[0], -1) @ W.reshape(W.shape[0], -1).T
    return z + model.params["b"]


def forward(model: TpamModel, x) -> np.ndarray:
    """Logits of a single input, shape (C,)."""
    x = np.asarray(x)
    return forward_batch(model, x[np.newaxis])[0]


def _checked(variant):
    def run(model: TpamModel, x) -> np.ndarray:
        if model.config.variant != variant:
            raise UnsupportedVariantError(f"forward_{variant.lower()} called on a {model.config.variant} model")
        return forward(model, x)

    run.__name__ = f"forward_{variant.lower()}"
    run.__doc__ = f"Logits of a {variant} model for a single input."
    return run


forward_t = _checked("T")
forward_v = _checked("V")
forward_pt = _checked("PT")
forward_mpt = _checked("MPT")


def branch_logits(model: TpamModel, x) -> list[np.ndarray]:
    """Bias-free logits of each branch (a single entry for T/V/PT)."""
    X = _as_batch(model, np.asarray(x)[np.newaxis])
    out = []
    for s, head in _features(model, X):
        f = _powers(s, model.config.K)
        W = model.params[head]
        out.append((f.reshape(1, -1) @ W.reshape(W.shape[0], -1).T)[0])
    return out


def backward_batch(model: TpamModel, X, G) -> dict[str, np.ndarray]:
    """Gradients of sum_b sum_c G[b, c] * z[b, c] with respect to every parameter.

    The rescaled inputs are treated as constants.  Sample contributions are
    summed in index order by the underlying reductions.
    """
    cfg = model.config
    X = _as_batch(model, X)
    G = np.asarray(G, dtype=X.dtype)
    if G.shape != (X.shape[0], cfg.C):
        raise ShapeError(f"upstream shape {G.shape} != {(X.shape[0], cfg.C)}")
    if not np.all(np.isfinite(G)):
        raise ArgumentError("upstream gradient contains NaN or Inf")
    p = model.params
    B = X.shape[0]
    K, R = cfg.K, cfg.R
    grads = {"b": G.sum(axis=0)}
    branches = _features(model, X)
    ks = np.arange(1, K + 1)
    for s, head in branches:
        f = _powers(s, K)
        W = p[head]
        grads[head] = (G.T @ f.reshape(B, -1)).reshape(W.shape)
        # q = dL/ds = sum_c G[b,c] W[c,k,r,...] * k * s^(k-1)
        dz_df = (G @ W.reshape(W.shape[0], -1)).reshape(s.shape)
        kshape = (1, K) + (1,) * (s.ndim - 2)
        q = dz_df * ks.reshape(kshape) * s ** (ks.reshape(kshape) - 1)
        if cfg.variant == "T":
            gU = np.empty_like(p["U"])
            for k, Xk in _rescaled(cfg, X):
                gU[k - 1] = (q[:, k - 1].T @ Xk.reshape(B, -1)).reshape(gU.shape[1:])
            grads["U"] = gU
        elif cfg.variant == "V":
            N = len(cfg.input_shape)
            gu = [np.empty_like(p[f"u{n}"]) for n in range(N)]
            for k, Xk in _rescaled(cfg, X):
                vecs = [p[f"u{n}"][k - 1] for n in range(N)]
                for n in range(N):
                    part = _v_partials(Xk, vecs, n)  # (B, R, I_n)
                    gu[n][k - 1] = np.einsum("br,bri->ri", q[:, k - 1], part)
            for n in range(N):
                grads[f"u{n}"] = gu[n]
        else:
            j = int(head[1:])
            spec = cfg.patch_specs[j]
            P = cfg.num_positions(j)
            name = f"U{j}"
            gU = np.empty_like(p[name])
            for k, Xk in _rescaled(cfg, X):
                win = patch_windows(Xk, spec.patch, spec.step, batch_dims=1).reshape(B * P, -1)
                qk = np.swapaxes(q[:, k - 1], 1, 2).reshape(B * P, R)
                gU[k - 1] = (qk.T @ win).reshape(gU.shape[1:])
            grads[name] = gU
    return {name: grads[name] for name in cfg.param_shapes()}


def backward(model: TpamModel, x, upstream) -> dict[str, np.ndarray]:
    upstream = np.asarray(upstream, dtype=np.float64)
    if not np.all(np.isfinite(upstream)):
        raise ArgumentError("upstream gradient contains NaN or Inf")
    return backward_batch(model, np.asarray(x)[np.newaxis], upstream[np.newaxis])


def finite_difference_gradient(model: TpamModel, x, upstream, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of sum_c g_c z_c, one scalar parameter at a time.

    ``x`` may be a single input or a batch with ``upstream`` of shape (B, C).
    """
    if h <= 0:
        raise ArgumentError(f"step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1:
        x, g = x[np.newaxis], g[np.newaxis]
    probe = model.astype(np.float64)

    def loss():
        return float(np.sum(forward_batch(probe, x) * g))

    grads = {}
    for name, arr in probe.params.items():
        out = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = out.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss()
            flat[i] = keep - h
            down = loss()
            flat[i] = keep
            gflat[i] = (up - down) / (2 * h)
        grads[name] = out
    return grads


def gradient_relative_error(analytic: dict, numeric: dict) -> float:
    """Largest per-array error ``max|a - f| / max(max|a|, max|f|)`` over all arrays."""
    worst = 0.0
    for name, a in analytic.items():
        f = numeric[name]
        scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(f))))
        err = float(np.max(np.abs(a - f)))
        if scale == 0.0:
            continue
        worst = max(worst, err / scale)
    return worst


# ---------------------------------------------------------------------------
# dense oracle


def _outer_power(t: np.ndarray, k: int) -> np.ndarray:
    out = t
    for _ in range(k - 1):
        out = np.multiply.outer(out, t)
    return out


def dense_weight(model: TpamModel, c: int, k: int) -> np.ndarray:
    """W^(k) for class c: sum_r lam[c,k,r] * (U_kr o ... o U_kr), k copies."""
    U = model.factor_tensors()[k - 1]
    W = np.zeros(model.config.input_shape * k, dtype=np.float64)
    for r in range(model.config.R):
        W += model.params["lam"][c, k - 1, r] * _outer_power(U[r].astype(np.float64), k)
    return W


def forward_dense_oracle(model: TpamModel, x, cap: int = DENSE_ORACLE_CAP) -> np.ndarray:
    """Brute-force logits through the fully materialized weight tensors.

    Only meant as a test oracle for small T and V models.
    """
    cfg = model.config
    if cfg.variant not in ("T", "V"):
        raise UnsupportedVariantError("dense oracle covers T and V models only")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != cfg.input_shape:
        raise ShapeError(f"input shape {x.shape} != {cfg.input_shape}")
    size = int(np.prod(cfg.input_shape)) ** cfg.K
    if size > cap:
        raise CapacityError(f"dense weight tensor needs {size} elements, cap is {cap}")
    z = model.params["b"].astype(np.float64).copy()
    for k in range(1, cfg.K + 1):
        xk = geometric_rescale(x, k) if cfg.rescale else x
        xpow = _outer_power(xk, k)
        for c in range(cfg.C):
            z[c] += float(np.sum(dense_weight(model, c, k) * xpow))
    return z


def with_params(model: TpamModel, **params) -> TpamModel:
    new = model.copy()
    for k, v in params.items():
        new.params[k] = np.asarray(v, dtype=model.dtype).reshape(new.params[k].shape)
    return TpamModel(replace(model.config), new.params)
