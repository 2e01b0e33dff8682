"""P-CAM / PI-CAM saliency from a TPAM head over CNN feature maps.

Feature maps come from an extractor ``f``: either the built-in toy CNN or an
external command that exchanges TPTC container files::

    my-backbone --in {input} --out {output}

The command is split with :func:`shlex.split`; ``{input}`` and ``{output}``
are replaced by per-call temp file paths.  Exit status 0 means success and
the output file must hold an order-3 (C, H, W) tensor.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ArgumentError, ExtractorError, FormatError, ProtocolError, ShapeError
from .interpret import channel_sum, importance_batch
from .io import read_tensor, write_tensor
from .model import TpamModel
from .tensor import hadamard, normalize_map


@dataclass
class FeatureMapSet:
    maps: np.ndarray
    layer: str = ""
    source: str = ""

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 3:
            raise ShapeError(f"feature maps must be (C, H, W), got shape {self.maps.shape}")
        if not np.all(np.isfinite(self.maps)):
            raise ArgumentError("feature maps contain NaN or Inf")


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str = "builtin-toy"
    command: str = ""
    workdir: Optional[str] = None
    timeout: float = 120.0
    seed: int = 42
    widths: tuple[int, ...] = (8,)
    nonnegative: bool = False

    def __post_init__(self):
        if self.kind not in ("builtin-toy", "external"):
            raise ArgumentError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "external" and not self.command.strip():
            raise ArgumentError("an external extractor needs a command template")
        if self.kind == "builtin-toy" and (not self.widths or min(self.widths) < 1):
            raise ArgumentError("builtin extractor needs positive layer widths")


@dataclass
class SaliencyMap:
    values: np.ndarray
    upsampled: np.ndarray
    class_index: int
    method: str
    raw: Optional[np.ndarray] = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# upsampling


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    M = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        M[:, 0] = 1.0
        return M
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    M[np.arange(n_out), lo] = 1.0 - frac
    M[np.arange(n_out), lo + 1] += frac
    return M


def resize_bilinear(m: np.ndarray, height: int, width: int) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected an (H, W) map, got shape {m.shape}")
    if height < m.shape[0] or width < m.shape[1]:
        raise ArgumentError(f"cannot downsample {m.shape} to {(height, width)}")
    return _interp_matrix(m.shape[0], height) @ m @ _interp_matrix(m.shape[1], width).T


def upsample_phi(m: np.ndarray, target) -> np.ndarray:
    """Bilinear resize of an (H, W) map to the spatial size of ``target``.

    ``target`` is (C, H', W') and the result is replicated over the C slots;
    a two-entry target returns the plain (H', W') map.
    """
    target = tuple(int(t) for t in target)
    up = resize_bilinear(m, target[-2], target[-1])
    if len(target) == 2:
        return up
    if len(target) != 3:
        raise ShapeError(f"target must be (C, H, W) or (H, W), got {target}")
    return np.repeat(up[np.newaxis], target[0], axis=0)


# ---------------------------------------------------------------------------
# extractors


def _toy_filters(spec: ExtractorSpec, in_channels: int) -> list[np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    filters = []
    c_in = in_channels
    for width in spec.widths:
        w = rng.normal(0.0, 1.0 / np.sqrt(9 * c_in), size=(width, c_in, 3, 3))
        filters.append(np.abs(w) if spec.nonnegative else w)
        c_in = width
    return filters


def builtin_toy_extractor(spec: ExtractorSpec, x) -> FeatureMapSet:
    """Seeded stack of (valid 3x3 conv, ReLU, 2x2 average pool) blocks."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3:
        raise ShapeError(f"extractor input must be (C, H, W), got shape {a.shape}")
    for w in _toy_filters(spec, a.shape[0]):
        if a.shape[1] < 4 or a.shape[2] < 4:
            raise ArgumentError(f"input too small for the extractor stack at spatial size {a.shape[1:]}")
        win = np.lib.stride_tricks.sliding_window_view(a, (3, 3), axis=(1, 2))
        a = np.maximum(np.einsum("chwij,ocij->ohw", win, w), 0.0)
        H2, W2 = a.shape[1] // 2, a.shape[2] // 2
        a = a[:, : 2 * H2, : 2 * W2].reshape(a.shape[0], H2, 2, W2, 2).mean(axis=(2, 4))
    return FeatureMapSet(a, layer=f"block{len(spec.widths)}", source=f"builtin-toy:seed={spec.seed}")


def external_extractor_call(spec: ExtractorSpec, x) -> FeatureMapSet:
    if spec.kind != "external":
        raise ArgumentError("external_extractor_call needs an external extractor spec")
    with tempfile.TemporaryDirectory(prefix="tpam-extract-") as tmp:
        src = Path(tmp) / "input.tptc"
        dst = Path(tmp) / "output.tptc"
        write_tensor(src, np.asarray(x, dtype=np.float64))
        argv = [tok.replace("{input}", str(src)).replace("{output}", str(dst)) for tok in shlex.split(spec.command)]
        try:
            proc = subprocess.run(
                argv, cwd=spec.workdir, capture_output=True, text=True, timeout=spec.timeout
            )
        except subprocess.TimeoutExpired as exc:
            raise ExtractorError(f"extractor timed out after {spec.timeout}s: {spec.command}",
                                 stderr=exc.stderr or "") from exc
        except OSError as exc:
            raise ExtractorError(f"could not start extractor {argv[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            raise ExtractorError(f"extractor exited with status {proc.returncode}: {spec.command}",
                                 stderr=proc.stderr)
        if not dst.exists():
            raise ExtractorError("extractor produced no output file", stderr=proc.stderr)
        try:
            maps = read_tensor(dst)
        except FormatError as exc:
            raise ExtractorError(f"extractor output is not a valid container: {exc}",
                                 stderr=proc.stderr) from exc
    if maps.ndim != 3:
        raise ExtractorError(f"extractor output must be (C, H, W), got shape {maps.shape}")
    return FeatureMapSet(maps, source=f"external:{spec.command}")


def extract(spec: ExtractorSpec, x) -> FeatureMapSet:
    if spec.kind == "external":
        return external_extractor_call(spec, x)
    return builtin_toy_extractor(spec, x)


# ---------------------------------------------------------------------------
# saliency


def _finish(agg: np.ndarray, input_hw, c: int, method: str) -> SaliencyMap:
    values = np.maximum(normalize_map(agg, "max-abs"), 0.0)
    if input_hw is None:
        up = values.copy()
    else:
        up = np.clip(resize_bilinear(values, *input_hw), 0.0, 1.0)
    return SaliencyMap(values, up, int(c), method, raw=agg)


def p_cam(head: TpamModel, a, c: int, input_shape=None) -> SaliencyMap:
    """Importance of the feature maps, channel-summed, max-abs normalized, rectified.

    ``input_shape`` (C, H, W) or (H, W) of the original image selects the
    resolution of the ``upsampled`` rendering.
    """
    maps = a.maps if isinstance(a, FeatureMapSet) else np.asarray(a, dtype=np.float64)
    if maps.shape != head.config.input_shape:
        raise ShapeError(f"feature maps {maps.shape} != head input shape {head.config.input_shape}")
    alpha = importance_batch(head, maps[np.newaxis], [c])[0]
    hw = None if input_shape is None else tuple(input_shape)[-2:]
    return _finish(channel_sum(alpha), hw, c, "P-CAM")


def _checked_extract(spec: ExtractorSpec, x, shape) -> np.ndarray:
    maps = extract(spec, x).maps
    if maps.shape != shape:
        raise ProtocolError(f"extractor output shape changed from {shape} to {maps.shape}")
    return maps


def default_baseline(x, kind: str = "ones") -> np.ndarray:
    """All-ones baseline by default; ``white``/``black`` give the image max/min value."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "ones":
        return np.ones_like(x)
    if kind == "white":
        return np.full_like(x, x.max())
    if kind == "black":
        return np.full_like(x, x.min())
    raise ArgumentError(f"unknown baseline kind {kind!r}")


def masked_importance(head: TpamModel, extractor: ExtractorSpec, x, mask, c: int, shape=None) -> np.ndarray:
    """Importance tensor of f(x * mask) for class c, with an (H, W) mask over every channel."""
    x = np.asarray(x, dtype=np.float64)
    masked = hadamard(x, mask) if x.ndim == 3 else x * mask
    maps = extract(extractor, masked).maps if shape is None else _checked_extract(extractor, masked, shape)
    return importance_batch(head, maps[np.newaxis], [c])[0]


def pi_cam_channel_maps(head: TpamModel, extractor: ExtractorSpec, x, x_b, c: int, workers: int = 1) -> np.ndarray:
    """Per-channel maps s(alpha_ic), shape (I_C, I_H, I_W) at feature resolution."""
    x = np.asarray(x, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    if x.shape != x_b.shape:
        raise ShapeError(f"image {x.shape} and baseline {x_b.shape} differ in shape")
    A = extract(extractor, x).maps
    if A.shape != head.config.input_shape:
        raise ShapeError(f"feature maps {A.shape} != head input shape {head.config.input_shape}")
    base = importance_batch(head, _checked_extract(extractor, x_b, A.shape)[np.newaxis], [c])[0]

    def one(ic):
        mask = normalize_map(upsample_phi(A[ic], x.shape[-2:]), "min-max")
        return channel_sum(masked_importance(head, extractor, x, mask, c, A.shape) - base)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_channel = list(pool.map(one, range(A.shape[0])))
    else:
        per_channel = [one(ic) for ic in range(A.shape[0])]
    return np.stack(per_channel)


def pi_cam(
    head: TpamModel,
    extractor: ExtractorSpec,
    x,
    x_b=None,
    c: int = 0,
    workers: int = 1,
) -> SaliencyMap:
    x = np.asarray(x, dtype=np.float64)
    if x_b is None:
        x_b = default_baseline(x)
    per_channel = pi_cam_channel_maps(head, extractor, x, x_b, c, workers)
    agg = np.zeros(per_channel.shape[1:])
    for m in per_channel:  # channel-index order
        agg += m
    return _finish(agg, x.shape[-2:], c, "PI-CAM")
