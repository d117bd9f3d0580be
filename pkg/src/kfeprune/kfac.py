"""Kronecker-factored curvature: factor estimation, damping, eigenbases.

A layer's curvature is approximated as kron(S, A) acting on the
column-major vec of the canonical (fan_in, fan_out) weight matrix, where
A is the input-side covariance and S the gradient-side covariance.

Variants:
  dense         A = E[a a.T]                    S = E[g g.T]
  conv_full     A = sum_loc E[patch patch.T]    S = mean_loc E[g g.T]
  conv_channel  A = mean over input pixels of   S = mean_loc E[g g.T]
                the per-pixel channel covariance

Expectations are over samples; running means keep exact counts so the
result is independent of batching.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, SingularityError, StateError, ValidationError
from .network import Network
from .tensormath import SymEigen, sym_eig

DEFAULT_DAMPING = 1e-6

VARIANTS = ("dense", "conv_full", "conv_channel")


@dataclass
class KronFactors:
    """Running-mean Kronecker factors for one layer."""

    a: np.ndarray
    s: np.ndarray
    count: int
    a_locs: int
    s_locs: int
    variant: str

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown factor variant {self.variant!r}")


@dataclass
class EigenFactors:
    """Eigenbases and eigenvalues of both factors, eigenvalues descending."""

    qa: np.ndarray
    lam_a: np.ndarray
    qs: np.ndarray
    lam_s: np.ndarray
    variant: str


def empty_factors(dim_a: int, dim_s: int, variant: str) -> KronFactors:
    return KronFactors(
        a=np.zeros((dim_a, dim_a)),
        s=np.zeros((dim_s, dim_s)),
        count=0,
        a_locs=1,
        s_locs=1,
        variant=variant,
    )


def _stream_mean(mean: np.ndarray, eff: int, batch_sum: np.ndarray, batch_eff: int):
    total = eff + batch_eff
    return (mean * eff + batch_sum) / total


def _accumulate(f: KronFactors, a_rows, a_locs, s_rows, s_locs, samples) -> KronFactors:
    if f.count and (f.a_locs != a_locs or f.s_locs != s_locs):
        raise DimensionError("location counts changed between accumulation batches")
    a_sum = a_rows.T @ a_rows
    s_sum = s_rows.T @ s_rows
    # A averages over samples only for conv_full (location sum is part of
    # the definition), over samples*pixels otherwise; S always averages
    # over samples*locations.
    a_eff_old = f.count * (f.a_locs if f.variant == "conv_channel" else 1)
    a_eff_new = samples * (a_locs if f.variant == "conv_channel" else 1)
    s_eff_old = f.count * f.s_locs
    s_eff_new = samples * s_locs
    return replace(
        f,
        a=_stream_mean(f.a, a_eff_old, a_sum, a_eff_new),
        s=_stream_mean(f.s, s_eff_old, s_sum, s_eff_new),
        count=f.count + samples,
        a_locs=a_locs,
        s_locs=s_locs,
    )


def accumulate_dense(f: KronFactors, a: np.ndarray, g: np.ndarray) -> KronFactors:
    """Fold a batch of dense captures in: a (B, n), g (B, m) per-sample."""
    if f.variant != "dense":
        raise ValidationError("accumulate_dense needs dense-variant factors")
    if a.ndim != 2 or g.ndim != 2 or a.shape[0] != g.shape[0]:
        raise DimensionError("dense capture shapes disagree")
    return _accumulate(f, a, 1, g, 1, a.shape[0])


def accumulate_conv(f: KronFactors, patches: np.ndarray, g: np.ndarray) -> KronFactors:
    """Fold conv captures in: patches (B, L, n), g (B, L, m)."""
    if f.variant != "conv_full":
        raise ValidationError("accumulate_conv needs conv_full-variant factors")
    if patches.ndim != 3 or g.ndim != 3 or patches.shape[:2] != g.shape[:2]:
        raise DimensionError("conv capture shapes disagree")
    b, locs, n = patches.shape
    return _accumulate(
        f, patches.reshape(b * locs, n), locs, g.reshape(b * locs, -1), locs, b
    )


def accumulate_conv_channel(f: KronFactors, x_in: np.ndarray, g: np.ndarray) -> KronFactors:
    """Fold channel-covariance captures in: x_in (B, C, H, W), g (B, L, m).

    The input factor is the covariance of per-pixel channel vectors, so a
    downstream basis rotation is a 1x1 convolution.
    """
    if f.variant != "conv_channel":
        raise ValidationError("accumulate_conv_channel needs conv_channel factors")
    if x_in.ndim != 4 or g.ndim != 3 or x_in.shape[0] != g.shape[0]:
        raise DimensionError("channel capture shapes disagree")
    b, c = x_in.shape[0], x_in.shape[1]
    pixels = x_in.shape[2] * x_in.shape[3]
    a_rows = x_in.transpose(0, 2, 3, 1).reshape(b * pixels, c)
    locs = g.shape[1]
    return _accumulate(f, a_rows, pixels, g.reshape(b * locs, -1), locs, b)


def damp(f: KronFactors, lam: float = DEFAULT_DAMPING) -> KronFactors:
    """Add sqrt(lam) * (tr/dim) * I to each factor; scale-aware Tikhonov."""
    if lam < 0:
        raise ValidationError("damping must be non-negative")
    root = np.sqrt(lam)
    a_shift = root * np.trace(f.a) / f.a.shape[0]
    s_shift = root * np.trace(f.s) / f.s.shape[0]
    return replace(
        f,
        a=f.a + a_shift * np.eye(f.a.shape[0]),
        s=f.s + s_shift * np.eye(f.s.shape[0]),
    )


def eigenbasis(f: KronFactors) -> EigenFactors:
    ea = sym_eig(f.a)
    es = sym_eig(f.s)
    return EigenFactors(
        qa=ea.vectors, lam_a=ea.values, qs=es.vectors, lam_s=es.values, variant=f.variant
    )


def fisher_vec(f: KronFactors, x: np.ndarray) -> np.ndarray:
    """Curvature-vector product kron(S, A) @ vec(x), returned in matrix form."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (f.a.shape[0], f.s.shape[0]):
        raise DimensionError(
            f"fisher_vec expects shape {(f.a.shape[0], f.s.shape[0])}, got {x.shape}"
        )
    return f.a @ x @ f.s.T


def inv_psd(m: np.ndarray) -> np.ndarray:
    """Inverse of a PSD factor; singular input raises instead of returning junk."""
    try:
        out = np.linalg.solve(m, np.eye(m.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"factor inversion failed: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise SingularityError("factor inversion produced non-finite entries")
    return out


def offdiag_ratio(m: np.ndarray) -> float:
    """Frobenius mass off the diagonal relative to the whole matrix."""
    total = np.linalg.norm(m)
    off = np.linalg.norm(m - np.diag(np.diag(m)))
    return float(off / max(total, 1e-30))


def _capture_arrays(layer, tape, conv_variant: str):
    """Map a layer's tape onto (accumulator, args) for its factor variant."""
    kind = layer.kind
    if kind == "dense" or kind == "bottleneck_dense":
        return "dense", (tape["a"], tape["g"])
    if kind == "conv":
        if conv_variant == "channel":
            return "conv_channel", (tape["x_in"], tape["g"])
        return "conv_full", (tape["patches"], tape["g"])
    if kind == "bottleneck_conv":
        if layer.basis == "channel":
            return "conv_channel", (tape["x1"], tape["g"])
        return "conv_full", (tape["a_core"], tape["g"])
    raise ValidationError(f"layer kind {kind!r} has no factors")


def estimate_factors(
    net: Network,
    dataset,
    conv_variant: str = "channel",
    batch_size: int = 64,
    max_batches: int | None = None,
    layer_ids=None,
) -> dict:
    """One deterministic capture pass over the dataset; returns factors per layer.

    conv_variant picks the input factor for plain conv layers ("channel"
    or "full"); bottleneck layers are measured at their core boundary in
    whatever basis they carry.
    """
    if conv_variant not in ("channel", "full"):
        raise ValidationError(f"unknown conv variant {conv_variant!r}")
    if layer_ids is None:
        layer_ids = net.parameterized_ids()
    factors: dict = {}
    n = dataset.n
    done = 0
    for start in range(0, n, batch_size):
        if max_batches is not None and done >= max_batches:
            break
        xb = dataset.x[start : start + batch_size]
        yb = dataset.y[start : start + batch_size]
        logits = net.forward(xb, capture=True)
        net.backward(logits, yb)
        caps = net.captures()
        for lid in layer_ids:
            layer = net.layers[lid]
            variant, args = _capture_arrays(layer, caps[lid], conv_variant)
            if lid not in factors:
                if variant == "dense":
                    dim_a, dim_s = args[0].shape[1], args[1].shape[1]
                elif variant == "conv_full":
                    dim_a, dim_s = args[0].shape[2], args[1].shape[2]
                else:
                    dim_a, dim_s = args[0].shape[1], args[1].shape[2]
                factors[lid] = empty_factors(dim_a, dim_s, variant)
            if variant == "dense":
                factors[lid] = accumulate_dense(factors[lid], *args)
            elif variant == "conv_full":
                factors[lid] = accumulate_conv(factors[lid], *args)
            else:
                factors[lid] = accumulate_conv_channel(factors[lid], *args)
        done += 1
    if not factors:
        raise StateError("no batches were processed during factor estimation")
    return factors
