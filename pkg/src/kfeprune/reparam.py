"""Bottleneck reparameterization in the factor eigenbasis.

A parameterized layer W is rewritten as qa @ core @ qs.T where qa and qs
start as the eigenvector bases of the input and output curvature
factors.  Rotations and basis merges preserve the layer function
exactly; structural pruning drops basis directions; the depthwise
decomposition approximates a convolution core with per-channel kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, SingularityError, ValidationError
from .kfac import EigenFactors
from .layers import BottleneckConvLayer, BottleneckDenseLayer, ConvLayer, DenseLayer
from .tensormath import khatri_rao, lstsq

ALS_MAX_ITER = 200
ALS_TOL = 1e-8
ALS_RESTARTS = 3
COLLAPSE_TOL = 1e-12


def _check_square_basis(q: np.ndarray, dim: int, name: str):
    if q.shape != (dim, dim):
        raise DimensionError(
            f"{name} basis shape {q.shape} does not match layer dimension {dim}"
        )


def to_kfe(layer, ef: EigenFactors, basis: str = "channel"):
    """Rewrite a plain layer in the eigenbasis of its curvature factors.

    The returned bottleneck layer computes exactly the same function:
    the core is qa.T @ W @ qs (per kernel offset for channel-basis
    convolutions) and the outer bases are orthonormal.
    """
    if isinstance(layer, DenseLayer):
        n, m = layer.w.shape
        _check_square_basis(ef.qa, n, "input")
        _check_square_basis(ef.qs, m, "output")
        core = ef.qa.T @ layer.w @ ef.qs
        return BottleneckDenseLayer(
            qa=ef.qa.copy(), core=core, qs=ef.qs.copy(), bias=layer.b.copy()
        )
    if isinstance(layer, ConvLayer):
        kk = layer.k * layer.k
        c_out = layer.w.shape[1]
        if basis == "channel":
            _check_square_basis(ef.qa, layer.c_in, "input channel")
            _check_square_basis(ef.qs, c_out, "output")
            core = np.empty((layer.c_in, c_out, kk))
            for delta in range(kk):
                core[:, :, delta] = ef.qa.T @ layer.w[delta::kk, :] @ ef.qs
            return BottleneckConvLayer(
                qa=ef.qa.copy(),
                core=core,
                qs=ef.qs.copy(),
                bias=layer.b.copy(),
                c_in=layer.c_in,
                k=layer.k,
                stride=layer.stride,
                padding=layer.padding,
                basis="channel",
            )
        if basis == "patch":
            n = layer.c_in * kk
            _check_square_basis(ef.qa, n, "input patch")
            _check_square_basis(ef.qs, c_out, "output")
            core = ef.qa.T @ layer.w @ ef.qs
            return BottleneckConvLayer(
                qa=ef.qa.copy(),
                core=core,
                qs=ef.qs.copy(),
                bias=layer.b.copy(),
                c_in=layer.c_in,
                k=layer.k,
                stride=layer.stride,
                padding=layer.padding,
                basis="patch",
            )
        raise ValidationError(f"unknown convolution basis {basis!r}")
    raise ValidationError(f"cannot rotate layer of type {type(layer).__name__}")


def _drop(total: int, removed, what) -> np.ndarray:
    removed = sorted(int(r) for r in removed)
    if len(set(removed)) != len(removed):
        raise ValidationError(f"duplicate {what} removal ids")
    for r in removed:
        if not 0 <= r < total:
            raise ValidationError(f"{what} removal id {r} out of range")
    gone = set(removed)
    keep = [i for i in range(total) if i not in gone]
    if not keep:
        raise ValidationError(f"cannot remove every {what} of a layer")
    return np.array(keep, dtype=np.intp)


def eigenprune(layer, removed_rows, removed_cols):
    """Drop basis directions from a bottleneck layer.

    Rows index the input basis (columns of qa), cols the output basis
    (columns of qs).  Kept-index bookkeeping composes across repeated
    prunes within the same basis.
    """
    if isinstance(layer, BottleneckDenseLayer):
        if layer.core_mode != "full":
            raise ValidationError("cannot prune a factored core")
        keep_r = _drop(layer.core.shape[0], removed_rows, "input direction")
        keep_c = _drop(layer.core.shape[1], removed_cols, "output direction")
        return BottleneckDenseLayer(
            qa=layer.qa[:, keep_r],
            core=layer.core[np.ix_(keep_r, keep_c)],
            qs=layer.qs[:, keep_c],
            bias=layer.b.copy(),
            kept_rows=layer.kept_rows[keep_r],
            kept_cols=layer.kept_cols[keep_c],
        )
    if isinstance(layer, BottleneckConvLayer):
        if layer.core_mode != "full":
            raise ValidationError("cannot prune a factored core")
        keep_r = _drop(layer.core.shape[0], removed_rows, "input direction")
        keep_c = _drop(layer.core.shape[1], removed_cols, "output direction")
        core = layer.core[np.ix_(keep_r, keep_c)]
        return BottleneckConvLayer(
            qa=layer.qa[:, keep_r],
            core=core,
            qs=layer.qs[:, keep_c],
            bias=layer.b.copy(),
            c_in=layer.c_in,
            k=layer.k,
            stride=layer.stride,
            padding=layer.padding,
            basis=layer.basis,
            kept_rows=layer.kept_rows[keep_r],
            kept_cols=layer.kept_cols[keep_c],
        )
    raise ValidationError(f"cannot prune layer of type {type(layer).__name__}")


def merge_bases(layer, ef: EigenFactors):
    """Fold a fresh eigenbasis into an existing bottleneck layer.

    qa <- qa @ qa', qs <- qs @ qs', core <- qa'.T @ core @ qs'.  The
    layer function is unchanged because the new bases are orthonormal.
    """
    if isinstance(layer, BottleneckDenseLayer):
        if layer.core_mode != "full":
            raise ValidationError("cannot merge into a factored core")
        ra, rc = layer.core.shape
        _check_square_basis(ef.qa, ra, "input")
        _check_square_basis(ef.qs, rc, "output")
        return BottleneckDenseLayer(
            qa=layer.qa @ ef.qa,
            core=ef.qa.T @ layer.core @ ef.qs,
            qs=layer.qs @ ef.qs,
            bias=layer.b.copy(),
        )
    if isinstance(layer, BottleneckConvLayer):
        if layer.core_mode != "full":
            raise ValidationError("cannot merge into a factored core")
        ra, rc = layer.core.shape[0], layer.core.shape[1]
        _check_square_basis(ef.qa, ra, "input")
        _check_square_basis(ef.qs, rc, "output")
        if layer.basis == "channel":
            core = np.einsum("ar,abk,bc->rck", ef.qa, layer.core, ef.qs)
        else:
            core = ef.qa.T @ layer.core @ ef.qs
        return BottleneckConvLayer(
            qa=layer.qa @ ef.qa,
            core=core,
            qs=layer.qs @ ef.qs,
            bias=layer.b.copy(),
            c_in=layer.c_in,
            k=layer.k,
            stride=layer.stride,
            padding=layer.padding,
            basis=layer.basis,
        )
    raise ValidationError(f"cannot merge into layer of type {type(layer).__name__}")


@dataclass
class DepthwiseFactors:
    """Rank-r separable approximation of a channel-basis conv core.

    core[i, j, delta] ~= sum_rho u[i, rho] * v[j, rho] * c[delta, rho].
    trace holds the objective value after init and after each accepted
    sweep; it is non-increasing by construction.
    """

    u: np.ndarray
    v: np.ndarray
    c: np.ndarray
    trace: list = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    def reconstruct(self) -> np.ndarray:
        return np.einsum("ir,jr,dr->ijd", self.u, self.v, self.c)


def _objective(t: np.ndarray, u, v, c) -> float:
    resid = t - np.einsum("ir,jr,dr->ijd", u, v, c)
    return 0.5 * float(np.sum(resid * resid))


def _unfold(t: np.ndarray, mode: int) -> np.ndarray:
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1, order="F")


def _svd_init(t: np.ndarray, rank: int, rng, jitter: float):
    mean_slice = t.mean(axis=2)
    p, _, qt = np.linalg.svd(mean_slice, full_matrices=False)
    u = p[:, :rank].copy()
    v = qt[:rank, :].T.copy()
    if jitter > 0.0:
        u += jitter * rng.standard_normal(u.shape)
        v += jitter * rng.standard_normal(v.shape)
    c = np.einsum("ir,ijd,jr->dr", u, t, v)
    return u, v, c


def _normalize_columns(u, v, c):
    nu = np.linalg.norm(u, axis=0)
    nv = np.linalg.norm(v, axis=0)
    if np.any(nu < COLLAPSE_TOL) or np.any(nv < COLLAPSE_TOL):
        raise SingularityError("separable factor column collapsed to zero")
    return u / nu, v / nv, c * (nu * nv)


def depthwise_decompose(
    layer,
    rank: int,
    seed: int = 0,
    max_iter: int = ALS_MAX_ITER,
    tol: float = ALS_TOL,
) -> DepthwiseFactors:
    """Fit a rank-r separable core by alternating least squares.

    Each sweep solves the three linear subproblems in turn and is
    accepted only if the objective does not increase; an increasing
    sweep is reverted and the fit stops, so the recorded trace is
    monotone.  Collapsed factor columns trigger up to three jittered
    restarts before giving up.
    """
    if not isinstance(layer, BottleneckConvLayer) or layer.basis != "channel":
        raise ValidationError("separable fit needs a channel-basis convolution core")
    if layer.core_mode != "full":
        raise ValidationError("core is already factored")
    t = np.asarray(layer.core, dtype=np.float64)
    ra, rc, kk = t.shape
    if not 1 <= rank <= min(ra, rc):
        raise ValidationError(
            f"rank must lie in [1, {min(ra, rc)}] for core shape {t.shape}"
        )
    last_err = None
    for attempt in range(ALS_RESTARTS + 1):
        rng = np.random.default_rng(seed + attempt)
        jitter = 0.0 if attempt == 0 else 10.0 ** (-3 + attempt)
        try:
            u, v, c = _svd_init(t, rank, rng, jitter)
            u, v, c = _normalize_columns(u, v, c)
            trace = [_objective(t, u, v, c)]
            for _ in range(max_iter):
                prev = (u.copy(), v.copy(), c.copy())
                u = lstsq(khatri_rao(c, v), _unfold(t, 0).T).T
                v = lstsq(khatri_rao(c, u), _unfold(t, 1).T).T
                c = lstsq(khatri_rao(v, u), _unfold(t, 2).T).T
                u, v, c = _normalize_columns(u, v, c)
                obj = _objective(t, u, v, c)
                if obj > trace[-1]:
                    u, v, c = prev
                    break
                improved = trace[-1] - obj
                relative = improved / max(trace[-1], 1e-30)
                trace.append(obj)
                if relative < tol:
                    break
            return DepthwiseFactors(u=u, v=v, c=c, trace=trace)
        except SingularityError as err:
            last_err = err
    raise SingularityError(
        f"separable fit failed after {ALS_RESTARTS} restarts: {last_err}"
    )


def absorb_depthwise(layer, factors: DepthwiseFactors):
    """Fold separable factors into the bases, leaving a per-channel core.

    qa <- qa @ u and qs <- qs @ v; the core becomes the (k*k, rank)
    coefficient table applied channelwise.  The layer function changes
    by the approximation error of the fit.
    """
    if not isinstance(layer, BottleneckConvLayer) or layer.basis != "channel":
        raise ValidationError("separable absorb needs a channel-basis convolution")
    if layer.core_mode != "full":
        raise ValidationError("core is already factored")
    if factors.u.shape[0] != layer.core.shape[0] or factors.v.shape[0] != layer.core.shape[1]:
        raise DimensionError("separable factors do not match the core shape")
    return BottleneckConvLayer(
        qa=layer.qa @ factors.u,
        core=factors.c.copy(),
        qs=layer.qs @ factors.v,
        bias=layer.b.copy(),
        c_in=layer.c_in,
        k=layer.k,
        stride=layer.stride,
        padding=layer.padding,
        basis="channel",
        core_mode="diag",
    )
