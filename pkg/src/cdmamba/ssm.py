"""Selective state-space scan: ZOH discretization, recurrence, adjoint.

The continuous system h' = A h + B x, y = C h is discretized per token with
a zero-order hold: A_bar = exp(dt*A), B_bar = ((exp(dt*A) - 1)/A) * B, where
A is diagonal (stored elementwise) and strictly negative, so |A_bar| < 1 for
any dt > 0. A Taylor branch takes over when |dt*A| < 1e-4 to dodge the 0/0.

``ssm_scan`` is a single autodiff primitive: the forward pass runs the
recurrence h_t = A_bar_t * h_{t-1} + B_bar_t * x_t, y_t = <C_t, h_t> + D*x_t,
and the backward pass is the reverse-time adjoint recurrence, derived by hand
and verified against finite differences.
"""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_node
from .layers import Linear, Module

TAYLOR_THRESHOLD = 1e-4

try:
    if os.environ.get("CDMAMBA_PURE_NUMPY"):
        raise ImportError("compiled kernels disabled by CDMAMBA_PURE_NUMPY")
    from . import _scan_kernels
except ImportError:  # numba unavailable: the numpy path below is the reference
    _scan_kernels = None

_compiled_enabled = True


def set_compiled(on: bool) -> None:
    """Toggle the fused kernels; the numpy recurrence is used when off."""
    global _compiled_enabled
    _compiled_enabled = bool(on)


def compiled_active() -> bool:
    return _compiled_enabled and _scan_kernels is not None


def _small_mask(z: np.ndarray):
    """Boolean mask of lanes needing the Taylor branch, or None if there are none.

    The Taylor region |z| < 1e-4 is rare in practice, so branches are applied
    as sparse fixups rather than full-array where() passes.
    """
    az = np.abs(z)
    if az.min() >= TAYLOR_THRESHOLD:
        return None
    return az < TAYLOR_THRESHOLD


def _discretize(delta: np.ndarray, a: np.ndarray):
    """Elementwise ZOH factors for z = delta*A.

    Returns (z, a_bar, small_mask, b_factor) where b_factor = (exp(z)-1)/A,
    evaluated as delta*(1 + z/2 + z^2/6) when |z| < 1e-4.
    """
    z = delta[..., None] * a
    a_bar = np.exp(z)
    small = _small_mask(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        b_factor = (a_bar - 1.0) / a
    if small is not None:
        zs = z[small]
        ds = np.broadcast_to(delta[..., None], z.shape)[small]
        b_factor[small] = ds * (1.0 + zs / 2.0 + zs * zs / 6.0)
    return z, a_bar, small, b_factor


def zoh_discretize(a: np.ndarray, b: np.ndarray, delta) -> tuple[np.ndarray, np.ndarray]:
    """Discretize diagonal (A[C,N], B[N] or [C,N]) with per-channel dt.

    Returns (A_bar[C,N], B_bar[C,N]). dt must be strictly positive, which the
    softplus parameterization guarantees in the model path.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.atleast_1d(np.asarray(delta, dtype=np.float64))
    if np.any(delta <= 0):
        raise ValueError(f"zoh_discretize: dt must be positive, got min {delta.min()}")
    if a.ndim == 1:
        a = a[None, :]
    if delta.shape == (1,) and a.shape[0] != 1:
        delta = np.broadcast_to(delta, (a.shape[0],))
    _, a_bar, _, b_factor = _discretize(delta, a)
    return a_bar, b_factor * b


def ssm_scan(x: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor,
             d: Tensor | None = None, chunk_size: int | None = None) -> Tensor:
    """Data-dependent linear recurrence over [L, C] tokens.

    x, delta: [L, C]; a: [C, N]; b, c: [L, N]; d: optional [C] direct skip.
    Output shape equals input shape. ``chunk_size`` switches the forward
    recurrence to blockwise operator-composition scans (same math, tree
    evaluation order); the backward sweep is always the sequential adjoint.
    """
    x, delta, a, b, c = map(ad.as_tensor, (x, delta, a, b, c))
    if d is not None:
        d = ad.as_tensor(d)
    length, ch = x.data.shape
    if length < 1:
        raise ValueError("ssm_scan: empty sequence")
    n = a.data.shape[1]
    if delta.data.shape != (length, ch) or a.data.shape != (ch, n) \
            or b.data.shape != (length, n) or c.data.shape != (length, n):
        raise ValueError(
            f"ssm_scan: inconsistent shapes x{x.data.shape} dt{delta.data.shape} "
            f"A{a.data.shape} B{b.data.shape} C{c.data.shape}")
    if d is not None and d.data.shape != (ch,):
        raise ValueError(f"ssm_scan: D must be [{ch}], got {d.data.shape}")

    xd, dd, ad_, bd, cd = x.data, delta.data, a.data, b.data, c.data

    if chunk_size is None and compiled_active():
        dvec = d.data if d is not None else np.zeros(ch)
        a_bar = np.exp(dd[:, :, None] * ad_)
        y, hs = _scan_kernels.scan_fwd(xd, dd, ad_, bd, cd, dvec, d is not None, a_bar)

        def bw(gy):
            gx, gdt, ga, gb, gc, gd = _scan_kernels.scan_bwd(
                gy, xd, dd, ad_, bd, cd, dvec, d is not None, hs, a_bar)
            if d is not None:
                return gx, gdt, ga, gb, gc, gd
            return gx, gdt, ga, gb, gc

        parents = (x, delta, a, b, c) if d is None else (x, delta, a, b, c, d)
        return make_node(y, parents, bw, "ssm_scan")

    _, a_bar, _, b_factor = _discretize(dd, ad_)
    bx = b_factor * bd[:, None, :]
    bx *= xd[:, :, None]  # B_bar_t * x_t, [L,C,N]
    del b_factor

    hs = np.empty((length, ch, n))
    if chunk_size is None:
        h = np.zeros((ch, n))
        for t in range(length):
            h *= a_bar[t]
            h += bx[t]
            hs[t] = h
    else:
        h = np.zeros((ch, n))
        for s in range(0, length, chunk_size):
            e = min(s + chunk_size, length)
            acc_a = a_bar[s:e].copy()
            acc_b = bx[s:e].copy()
            step = 1
            while step < e - s:
                # compose affine maps: (a_hi, b_hi) after (a_lo, b_lo)
                a_lo, b_lo = acc_a[:-step], acc_b[:-step]
                acc_b[step:] = acc_a[step:] * b_lo + acc_b[step:]
                acc_a[step:] = acc_a[step:] * a_lo
                step *= 2
            hs[s:e] = acc_a * h + acc_b
            h = hs[e - 1]

    y = np.einsum("ln,lcn->lc", cd, hs)
    if d is not None:
        y = y + d.data * xd

    def bw(gy):
        # a_bar was cached by the forward pass; everything else is recomputed
        # with sparse Taylor fixups instead of full where() passes
        z = dd[:, :, None] * ad_
        small = _small_mask(z)
        with np.errstate(divide="ignore", invalid="ignore"):
            b_factor = (a_bar - 1.0) / ad_
        if small is not None:
            zs = z[small]
            ds = np.broadcast_to(dd[:, :, None], z.shape)[small]
            b_factor[small] = ds * (1.0 + zs / 2.0 + zs * zs / 6.0)

        gy_c = gy[:, :, None] * cd[:, None, :]
        lam = np.empty_like(hs)  # adjoint of h_t
        acc = gy_c[length - 1].copy()
        lam[length - 1] = acc
        for t in range(length - 2, -1, -1):
            acc *= a_bar[t + 1]
            acc += gy_c[t]
            lam[t] = acc
        del gy_c

        b_bar = b_factor * bd[:, None, :]
        gx = np.einsum("lcn,lcn->lc", lam, b_bar)
        del b_bar
        gc = np.einsum("lc,lcn->ln", gy, hs)

        g_b_bar = lam * xd[:, :, None]
        gb = np.einsum("lcn,lcn->ln", g_b_bar, b_factor)
        g_b_bar *= bd[:, None, :]  # now holds the b_factor adjoint

        # lam_h = lam_t * h_{t-1} * exp(z), shared by the dt and A chains
        lam_h = np.empty_like(hs)
        lam_h[0] = 0.0
        np.multiply(lam[1:], hs[:-1], out=lam_h[1:])
        del lam
        lam_h *= a_bar

        # d(b_factor)/d(dt) is exp(z) exactly, 1 + z + z^2/2 in the Taylor lanes
        dfac_ddt = a_bar
        if small is not None:
            dfac_ddt = a_bar.copy()
            dfac_ddt[small] = 1.0 + zs + zs * zs / 2.0
        gdt = np.einsum("lcn,cn->lc", lam_h, ad_) \
            + np.einsum("lcn,lcn->lc", g_b_bar, dfac_ddt)

        # d(b_factor)/dA = (dt*A*exp(z) - exp(z) + 1)/A^2, dt^2*(1/2 + z/3) small
        dfac_da = (z - 1.0) * a_bar
        dfac_da += 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            dfac_da /= ad_ * ad_
        if small is not None:
            dfac_da[small] = ds * ds * (0.5 + zs / 3.0)
        ga = np.einsum("lcn,lc->cn", lam_h, dd) \
            + np.einsum("lcn,lcn->cn", g_b_bar, dfac_da)

        if d is not None:
            gx += gy * d.data
            gd = (gy * xd).sum(axis=0)
            return gx, gdt, ga, gb, gc, gd
        return gx, gdt, ga, gb, gc

    parents = (x, delta, a, b, c) if d is None else (x, delta, a, b, c, d)
    return make_node(y, parents, bw, "ssm_scan")


def scan_convolution_oracle(x: np.ndarray, a_bar: np.ndarray, b_bar: np.ndarray,
                            c: np.ndarray) -> np.ndarray:
    """Time-invariant reference: y_t = sum_tau C A_bar^(t-tau) B_bar x_tau.

    Materializes the full convolution kernel explicitly; a test oracle for
    the recurrence, never a runtime path. Parameters must be constant [N]
    vectors; anything with a time axis is rejected.
    """
    x = np.asarray(x, dtype=np.float64)
    a_bar, b_bar, c = (np.asarray(v, dtype=np.float64) for v in (a_bar, b_bar, c))
    if a_bar.ndim != 1 or b_bar.ndim != 1 or c.ndim != 1:
        raise ValueError("scan_convolution_oracle needs time-invariant [N] parameters")
    squeeze = x.ndim == 2
    if squeeze:
        if x.shape[1] != 1:
            raise ValueError(f"oracle handles a single channel, got {x.shape}")
        x = x[:, 0]
    length = x.shape[0]
    pows = np.ones((length, a_bar.shape[0]))
    if length > 1:
        pows[1:] = np.cumprod(np.tile(a_bar, (length - 1, 1)), axis=0)
    kernel = pows @ (c * b_bar)
    y = np.convolve(x, kernel)[:length]
    return y[:, None] if squeeze else y


class SelectiveSSM(Module):
    """Mamba-style SSM: per-token dt/B/C from projections of the input.

    A is diagonal real, initialized to -(n+1) per state (stored as log(-A)),
    dt = softplus(affine(x)) with the bias placed so the initial dt lands
    log-uniformly in [dt_min, dt_max]. D is an optional direct passthrough.
    """

    def __init__(self, d_inner: int, d_state: int, rng: np.random.Generator,
                 skip: bool = True, dt_min: float = 1e-3, dt_max: float = 1e-1):
        if d_inner < 1 or d_state < 1:
            raise ValueError(f"bad SSM dims: d_inner={d_inner}, d_state={d_state}")
        a0 = np.tile(np.arange(1.0, d_state + 1.0), (d_inner, 1))
        self.A_log = Tensor(np.log(a0), requires_grad=True)
        self.dt_proj = Linear(d_inner, d_inner, rng)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
        self.dt_proj.bias.data[:] = dt + np.log(-np.expm1(-dt))  # softplus inverse
        self.b_proj = Linear(d_inner, d_state, rng, bias=False)
        self.c_proj = Linear(d_inner, d_state, rng, bias=False)
        self.skip = skip
        self.D = Tensor(np.ones(d_inner), requires_grad=True) if skip else None

    def forward(self, x: Tensor, chunk_size: int | None = None) -> Tensor:
        delta = ad.softplus(self.dt_proj(x))
        b = self.b_proj(x)
        c = self.c_proj(x)
        a = ad.scale(ad.exp(self.A_log), -1.0)
        return ssm_scan(x, delta, a, b, c, self.D if self.skip else None,
                        chunk_size=chunk_size)
