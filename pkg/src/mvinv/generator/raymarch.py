"""Emission-absorption ray marching through a mixture of axis-aligned Gaussian blobs.

The fused kernels below evaluate every blob along a ray with a geometric
recurrence (samples are evenly spaced, so the Gaussian factor between two
consecutive samples is itself a Gaussian in the sample index). The backward
pass is derived by hand and recomputes the forward quantities per ray, so
nothing besides the inputs is kept alive between the two passes.

``render_reference`` is a plain autograd implementation of the same model and
is used as an independent check of the fused kernels.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np
import torch

T_FLOOR = 1e-8
# exponent cutoff: blobs contribute exp(-CUTOFF / 2) or less outside the window
CUTOFF = 80.0
COLOR_EPS = 1e-8


@nb.njit(cache=True, fastmath=True, inline="always")
def _window(a, b, c, t0, dt, S):
    # sample index range where a t^2 + b t + c < CUTOFF
    tv = -b / (2.0 * a)
    qmin = c - b * b / (4.0 * a)
    if qmin >= CUTOFF:
        return 0, -1
    half = math.sqrt((CUTOFF - qmin) / a)
    lo = int(math.ceil((tv - half - t0) / dt))
    hi = int(math.floor((tv + half - t0) / dt))
    if lo < 0:
        lo = 0
    if hi > S - 1:
        hi = S - 1
    return lo, hi


@nb.njit(cache=True, fastmath=True)
def _blob_profile(origin, dirs_p, mu, inv_s, amp, t0, dt, S, out, coef):
    """Fill out[s, k] = amp_k * exp(-q_k(t_s) / 2) for one ray."""
    K = mu.shape[0]
    for k in range(K):
        a = 0.0
        b = 0.0
        c = 0.0
        for j in range(3):
            ds = dirs_p[j] * inv_s[k, j]
            rs = (origin[j] - mu[k, j]) * inv_s[k, j]
            a += ds * ds
            b += 2.0 * ds * rs
            c += rs * rs
        coef[k, 0] = a
        coef[k, 1] = b
        coef[k, 2] = c
        for s in range(S):
            out[s, k] = 0.0
        lo, hi = _window(a, b, c, t0, dt, S)
        if hi < lo:
            continue
        tl = t0 + lo * dt
        h = amp[k] * math.exp(-0.5 * (a * tl * tl + b * tl + c))
        ratio = math.exp(-0.5 * (a * (2.0 * tl * dt + dt * dt) + b * dt))
        step = math.exp(-a * dt * dt)
        for s in range(lo, hi + 1):
            out[s, k] = h
            h *= ratio
            ratio *= step


@nb.njit(cache=True, fastmath=True)
def _forward(origin, dirs, mu, inv_s, amp, alb, bg, t0, dt, S, far, img, depth):
    B, P, _ = dirs.shape
    K = mu.shape[1]
    g = np.empty((S, K))
    coef = np.empty((K, 3))
    for bi in range(B):
        for p in range(P):
            _blob_profile(origin[bi], dirs[bi, p], mu[bi], inv_s[bi], amp[bi], t0, dt, S, g, coef)
            trans = 1.0
            r0 = 0.0
            r1 = 0.0
            r2 = 0.0
            dd = 0.0
            for s in range(S):
                sig = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                for k in range(K):
                    gk = g[s, k]
                    sig += gk
                    n0 += gk * alb[bi, k, 0]
                    n1 += gk * alb[bi, k, 1]
                    n2 += gk * alb[bi, k, 2]
                T = trans if trans > T_FLOOR else T_FLOOR
                e = math.exp(-dt * sig)
                w = (1.0 - e) * T
                inv = w / (sig + COLOR_EPS)
                r0 += n0 * inv
                r1 += n1 * inv
                r2 += n2 * inv
                dd += w * (t0 + s * dt)
                trans *= e
            Tf = trans if trans > T_FLOOR else T_FLOOR
            img[bi, p, 0] = r0 + Tf * bg[0]
            img[bi, p, 1] = r1 + Tf * bg[1]
            img[bi, p, 2] = r2 + Tf * bg[2]
            depth[bi, p] = dd + Tf * far


@nb.njit(cache=True, fastmath=True)
def _backward(origin, dirs, mu, inv_s, amp, alb, bg, t0, dt, S, far,
              g_img, g_depth, g_mu, g_inv, g_amp, g_alb):
    B, P, _ = dirs.shape
    K = mu.shape[1]
    g = np.empty((S, K))
    coef = np.empty((K, 3))
    sig = np.empty(S)
    col = np.empty((S, 3))
    Ts = np.empty(S)
    es = np.empty(S)
    live = np.empty(S, np.bool_)
    # per-blob sums of dL/dq weighted by t^0, t^1, t^2
    qs = np.empty((K, 3))
    for bi in range(B):
        for p in range(P):
            _blob_profile(origin[bi], dirs[bi, p], mu[bi], inv_s[bi], amp[bi], t0, dt, S, g, coef)
            gi0 = g_img[bi, p, 0]
            gi1 = g_img[bi, p, 1]
            gi2 = g_img[bi, p, 2]
            gd = g_depth[bi, p]
            trans = 1.0
            for s in range(S):
                sg = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                for k in range(K):
                    gk = g[s, k]
                    sg += gk
                    n0 += gk * alb[bi, k, 0]
                    n1 += gk * alb[bi, k, 1]
                    n2 += gk * alb[bi, k, 2]
                inv = 1.0 / (sg + COLOR_EPS)
                sig[s] = sg
                col[s, 0] = n0 * inv
                col[s, 1] = n1 * inv
                col[s, 2] = n2 * inv
                live[s] = trans > T_FLOOR
                Ts[s] = trans if live[s] else T_FLOOR
                es[s] = math.exp(-dt * sg)
                trans *= es[s]
            acc = 0.0
            if trans > T_FLOOR:
                acc = trans * (gi0 * bg[0] + gi1 * bg[1] + gi2 * bg[2] + gd * far)
            for k in range(K):
                qs[k, 0] = 0.0
                qs[k, 1] = 0.0
                qs[k, 2] = 0.0
            for s in range(S - 1, -1, -1):
                ts = t0 + s * dt
                E = gi0 * col[s, 0] + gi1 * col[s, 1] + gi2 * col[s, 2] + gd * ts
                w = (1.0 - es[s]) * Ts[s]
                d_sig = dt * es[s] * Ts[s] * E - dt * acc
                if live[s]:
                    acc += w * E
                wn = w / (sig[s] + COLOR_EPS)
                for k in range(K):
                    gk = g[s, k]
                    if gk == 0.0:
                        continue
                    a0 = alb[bi, k, 0]
                    a1 = alb[bi, k, 1]
                    a2 = alb[bi, k, 2]
                    dg = d_sig + wn * (gi0 * (a0 - col[s, 0]) + gi1 * (a1 - col[s, 1]) + gi2 * (a2 - col[s, 2]))
                    g_alb[bi, k, 0] += wn * gi0 * gk
                    g_alb[bi, k, 1] += wn * gi1 * gk
                    g_alb[bi, k, 2] += wn * gi2 * gk
                    g_amp[bi, k] += dg * gk / amp[bi, k]
                    dq = -0.5 * dg * gk
                    qs[k, 0] += dq
                    qs[k, 1] += dq * ts
                    qs[k, 2] += dq * ts * ts
            for k in range(K):
                for j in range(3):
                    sj = inv_s[bi, k, j]
                    rj = origin[bi, j] - mu[bi, k, j]
                    dj = dirs[bi, p, j]
                    g_mu[bi, k, j] += -2.0 * sj * sj * (rj * qs[k, 0] + dj * qs[k, 1])
                    g_inv[bi, k, j] += 2.0 * sj * (rj * rj * qs[k, 0] + 2.0 * rj * dj * qs[k, 1] + dj * dj * qs[k, 2])


def _np(x: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(x.detach().cpu().numpy())


class _RayMarch(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mu, inv_s, amp, albedo, origin, dirs, bg, near, far, samples):
        dt = (far - near) / samples
        t0 = near + 0.5 * dt
        arrays = [_np(x) for x in (origin, dirs, mu, inv_s, amp, albedo, bg)]
        B, P = dirs.shape[:2]
        img = np.empty((B, P, 3), dtype=arrays[0].dtype)
        depth = np.empty((B, P), dtype=arrays[0].dtype)
        if all(np.isfinite(a).all() for a in arrays):
            _forward(*arrays, t0, dt, samples, far, img, depth)
        else:
            # the kernel assumes finite blobs; propagate NaN so callers can detect it
            img.fill(np.nan)
            depth.fill(np.nan)
        ctx.save_for_backward(mu, inv_s, amp, albedo, origin, dirs, bg)
        ctx.consts = (t0, dt, samples, far)
        return torch.from_numpy(img), torch.from_numpy(depth)

    @staticmethod
    def backward(ctx, grad_img, grad_depth):
        mu, inv_s, amp, albedo, origin, dirs, bg = ctx.saved_tensors
        t0, dt, samples, far = ctx.consts
        arrays = [_np(x) for x in (origin, dirs, mu, inv_s, amp, albedo, bg)]
        dtype = arrays[2].dtype
        grads = [np.zeros(x.shape, dtype=dtype) for x in arrays[2:6]]
        g_img = _np(grad_img).astype(dtype, copy=False) if grad_img is not None else np.zeros(dirs.shape, dtype)
        g_depth = (_np(grad_depth).astype(dtype, copy=False) if grad_depth is not None
                   else np.zeros(dirs.shape[:2], dtype))
        _backward(*arrays, t0, dt, samples, far, g_img, g_depth, *grads)
        out = [torch.from_numpy(x) for x in grads]
        return (*out, None, None, None, None, None, None)


def render_blobs(mu, inv_s, amp, albedo, origin, dirs, bg, near, far, samples):
    """Composite a batch of blob scenes along pre-computed rays.

    Shapes: ``mu``/``inv_s``/``albedo`` are (B, K, 3), ``amp`` is (B, K),
    ``origin`` is (B, 3), ``dirs`` is (B, P, 3) with unit rows and ``bg`` is (3,).
    Returns ``(rgb, depth)`` of shapes (B, P, 3) and (B, P).
    """
    return _RayMarch.apply(mu, inv_s, amp, albedo, origin, dirs, bg, near, far, samples)


def render_reference(mu, inv_s, amp, albedo, origin, dirs, bg, near, far, samples):
    """Same model as :func:`render_blobs` written with plain autograd ops (slow)."""
    dt = (far - near) / samples
    t = near + dt * (torch.arange(samples, dtype=mu.dtype) + 0.5)
    pts = origin[:, None, None, :] + dirs[:, :, None, :] * t[None, None, :, None]  # B,P,S,3
    u = (pts[:, :, :, None, :] - mu[:, None, None, :, :]) * inv_s[:, None, None, :, :]
    g = amp[:, None, None, :] * torch.exp(-0.5 * (u * u).sum(-1))  # B,P,S,K
    sigma = g.sum(-1)
    color = torch.einsum("bpsk,bkc->bpsc", g, albedo) / (sigma[..., None] + COLOR_EPS)
    tau = torch.cumsum(dt * sigma, dim=-1)
    trans = torch.exp(-(tau - dt * sigma)).clamp_min(T_FLOOR)
    weights = -torch.expm1(-dt * sigma) * trans
    t_final = torch.exp(-tau[..., -1]).clamp_min(T_FLOOR)
    rgb = (weights[..., None] * color).sum(-2) + t_final[..., None] * bg
    depth = (weights * t).sum(-1) + t_final * far
    return rgb, depth
