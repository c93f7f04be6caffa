"""Compiled inner loops for the sampling hot path.

The sandbox-grade numpy fallback is exact but an order of magnitude
slower; numba is optional and changes nothing semantically. All kernels
are single-threaded and sequential, so results are deterministic.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is present in normal installs
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn

        return deco


@njit(cache=True)
def pool_forward(maps, map_idx, coords, weights, out):
    """out[p,h,:] += sum_s weights[p,h,s] * bilinear(maps[map_idx[p,h]], coords[p,h,s]).

    Out-of-map corners read as zeros (zero padding).
    """
    num_p, num_h = map_idx.shape
    ns = coords.shape[2]
    _, hh, ww, cc = maps.shape
    for p in range(num_p):
        for h in range(num_h):
            m = map_idx[p, h]
            for s in range(ns):
                r = coords[p, h, s, 0]
                c = coords[p, h, s, 1]
                r0 = int(np.floor(r))
                c0 = int(np.floor(c))
                fr = r - r0
                fc = c - c0
                w = weights[p, h, s]
                a00 = w * (1.0 - fr) * (1.0 - fc)
                a01 = w * (1.0 - fr) * fc
                a10 = w * fr * (1.0 - fc)
                a11 = w * fr * fc
                if 0 <= r0 and r0 + 1 < hh and 0 <= c0 and c0 + 1 < ww:
                    f00 = maps[m, r0, c0]
                    f01 = maps[m, r0, c0 + 1]
                    f10 = maps[m, r0 + 1, c0]
                    f11 = maps[m, r0 + 1, c0 + 1]
                    for ch in range(cc):
                        out[p, h, ch] += a00 * f00[ch] + a01 * f01[ch] + a10 * f10[ch] + a11 * f11[ch]
                else:
                    r0v = 0 <= r0 < hh
                    r1v = 0 <= r0 + 1 < hh
                    c0v = 0 <= c0 < ww
                    c1v = 0 <= c0 + 1 < ww
                    for ch in range(cc):
                        val = 0.0
                        if r0v and c0v:
                            val += a00 * maps[m, r0, c0, ch]
                        if r0v and c1v:
                            val += a01 * maps[m, r0, c0 + 1, ch]
                        if r1v and c0v:
                            val += a10 * maps[m, r0 + 1, c0, ch]
                        if r1v and c1v:
                            val += a11 * maps[m, r0 + 1, c0 + 1, ch]
                        out[p, h, ch] += val


@njit(cache=True)
def pool_backward(maps, map_idx, coords, weights, gout, dmaps, dcoords, dweights):
    """Reverse of pool_forward; accumulates into dmaps, fills dcoords/dweights."""
    num_p, num_h = map_idx.shape
    ns = coords.shape[2]
    _, hh, ww, cc = maps.shape
    for p in range(num_p):
        for h in range(num_h):
            m = map_idx[p, h]
            for s in range(ns):
                r = coords[p, h, s, 0]
                c = coords[p, h, s, 1]
                r0 = int(np.floor(r))
                c0 = int(np.floor(c))
                fr = r - r0
                fc = c - c0
                w = weights[p, h, s]
                a00 = (1.0 - fr) * (1.0 - fc)
                a01 = (1.0 - fr) * fc
                a10 = fr * (1.0 - fc)
                a11 = fr * fc
                dot_v = 0.0
                dfr = 0.0
                dfc = 0.0
                if 0 <= r0 and r0 + 1 < hh and 0 <= c0 and c0 + 1 < ww:
                    f00r = maps[m, r0, c0]
                    f01r = maps[m, r0, c0 + 1]
                    f10r = maps[m, r0 + 1, c0]
                    f11r = maps[m, r0 + 1, c0 + 1]
                    d00 = dmaps[m, r0, c0]
                    d01 = dmaps[m, r0, c0 + 1]
                    d10 = dmaps[m, r0 + 1, c0]
                    d11 = dmaps[m, r0 + 1, c0 + 1]
                    for ch in range(cc):
                        go = gout[p, h, ch]
                        dv = w * go
                        f00 = f00r[ch]
                        f01 = f01r[ch]
                        f10 = f10r[ch]
                        f11 = f11r[ch]
                        dot_v += (a00 * f00 + a01 * f01 + a10 * f10 + a11 * f11) * go
                        dfr += (-(1.0 - fc) * f00 - fc * f01 + (1.0 - fc) * f10 + fc * f11) * dv
                        dfc += (-(1.0 - fr) * f00 + (1.0 - fr) * f01 - fr * f10 + fr * f11) * dv
                        d00[ch] += a00 * dv
                        d01[ch] += a01 * dv
                        d10[ch] += a10 * dv
                        d11[ch] += a11 * dv
                else:
                    r0v = 0 <= r0 < hh
                    r1v = 0 <= r0 + 1 < hh
                    c0v = 0 <= c0 < ww
                    c1v = 0 <= c0 + 1 < ww
                    for ch in range(cc):
                        go = gout[p, h, ch]
                        dv = w * go
                        f00 = maps[m, r0, c0, ch] if (r0v and c0v) else 0.0
                        f01 = maps[m, r0, c0 + 1, ch] if (r0v and c1v) else 0.0
                        f10 = maps[m, r0 + 1, c0, ch] if (r1v and c0v) else 0.0
                        f11 = maps[m, r0 + 1, c0 + 1, ch] if (r1v and c1v) else 0.0
                        dot_v += (a00 * f00 + a01 * f01 + a10 * f10 + a11 * f11) * go
                        dfr += (-(1.0 - fc) * f00 - fc * f01 + (1.0 - fc) * f10 + fc * f11) * dv
                        dfc += (-(1.0 - fr) * f00 + (1.0 - fr) * f01 - fr * f10 + fr * f11) * dv
                        if r0v and c0v:
                            dmaps[m, r0, c0, ch] += a00 * dv
                        if r0v and c1v:
                            dmaps[m, r0, c0 + 1, ch] += a01 * dv
                        if r1v and c0v:
                            dmaps[m, r0 + 1, c0, ch] += a10 * dv
                        if r1v and c1v:
                            dmaps[m, r0 + 1, c0 + 1, ch] += a11 * dv
                dweights[p, h, s] = dot_v
                dcoords[p, h, s, 0] = dfr
                dcoords[p, h, s, 1] = dfc


def pool_forward_numpy(maps, map_idx, coords, weights, out):
    """Vectorized reference used when numba is unavailable."""
    num_p, num_h = map_idx.shape
    ns = coords.shape[2]
    nm, hh, ww, cc = maps.shape
    flat = maps.reshape(nm * hh * ww, cc)
    r = coords[..., 0].reshape(-1)
    c = coords[..., 1].reshape(-1)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr = r - r0
    fc = c - c0
    base = (np.repeat(map_idx, ns).reshape(-1)) * (hh * ww)
    acc = np.zeros((len(r), cc))
    for dr, dc_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        ri = r0 + dr
        ci = c0 + dc_
        valid = (ri >= 0) & (ri < hh) & (ci >= 0) & (ci < ww)
        wgt = (fr if dr else 1.0 - fr) * (fc if dc_ else 1.0 - fc) * valid
        idx = base + np.clip(ri, 0, hh - 1) * ww + np.clip(ci, 0, ww - 1)
        acc += wgt[:, None] * flat[idx]
    pooled = (acc.reshape(num_p, num_h, ns, cc) * weights[..., None]).sum(axis=2)
    out += pooled


def pool_backward_numpy(maps, map_idx, coords, weights, gout, dmaps, dcoords, dweights):
    num_p, num_h = map_idx.shape
    ns = coords.shape[2]
    nm, hh, ww, cc = maps.shape
    flat = maps.reshape(nm * hh * ww, cc)
    r = coords[..., 0].reshape(-1)
    c = coords[..., 1].reshape(-1)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr = r - r0
    fc = c - c0
    base = (np.repeat(map_idx, ns).reshape(-1)) * (hh * ww)
    g_per_sample = np.repeat(gout.reshape(num_p * num_h, 1, cc), ns, axis=1).reshape(-1, cc)
    w_flat = weights.reshape(-1)
    dmaps_flat = dmaps.reshape(nm * hh * ww, cc)
    vals = np.zeros((len(r), cc))
    dfr = np.zeros(len(r))
    dfc = np.zeros(len(r))
    for dr, dc_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        ri = r0 + dr
        ci = c0 + dc_
        valid = (ri >= 0) & (ri < hh) & (ci >= 0) & (ci < ww)
        wr = fr if dr else 1.0 - fr
        wc = fc if dc_ else 1.0 - fc
        idx = base + np.clip(ri, 0, hh - 1) * ww + np.clip(ci, 0, ww - 1)
        corner = flat[idx] * valid[:, None]
        vals += (wr * wc)[:, None] * corner
        dv = (w_flat * 1.0)[:, None] * g_per_sample
        dot = (corner * dv).sum(axis=1)
        dfr += (1.0 if dr else -1.0) * wc * dot
        dfc += (1.0 if dc_ else -1.0) * wr * dot
        contrib = (wr * wc * w_flat)[:, None] * g_per_sample * valid[:, None]
        np.add.at(dmaps_flat, idx, contrib)
    dweights[...] = (vals * g_per_sample).sum(axis=1).reshape(num_p, num_h, ns)
    dcoords[..., 0] = dfr.reshape(num_p, num_h, ns)
    dcoords[..., 1] = dfc.reshape(num_p, num_h, ns)
