"""Compiled direct-convolution kernels.

The conv hot loops are memory-bound as im2col matrix products at this
project's channel widths, so the default path is a set of numba-compiled
direct kernels with a contiguous inner axis; they are exact reorderings
of the same sums. The kernels are compiled serial: per-op thread pools
cost more than they return at desk scale, and serial kernels are
bit-deterministic under any thread configuration. Set CLSEG_NO_NUMBA=1
to force the numpy fallback in layers.py.
"""

from __future__ import annotations

import os

HAVE_NUMBA = False
if not os.environ.get("CLSEG_NO_NUMBA"):
    try:
        from numba import njit
        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        pass

if HAVE_NUMBA:

    @njit(fastmath=True, cache=True)
    def conv3d_forward_kernel(x, w, out):
        B, Ci, D, H, W = x.shape
        Co, _, k, _, _ = w.shape
        oD, oH, oW = D - k + 1, H - k + 1, W - k + 1
        for b in range(B):
            for o in range(Co):
                for z in range(oD):
                    for y in range(oH):
                        acc = out[b, o, z, y]
                        acc[:] = 0.0
                        for i in range(Ci):
                            for dz in range(k):
                                for dy in range(k):
                                    row = x[b, i, z + dz, y + dy]
                                    for dx in range(k):
                                        wv = w[o, i, dz, dy, dx]
                                        for t in range(oW):
                                            acc[t] += wv * row[dx + t]

    @njit(fastmath=True, cache=True)
    def conv3d_grad_weight_kernel(x, g, gw):
        # one pass over g per output channel; the (i, dz, dy, dx) taps reuse
        # grad rows from registers/L1 instead of rescanning g per tap
        B, Ci, D, H, W = x.shape
        Co = g.shape[1]
        k = gw.shape[2]
        oD, oH, oW = g.shape[2], g.shape[3], g.shape[4]
        gw[:] = 0.0
        for o in range(Co):
            acc = gw[o]
            for b in range(B):
                for z in range(oD):
                    for y in range(oH):
                        grow = g[b, o, z, y]
                        for i in range(Ci):
                            for dz in range(k):
                                for dy in range(k):
                                    xrow = x[b, i, z + dz, y + dy]
                                    for dx in range(k):
                                        s = grow[0] * 0.0
                                        for t in range(oW):
                                            s += grow[t] * xrow[dx + t]
                                        acc[i, dz, dy, dx] += s

    @njit(fastmath=True, cache=True)
    def conv3d_grad_input_kernel(g, w, gx):
        B, Co, oD, oH, oW = g.shape
        Ci = gx.shape[1]
        k = w.shape[2]
        gx[:] = 0.0
        for b in range(B):
            for i in range(Ci):
                gxc = gx[b, i]
                for o in range(Co):
                    for z in range(oD):
                        for y in range(oH):
                            grow = g[b, o, z, y]
                            for dz in range(k):
                                for dy in range(k):
                                    orow = gxc[z + dz, y + dy]
                                    for dx in range(k):
                                        wv = w[o, i, dz, dy, dx]
                                        for t in range(oW):
                                            orow[dx + t] += wv * grow[t]
