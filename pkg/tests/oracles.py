"""Slow, obviously-correct reference implementations used as test oracles."""

import itertools
import math

import numpy as np


def conv3d_loops(x, w, b, stride, padding, groups):
    """Direct cross-correlation with explicit loops over every index."""
    nb, ci, d, h, wd = x.shape
    co, cig, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    od = (d + 2 * pd - kd) // sd + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    cog = co // groups
    out = np.zeros((nb, co, od, oh, ow))
    for n in range(nb):
        for o in range(co):
            g = o // cog
            for z, y, q in itertools.product(range(od), range(oh), range(ow)):
                acc = 0.0 if b is None else float(b[o])
                for c in range(cig):
                    for a, e, f in itertools.product(range(kd), range(kh), range(kw)):
                        zi, yi, qi = z * sd + a - pd, y * sh + e - ph, q * sw + f - pw
                        if 0 <= zi < d and 0 <= yi < h and 0 <= qi < wd:
                            acc += x[n, g * cig + c, zi, yi, qi] * w[o, c, a, e, f]
                out[n, o, z, y, q] = acc
    return out


def conv_transpose3d_scatter(x, w, b, stride, padding, groups, output_padding):
    """Transposed convolution as a scatter: each input voxel stamps the kernel.

    ``w`` has layout ``[C_in, C_out // groups, k, k, k]``.
    """
    nb, ci, d, h, wd = x.shape
    _, cog, kd, kh, kw = w.shape
    co = cog * groups
    cig = ci // groups
    ext = [
        (n - 1) * s - 2 * p + k + op
        for n, s, p, k, op in zip((d, h, wd), stride, padding, (kd, kh, kw), output_padding)
    ]
    full = np.zeros((nb, co, ext[0] + 2 * padding[0], ext[1] + 2 * padding[1], ext[2] + 2 * padding[2]))
    for n in range(nb):
        for c in range(ci):
            g = c // cig
            for z, y, q in itertools.product(range(d), range(h), range(wd)):
                v = x[n, c, z, y, q]
                for o in range(cog):
                    for a, e, f in itertools.product(range(kd), range(kh), range(kw)):
                        zz, yy, qq = z * stride[0] + a, y * stride[1] + e, q * stride[2] + f
                        if zz < full.shape[2] and yy < full.shape[3] and qq < full.shape[4]:
                            full[n, g * cog + o, zz, yy, qq] += v * w[c, o, a, e, f]
    out = full[:, :, padding[0]:padding[0] + ext[0], padding[1]:padding[1] + ext[1], padding[2]:padding[2] + ext[2]]
    if b is not None:
        out = out + np.asarray(b).reshape(1, -1, 1, 1, 1)
    return out


def instance_norm_scalar(x, gamma, beta, eps):
    out = np.empty_like(x, dtype=np.float64)
    for n in range(x.shape[0]):
        for c in range(x.shape[1]):
            vals = [float(v) for v in x[n, c].ravel()]
            mu = sum(vals) / len(vals)
            var = sum((v - mu) ** 2 for v in vals) / len(vals)
            out[n, c] = (x[n, c] - mu) / math.sqrt(var + eps) * gamma[c] + beta[c]
    return out


def grn_scalar(x, gamma, beta, eps, mode="sum"):
    out = np.empty_like(x, dtype=np.float64)
    nc = x.shape[1]
    for n in range(x.shape[0]):
        norms = [math.sqrt(sum(float(v) ** 2 for v in x[n, c].ravel())) for c in range(nc)]
        div = sum(norms) if mode == "sum" else sum(norms) / nc
        for c in range(nc):
            ratio = norms[c] / (div + eps)
            out[n, c] = gamma[c] * x[n, c] * ratio + beta[c] + x[n, c]
    return out


def gelu_scalar(v):
    return v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))


def softmax_scalar(logits):
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    s = sum(e)
    return [v / s for v in e]


def dsc_loops(pred, gt):
    inter = sp = sg = 0
    for p, g in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel()):
        inter += int(bool(p) and bool(g))
        sp += int(bool(p))
        sg += int(bool(g))
    return 1.0 if sp + sg == 0 else 2.0 * inter / (sp + sg)


def surface_loops(mask):
    """Foreground voxels with at least one 6-neighbour outside the mask or the volume."""
    mask = np.asarray(mask, dtype=bool)
    pts = []
    for idx in itertools.product(*(range(n) for n in mask.shape)):
        if not mask[idx]:
            continue
        for axis in range(3):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                if not 0 <= nb[axis] < mask.shape[axis] or not mask[tuple(nb)]:
                    pts.append(idx)
                    break
            else:
                continue
            break
    return pts


def nsd_all_pairs(pred, gt, tol, spacing=(1.0, 1.0, 1.0)):
    sp, sg = surface_loops(pred), surface_loops(gt)
    if not sp and not sg:
        return 1.0
    if not sp or not sg:
        return 0.0

    def close(p, others):
        return any(
            math.sqrt(sum(((a - b) * s) ** 2 for a, b, s in zip(p, q, spacing))) <= tol for q in others
        )

    hits = sum(close(p, sg) for p in sp) + sum(close(q, sp) for q in sg)
    return hits / (len(sp) + len(sg))


# -- straight-line network oracle --------------------------------------------------
# Vectorised over voxels but written independently of the library kernels: convs
# are shift-and-add over kernel taps, transposed convs scatter each tap.


def _conv_taps(x, w, b, stride, pad, groups):
    nb, ci, *ext = x.shape
    co, cig, k = w.shape[0], w.shape[1], w.shape[2]
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * 3)
    out_ext = [(n + 2 * pad - k) // stride + 1 for n in ext]
    out = np.zeros((nb, co, *out_ext))
    cog = co // groups
    for g in range(groups):
        xs = xp[:, g * cig:(g + 1) * cig]
        ws = w[g * cog:(g + 1) * cog]
        for a, e, f in itertools.product(range(k), repeat=3):
            win = xs[:, :, a:a + stride * out_ext[0]:stride, e:e + stride * out_ext[1]:stride,
                     f:f + stride * out_ext[2]:stride]
            out[:, g * cog:(g + 1) * cog] += np.einsum("bcxyz,oc->boxyz", win, ws[:, :, a, e, f])
    return out + b.reshape(1, -1, 1, 1, 1)


def _tconv_taps(x, w, b, stride, pad, groups, out_pad):
    nb, ci, *ext = x.shape
    cog, k = w.shape[1], w.shape[2]
    cig = ci // groups
    out_ext = [(n - 1) * stride - 2 * pad + k + out_pad for n in ext]
    full = np.zeros((nb, cog * groups, *[n + 2 * pad + stride for n in out_ext]))
    for g in range(groups):
        xs = x[:, g * cig:(g + 1) * cig]
        ws = w[g * cig:(g + 1) * cig]
        for a, e, f in itertools.product(range(k), repeat=3):
            full[:, g * cog:(g + 1) * cog, a:a + stride * ext[0]:stride, e:e + stride * ext[1]:stride,
                 f:f + stride * ext[2]:stride] += np.einsum("bcxyz,co->boxyz", xs, ws[:, :, a, e, f])
    crop = full[:, :, pad:pad + out_ext[0], pad:pad + out_ext[1], pad:pad + out_ext[2]]
    return crop + b.reshape(1, -1, 1, 1, 1)


def _block(x, p, pre, mode, grn=True):
    from scipy.special import erf

    c = x.shape[1]
    w = lambda n: p[f"{pre}.{n}"].astype(np.float64)  # noqa: E731
    if mode == "up":
        h = _tconv_taps(x, w("dw.weight"), w("dw.bias"), 2, 1, c, 1)
    else:
        h = _conv_taps(x, w("dw.weight"), w("dw.bias"), 2 if mode == "down" else 1, 1, c)
    mu = h.mean(axis=(2, 3, 4), keepdims=True)
    var = h.var(axis=(2, 3, 4), keepdims=True)
    h = (h - mu) / np.sqrt(var + 1e-5) * w("norm.gamma").reshape(1, -1, 1, 1, 1) + w("norm.beta").reshape(1, -1, 1, 1, 1)
    h = _conv_taps(h, w("expand.weight"), w("expand.bias"), 1, 0, 1)
    h = 0.5 * h * (1 + erf(h / np.sqrt(2)))
    if grn:
        n = np.sqrt((h * h).sum(axis=(2, 3, 4), keepdims=True))
        ratio = n / (n.sum(axis=1, keepdims=True) + 1e-6)
        h = w("grn.gamma").reshape(1, -1, 1, 1, 1) * h * ratio + w("grn.beta").reshape(1, -1, 1, 1, 1) + h
    h = _conv_taps(h, w("compress.weight"), w("compress.bias"), 1, 0, 1)
    if mode == "down":
        return h + _conv_taps(x, w("res.weight"), w("res.bias"), 2, 0, 1)
    if mode == "up":
        return h + _tconv_taps(x, w("res.weight"), w("res.bias"), 2, 0, 1, 1)
    return h + x


def network_forward_oracle(params, x, levels, grn=True):
    """All-blocks-equal-to-one layout: stem, enc0-3 + down, bottleneck, up + dec3-0, heads."""
    p = {k: np.asarray(v) for k, v in params.items()}
    h = _conv_taps(np.asarray(x, dtype=np.float64), p["stem.weight"].astype(np.float64), p["stem.bias"], 1, 0, 1)
    skips = []
    for i in range(4):
        h = _block(h, p, f"enc{i}.block0", "plain", grn)
        skips.append(h)
        h = _block(h, p, f"down{i}", "down", grn)
    h = _block(h, p, "bottleneck.block0", "plain", grn)
    outs = {}
    for i in (3, 2, 1, 0):
        h = _block(h, p, f"up{i}", "up", grn) + skips[i]
        h = _block(h, p, f"dec{i}.block0", "plain", grn)
        if i < levels:
            outs[i] = _conv_taps(h, p[f"head{i}.weight"].astype(np.float64), p[f"head{i}.bias"], 1, 0, 1)
    return [outs[k] for k in range(levels)]
