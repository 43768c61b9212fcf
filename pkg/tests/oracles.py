"""Independent reference computations used by the tests.

Everything here is written with explicit loops in numpy float64 and shares no
code with the package.
"""
import math

import numpy as np
import torch


def dense_window_attention(tokens, w_q, w_k, w_v, w_o, pos, heads):
    """Materialise the full T x T attention matrix of every head with loops."""
    x = np.asarray(tokens, dtype=np.float64)
    T, C = x.shape
    d = C // heads
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    concat = np.zeros((T, C))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        A = np.zeros((T, T))
        for i in range(T):
            for j in range(T):
                A[i, j] = np.dot(q[i, sl], k[j, sl]) / math.sqrt(d)
        A = np.exp(A - A.max(axis=1, keepdims=True))
        A /= A.sum(axis=1, keepdims=True)
        for i in range(T):
            for j in range(T):
                concat[i, sl] += A[i, j] * v[j, sl]
    return concat @ w_o + pos


def dense_w_msa(x, L, heads, params):
    """Per-window oracle for an unshifted W-MSA on an (H, W, C) map."""
    x = np.asarray(x, dtype=np.float64)
    H, W, C = x.shape
    out = np.zeros_like(x)
    for r0 in range(0, H, L):
        for c0 in range(0, W, L):
            tokens = x[r0:r0 + L, c0:c0 + L].reshape(L * L, C)
            y = dense_window_attention(tokens, *params, heads)
            out[r0:r0 + L, c0:c0 + L] = y.reshape(L, L, C)
    return out


def finite_difference_check(fn, tensors, n_samples=None, h=1e-5, seed=0):
    """Compare autograd with central differences for float64 leaf tensors.

    Returns the max relative error over the sampled entries, where the relative
    error of one entry is |a - n| / max(|a|, |n|, 1e-5); the floor keeps entries
    whose true gradient is ~0 from being judged on roundoff alone.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    grads = [t.grad.detach().clone() for t in tensors]
    rng = np.random.default_rng(seed)
    index = [(ti, j) for ti, t in enumerate(tensors) for j in range(t.numel())]
    if n_samples is not None and n_samples < len(index):
        pick = rng.choice(len(index), n_samples, replace=False)
        index = [index[i] for i in pick]
    worst = 0.0
    with torch.no_grad():
        for ti, j in index:
            flat = tensors[ti].view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            fp = fn().item()
            flat[j] = orig - h
            fm = fn().item()
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            ana = grads[ti].view(-1)[j].item()
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-5))
    return worst


def loop_psnr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total = 0.0
    n = 0
    for v1, v2 in zip(a.ravel(), b.ravel()):
        total += (float(v1) - float(v2)) ** 2
        n += 1
    return 10 * math.log10(1.0 / (total / n))


class LocalConvNet(torch.nn.Module):
    """Stack of dilated 3x3 convs with receptive-field radius ``sum(dilations)``.

    A strictly local stand-in for the restoration model, used to check that
    tiled inference reproduces untiled inference.
    """

    def __init__(self, dilations=(1, 2, 4, 8, 1), width=4, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        chans = [3] + [width] * (len(dilations) - 1) + [3]
        self.convs = torch.nn.ModuleList()
        for i, d in enumerate(dilations):
            # dilation 0 stands for a pointwise (1x1) layer
            conv = torch.nn.Conv2d(chans[i], chans[i + 1], 3 if d else 1, padding=d,
                                   dilation=max(d, 1), padding_mode="reflect")
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * 0.3)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=g) * 0.05)
            self.convs.append(conv)
        self.radius = sum(dilations)

    def forward(self, x):
        y = x
        for i, conv in enumerate(self.convs):
            y = conv(y)
            if i < len(self.convs) - 1:
                y = torch.nn.functional.leaky_relu(y, 0.2)
        return x + 0.1 * y
