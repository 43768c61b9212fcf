"""
Window attention, step by step
==============================

Self-attention restricted to L x L windows, checked against a dense
computation, and what the restriction buys in cost.
"""
import numpy as np
import torch

from fundus_restore.attention import (AttentionConfig, AttentionParams, flops_msa, flops_w_msa,
                                      w_msa, window_merge, window_partition)

rng = np.random.default_rng(0)

# A 16 x 16 feature map with 8 channels, cut into 4 x 4 windows.
x = torch.tensor(rng.normal(size=(1, 16, 16, 8)))
windows = window_partition(x, 4)
print("windows:", tuple(windows.shape))          # 16 windows of 4 x 4 tokens
assert torch.equal(window_merge(windows, 16, 16), x)

# Random projections and a position embedding shared by all windows.
params = AttentionParams(*(torch.tensor(rng.normal(0, 0.4, (8, 8))) for _ in range(4)),
                         torch.tensor(rng.normal(0, 0.1, (16, 8))))
cfg = AttentionConfig(window_size=4, num_heads=2, channels=8)
y = w_msa(x, cfg, params)


# The same thing done the slow way: one dense softmax per window.
def dense(window):
    tokens = window.reshape(16, 8)
    q, k, v = tokens @ params.w_q, tokens @ params.w_k, tokens @ params.w_v
    out = []
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        a = torch.softmax(q[:, sl] @ k[:, sl].mT / 2.0, dim=-1)
        out.append(a @ v[:, sl])
    return (torch.cat(out, -1) @ params.w_o + params.pos).reshape(4, 4, 8)


ref = window_merge(torch.stack([dense(w) for w in windows]), 16, 16)
print("max |w_msa - dense|:", (y - ref).abs().max().item())


def windows_seen(attention_cfg, r, c):
    """Which of the 16 unshifted 4 x 4 windows feed the output at (r, c)."""
    g, = torch.autograd.grad(w_msa(x, attention_cfg, params)[0, r, c].sum(), x)
    rows, cols = torch.nonzero(g[0].abs().sum(-1)).T
    return sorted({(int(i) // 4, int(j) // 4) for i, j in zip(rows, cols)})


# Locality: the output at (1, 1) only depends on its own window ...
x.requires_grad_(True)
print("unshifted, pixel (1,1) reads windows", windows_seen(cfg, 1, 1))

# ... until the windows are shifted by half a window (wrapping around the border).
shifted = AttentionConfig(window_size=4, num_heads=2, channels=8, shift=True)
print("shifted,   pixel (1,1) reads windows", windows_seen(shifted, 1, 1))

# Cost grows linearly with the image for windows, quadratically for dense attention.
print(f"\n{'size':>6}{'windowed':>16}{'dense':>22}")
for s in (64, 128, 256, 512):
    print(f"{s:>6}{flops_w_msa(8, 32, s, s):>16,}{flops_msa(32, s, s):>22,}")
