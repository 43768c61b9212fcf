"""
Overfitting a single pair
=========================

The quickest end-to-end sanity check: train a narrow model on one synthetic
128 x 128 pair and watch PSNR climb above the degraded input.
Pass a step count as the first argument (default 150; a few minutes on one core).
"""
import sys
from pathlib import Path

import numpy as np

from fundus_restore.data import make_fixture_pair, write_image
from fundus_restore.discriminator import DiscriminatorConfig
from fundus_restore.evaluation import psnr, ssim
from fundus_restore.generator import GeneratorConfig, to_image, to_tensor
from fundus_restore.training import TrainConfig, fit

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 150
out = Path("demo_output")
out.mkdir(exist_ok=True)

lq, hq = make_fixture_pair(128, 0)
print(f"degraded input: PSNR {psnr(lq, hq):.2f} dB, SSIM {ssim(lq, hq):.4f}")

cfg = TrainConfig(epochs=steps, batch_size=1, patch_size=None, augment=False,
                  lr_init=1e-3, lr_final=1e-6,
                  generator=GeneratorConfig(base_channels=8),
                  discriminator=DiscriminatorConfig(base_channels=8))
state = fit([(lq, hq)], cfg)

for h in state.history[:: max(1, steps // 10)]:
    print(f"step {h['step']:>4}  charbonnier {h['charbonnier']:.5f}  adv_d {h['adv_d']:.4f}  lr {h['lr']:.2e}")

restored = to_image(state.generator.restore(to_tensor(lq)))
print(f"restored:       PSNR {psnr(restored, hq):.2f} dB, SSIM {ssim(restored, hq):.4f}")

write_image(out / "overfit_triptych.png", np.concatenate([lq, restored, hq], axis=1))
print("wrote", out / "overfit_triptych.png")
