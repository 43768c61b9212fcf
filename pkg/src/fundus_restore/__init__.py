"""Fundus image restoration with a window-attention U-Net generator trained against a patch discriminator."""

__version__ = "0.1.0"

from .attention import AttentionConfig, WSAB, flops_msa, flops_w_msa, w_msa, window_merge, window_partition
from .discriminator import Discriminator, DiscriminatorConfig, receptive_field
from .errors import *  # noqa: F401,F403
from .evaluation import MetricsReport, TilePlan, direct_restore, evaluate, psnr, ssim, tiled_restore
from .generator import PAPER_CALIBRATED, Generator, GeneratorConfig, param_count
from .losses import LossConfig, adv_loss_D, adv_loss_G, charbonnier, edge_loss, fqp_loss, total_loss
from .training import TrainConfig, fit, load_generator, lr_schedule, train_step
