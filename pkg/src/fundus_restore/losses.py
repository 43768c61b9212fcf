"""Training objectives: Charbonnier, perception-feature, edge and least-squares adversarial terms."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError, ShapeError

LAPLACIAN_KERNELS = {
    "4": [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]],
    "8": [[1.0, 1.0, 1.0], [1.0, -8.0, 1.0], [1.0, 1.0, 1.0]],
}


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and options.

    The three weights are not published; the defaults put every term within two
    orders of magnitude of the Charbonnier term on the synthetic fixtures at
    initialisation (Charbonnier ~5e-2, weighted perception ~1e-3, edge ~4e-2,
    weighted adversarial ~1e-2).
    """

    epsilon: float = 1e-3
    lambda_fqp: float = 0.1
    lambda_edge: float = 1.0
    lambda_adv: float = 0.01
    laplacian: str = "4"
    # "mean": per-pixel sqrt(d^2 + eps^2) averaged; "global": sqrt(||d||^2 + eps^2)
    charbonnier_form: str = "mean"
    perception: str = "stub-randconv"
    perception_path: Optional[str] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        for name in ("lambda_fqp", "lambda_edge", "lambda_adv"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {v}")
        if self.laplacian not in LAPLACIAN_KERNELS:
            raise ConfigError(f"unknown laplacian kernel {self.laplacian!r}")
        if self.charbonnier_form not in ("mean", "global"):
            raise ConfigError(f"unknown charbonnier form {self.charbonnier_form!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def charbonnier(restored, target, epsilon: float = 1e-3, form: str = "mean"):
    _check_shapes(restored, target)
    d = restored - target
    if form == "global":
        return torch.sqrt((d * d).sum() + epsilon**2)
    # Mean of sqrt(d^2 + eps^2), accumulated as offsets from eps so identical
    # inputs give exactly eps instead of a rounded sum of eps values.
    return epsilon + (torch.sqrt(d * d + epsilon**2) - epsilon).mean()


def laplacian(x, kernel: str = "4"):
    """Per-channel 3x3 Laplacian of a (B, C, H, W) tensor with reflect padding."""
    C = x.shape[1]
    k = torch.tensor(LAPLACIAN_KERNELS[kernel], dtype=x.dtype, device=x.device)
    k = k.expand(C, 1, 3, 3)
    return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), k, groups=C)


def edge_loss(restored, target, epsilon: float = 1e-3, kernel: str = "4", form: str = "mean"):
    _check_shapes(restored, target)
    return charbonnier(laplacian(restored, kernel), laplacian(target, kernel), epsilon, form)


def fqp_loss(restored, target, phi):
    """Mean squared difference of perception features, averaged over channels and the feature grid."""
    _check_shapes(restored, target)
    fr = phi(restored)
    with torch.no_grad():
        ft = phi(target)
    return ((fr - ft) ** 2).mean()


def adv_loss_D(scores_restored, scores_hq):
    _check_shapes(scores_restored, scores_hq)
    return (scores_restored**2 + (scores_hq - 1) ** 2).mean()


def adv_loss_G(scores_restored):
    return ((scores_restored - 1) ** 2).mean()


def total_loss(components: dict, cfg: LossConfig):
    """Returns (generator objective, discriminator objective).

    Only the adversarial term reaches the discriminator; the remaining terms
    train the generator.
    """
    g = (components["charbonnier"]
         + cfg.lambda_fqp * components["fqp"]
         + cfg.lambda_edge * components["edge"]
         + cfg.lambda_adv * components["adv_g"])
    d = cfg.lambda_adv * components["adv_d"]
    return g, d


# -- perception networks ---------------------------------------------------


class PerceptionNetwork(nn.Module):
    """Frozen feature extractor phi; ``description`` records where the weights came from."""

    def __init__(self, features: nn.Module, description: str):
        super().__init__()
        self.features = features
        self.description = description
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always stays in inference mode
        return super().train(False)

    def forward(self, x):
        return self.features(x)

    def is_frozen(self) -> bool:
        return all(not p.requires_grad for p in self.parameters())


class TinyQualityNet(nn.Module):
    """Small conv classifier of three quality grades; ``features`` is its penultimate activation."""

    def __init__(self, width: int = 16, grades: int = 3):
        super().__init__()
        self.width = width
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.head = nn.Linear(width, grades)

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


class _Features(nn.Module):
    def __init__(self, net: TinyQualityNet):
        super().__init__()
        self.net = net

    def forward(self, x):
        return self.net.features(x)


def _randconv(seed: int = 0, channels: int = 8) -> nn.Module:
    gen = torch.Generator().manual_seed(seed)
    conv = nn.Conv2d(3, channels, 3, padding=1, padding_mode="reflect")
    with torch.no_grad():
        conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / 3.0)
        conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
    return conv


def load_quality_dataset(root, size: int = 64):
    """Images under ``root/<grade>/*.png`` (grades 0, 1, 2) resized to ``size``; returns (x, y)."""
    from .data import read_image

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"quality dataset not found: {root}")
    images, labels = [], []
    for grade in range(3):
        files = sorted((root / str(grade)).glob("*.png"))
        if not files:
            raise DataError(f"quality dataset has no images for grade {grade} under {root}")
        for f in files:
            img = torch.as_tensor(read_image(f)).permute(2, 0, 1)[None]
            img = F.interpolate(img, size=(size, size), mode="bilinear", align_corners=False)
            images.append(img[0])
            labels.append(grade)
    return torch.stack(images), torch.tensor(labels)


def train_quality_net(images, labels, epochs: int = 300, lr: float = 1e-2, seed: int = 0,
                      width: int = 16):
    """Full-batch training of a :class:`TinyQualityNet`; returns (net, training accuracy)."""
    torch.manual_seed(seed)
    net = TinyQualityNet(width)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss = F.cross_entropy(net(images), labels)
        loss.backward()
        opt.step()
    with torch.no_grad():
        acc = (net(images).argmax(1) == labels).float().mean().item()
    return net, acc


def save_perception(net: TinyQualityNet, path):
    from .checkpoint import save_container

    save_container(path, {k: v for k, v in net.state_dict().items()},
                   role="perception", config={"kind": "tiny-classifier", "width": net.width})


def build_perception(kind: str = "stub-randconv", path=None, seed: int = 0) -> PerceptionNetwork:
    """Construct a frozen perception network.

    kind: ``stub-identity`` (phi(x) = x), ``stub-randconv`` (fixed seeded 3x3
    conv), ``tiny-classifier`` (trained here on the quality dataset at ``path``),
    ``external`` (a saved perception checkpoint at ``path``).
    """
    if kind == "stub-identity":
        return PerceptionNetwork(nn.Identity(), "identity stub")
    if kind == "stub-randconv":
        return PerceptionNetwork(_randconv(seed), f"random 3x3 conv, seed {seed}")
    if kind == "tiny-classifier":
        if path is None:
            raise DataError("tiny-classifier perception needs a quality dataset path")
        x, y = load_quality_dataset(path)
        net, acc = train_quality_net(x, y, seed=seed)
        pn = PerceptionNetwork(_Features(net), f"tiny quality classifier on {path}, train acc {acc:.3f}")
        pn.train_accuracy = acc
        return pn
    if kind == "external":
        from .checkpoint import load_container

        if path is None:
            raise DataError("external perception needs a checkpoint path")
        state, header = load_container(path, role="perception")
        net = TinyQualityNet(header["config"]["width"])
        net.load_state_dict(state)
        return PerceptionNetwork(_Features(net), f"loaded from {path}")
    raise ConfigError(f"unknown perception kind {kind!r}")
