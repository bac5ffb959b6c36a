"""VGG16-style domain classifier over density maps."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import NonFiniteError


@dataclass
class DiscriminatorConfig:
    input_channels: int = 1
    stage_widths: tuple = (8, 16, 32, 64, 64)
    stage_depths: tuple = (2, 2, 3, 3, 3)
    fc_widths: tuple = (256, 64, 2)
    input_size: int = 64
    input_scale: float = 100.0  # densities are ~1e-2 per pixel; bring them to unit order
    with_image: bool = False   # concatenate the RGB image (4-channel input)

    def __post_init__(self):
        self.stage_widths = tuple(int(v) for v in self.stage_widths)
        self.stage_depths = tuple(int(v) for v in self.stage_depths)
        self.fc_widths = tuple(int(v) for v in self.fc_widths)
        if len(self.stage_widths) != 5 or len(self.stage_depths) != 5:
            raise ValueError("the classifier has five conv stages")
        if len(self.fc_widths) != 3 or self.fc_widths[-1] != 2:
            raise ValueError("fc_widths must be three widths ending in 2")
        if self.input_size % 32:
            raise ValueError("input_size must be a multiple of 32")

    @classmethod
    def paper(cls, input_size=256) -> "DiscriminatorConfig":
        return cls(stage_widths=(64, 128, 256, 512, 512), fc_widths=(4096, 4096, 2), input_size=input_size)

    @classmethod
    def toy(cls, input_size=32) -> "DiscriminatorConfig":
        return cls(input_size=input_size)


class Discriminator(nn.Module):
    """13 conv3x3+ReLU layers in five max-pooled stages, then three FC layers and a softmax."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DiscriminatorConfig()
        layers = []
        cin = cfg.input_channels + (3 if cfg.with_image else 0)
        for width, depth in zip(cfg.stage_widths, cfg.stage_depths):
            for _ in range(depth):
                layers += [nn.Conv2d(cin, width, 3, padding=1), nn.ReLU(inplace=True)]
                cin = width
            layers.append(nn.MaxPool2d(2))
        self.features = nn.Sequential(*layers)
        side = cfg.input_size // 32
        f1, f2, f3 = cfg.fc_widths
        self.classifier = nn.Sequential(
            nn.Linear(cin * side * side, f1), nn.ReLU(inplace=True),
            nn.Linear(f1, f2), nn.ReLU(inplace=True),
            nn.Linear(f2, f3))

    def logits(self, density, image=None):
        if density.dim() == 2:
            density = density[None, None]
        elif density.dim() == 3:
            density = density[:, None]
        if not torch.isfinite(density).all():
            raise NonFiniteError("non-finite density map")
        x = density * self.cfg.input_scale
        if self.cfg.with_image:
            if image is None:
                raise ValueError("classifier configured with image input but none given")
            x = torch.cat([x, image.to(x.dtype)], dim=1)
        size = self.cfg.input_size
        if x.shape[-2:] != (size, size):
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        return self.classifier(self.features(x).flatten(1))

    def probs(self, density, image=None):
        return torch.softmax(self.logits(density, image), dim=-1)

    def forward(self, density, image=None):
        """Probability of the source class, shape (B,)."""
        return self.probs(density, image)[:, 0]


def discriminate(density, disc: Discriminator, image=None):
    return disc(density, image)
