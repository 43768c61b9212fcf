"""
Model size and cost
===================

Parameter and multiply-accumulate counts of the generator across widths,
and the patch size seen by the discriminator.
"""
import torch

from fundus_restore.discriminator import Discriminator, DiscriminatorConfig, receptive_field
from fundus_restore.generator import Generator, GeneratorConfig, generator_macs, param_count

print(f"{'C':>4}{'G params':>12}{'D params':>12}{'GMACs @128':>12}{'GMACs @512':>12}")
for C in (8, 16, 32, 45):
    g = GeneratorConfig(base_channels=C)
    d = param_count(Discriminator(DiscriminatorConfig(base_channels=C)))
    print(f"{C:>4}{param_count(g) / 1e6:>11.2f}M{d / 1e6:>11.2f}M"
          f"{generator_macs(g, 128, 128) / 1e9:>12.2f}{generator_macs(g, 512, 512) / 1e9:>12.2f}")

# Channel ladder of the default generator on a 128 x 128 input.
_, trace = Generator(GeneratorConfig()).features(torch.zeros(1, 3, 128, 128))
for name, shape in trace.items():
    print(f"{name:>11}: {shape}")

# Each discriminator score judges one patch of the input.
for depth in (2, 3, 4):
    print(f"discriminator with {depth} stages: {receptive_field(DiscriminatorConfig(stages=depth))} px patches")
