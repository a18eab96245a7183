"""Build the U-Net generator and multi-patch critic at full scale and
desk scale, and evaluate the adversarial losses once.

Run: python demos/02_networks_and_losses.py
"""

import numpy as np

from polypsynth.models import NetConfig, build_critic, build_generator
from polypsynth.tensor import Tensor, no_grad
from polypsynth.training import LossWeights, critic_loss, generator_loss

# Full-scale layout: 256x256, the encoder halves eight times down to 1x1
# and the critic scores 64x64 and 16x16 patches.
full = NetConfig(image_size=256)
print("full-scale encoder widths:", full.encoder_widths())
print("full-scale critic patch levels:", full.patch_levels())

# Desk layout for experiments: same topology, 64x64.
desk = NetConfig(image_size=64, base_width=16, width_cap=64, critic_norm="none")
rng = np.random.default_rng(0)
g = build_generator(desk, rng)
d = build_critic(desk, rng)

cond = Tensor(np.random.default_rng(1).uniform(-1, 1, (2, 3, 64, 64)).astype(np.float32))
target = Tensor(np.random.default_rng(2).uniform(-1, 1, (2, 3, 64, 64)).astype(np.float32))

fake = g.forward(cond, "eval")
print("generator output:", fake.shape, "in [-1, 1]:",
      float(fake.numpy().min()), "..", float(fake.numpy().max()))

maps = d.forward(cond, fake.detach())
print("critic score maps:", [m.shape for m in maps])

w = LossWeights()  # lambda_reconst=100, lambda_gp=10, equal patch weights
with no_grad():
    fake_const = g.forward(cond, "train", np.random.default_rng(3))
closs, cparts = critic_loss(d, cond, target, fake_const, w, np.random.default_rng(4))
print(f"critic loss {closs.item():+.4f} (wasserstein gap {cparts['gap']:+.4f}, "
      f"gradient penalty {cparts['gp']:.4f})")

gloss, gparts = generator_loss(g, d, cond, target, w, np.random.default_rng(5))
print(f"generator loss {gloss.item():+.4f} (adversarial {gparts['adv']:+.4f}, "
      f"L1 {gparts['l1']:.4f})")
