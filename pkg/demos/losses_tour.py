"""Small numeric tour of the three loss families on toy tensors.

Each block builds an input whose loss value can be worked out by hand,
so the printed numbers double as a sanity check of the implementation.
"""

import math

import numpy as np
import torch

from mmgl.losses import (
    ContrastiveConfig,
    deep_supervised_loss,
    default_pairing,
    dice_loss,
    global_contrastive_level_loss,
    local_supervised_level_loss,
)


def global_block() -> None:
    # four identical embeddings: every candidate in the denominator is
    # equally similar, so the loss is log(4 - 1) at any temperature
    z = np.tile(np.array([[1.0, 0.0, 0.0]]), (4, 1))
    cfg = ContrastiveConfig(temperature=0.07)
    loss = global_contrastive_level_loss(z, default_pairing(4), cfg)
    print(f"identical embeddings (batch 4): {loss.item():.6f} "
          f"(log 3 = {math.log(3):.6f})")

    # two orthogonal clusters, partner similarity 1 and the two
    # cross-cluster similarities 0: -log(e / (e + 2)) at temperature 1
    u, v = [1.0, 0.0], [0.0, 1.0]
    z = np.array([u, v, u, v])
    cfg = ContrastiveConfig(temperature=1.0)
    loss = global_contrastive_level_loss(z, default_pairing(4), cfg)
    expected = -math.log(math.e / (math.e + 2.0))
    print(f"orthogonal two-cluster: {loss.item():.6f} "
          f"(-log(e/(e+2)) = {expected:.6f})")


def local_block() -> None:
    # 2x2 feature grid, two classes of two points each: every anchor has
    # one positive at similarity 1 and two negatives at similarity 0, so
    # each term is 1 - log 2 and the loss is -(1 - log 2) at temperature 1
    u = np.array([1.0, 0.0])
    v = np.array([0.0, 1.0])
    f = np.stack([u, u, v, v]).T.reshape(2, 2, 2)
    mask = np.array([[0, 0], [1, 1]])
    cfg = ContrastiveConfig(temperature=1.0)
    loss = local_supervised_level_loss(f, mask, cfg)
    expected = -(1.0 - math.log(2.0))
    print(f"four-point grid: {loss.item():.6f} "
          f"(-(1 - log 2) = {expected:.6f})")


def dice_block() -> None:
    # logits so one-hot they match the mask exactly: soft dice loss -> 0
    mask = torch.zeros(1, 8, 8, dtype=torch.long)
    mask[0, 2:6, 2:6] = 3
    logits = torch.full((1, 8, 8, 8), -50.0)
    logits[0, 0][mask[0] == 0] = 50.0
    logits[0, 3][mask[0] == 3] = 50.0
    print(f"perfect prediction dice loss: {dice_loss(logits, mask).item():.6f}")

    # deep supervision sums the per-head losses under a weight triple
    heads = [logits.clone() for _ in range(3)]
    total = deep_supervised_loss(heads, mask, (0.2, 0.2, 0.6))
    print(f"deep supervised, perfect at every head: {total.item():.6f}")


if __name__ == "__main__":
    global_block()
    local_block()
    dice_block()
