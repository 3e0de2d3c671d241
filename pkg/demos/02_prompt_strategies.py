"""
Prompt strategies on a frozen micro ViT
=======================================

One image goes through every strategy. We print the trainable parameter
budget, the components each strategy calls between blocks, and how far the
logits move away from the prompt-free backbone.
"""

import numpy as np

from lspt import autodiff as ad
from lspt.backbone import ViTConfig, init_backbone, plain_forward
from lspt.prompts import StrategyKind, init_bank, lspt_forward, param_partition

cfg = ViTConfig()  # 32x32 images, 8x8 patches, D=64, 6 blocks, 4 classes
backbone = init_backbone(cfg, seed=0)
print("frozen backbone parameters:", backbone.param_count())

image = np.random.default_rng(1).normal(size=(3, 32, 32))
features = plain_forward(image, backbone)

print(f"\n{'strategy':18s} {'trainable':>9s}  {'coding between blocks':28s} logit shift")
for strategy in StrategyKind:
    bank = init_bank(strategy, cfg, num_prompts=4, seed=0)
    logits, trace = lspt_forward(image, backbone, bank)
    plain = ad.linear(features, bank.head_w, bank.head_b).data[0]
    counts = param_partition(strategy, bank).counts
    calls = " -> ".join(trace.blocks[0].calls) or "(none)"
    shift = np.abs(logits.data - plain).max()
    print(f"{strategy.value:18s} {counts['trainable']:9d}  {calls:28s} {shift:.2e}")

# The LSTM between blocks is shared. One cell per block boundary would cost
# L - 1 = 5 times as much.
shared = param_partition("LSPT", init_bank("LSPT", cfg)).counts["cell"]
per_block = param_partition("LSPT", init_bank("LSPT", cfg, shared_cell=False)).counts["cell"]
print(f"\nshared cell: {shared} parameters; one cell per boundary: {per_block} ({per_block // shared}x)")
