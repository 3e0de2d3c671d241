"""
Where do the prompts look?
==========================

After a short training run we compare, block by block, how similar the
prompt tokens are to the patches that carry the class (the object mask)
versus the background, and export the maps as PGM images plus CSVs.
"""

import os
import tempfile

import numpy as np

from lspt.backbone import ViTConfig, init_backbone
from lspt.data import SyntheticTaskSpec, gen_synthetic
from lspt.diagnostics import build_report, export_report
from lspt.prompts import init_bank, lspt_forward
from lspt.trainer import TrainConfig, train

cfg = ViTConfig()
backbone = init_backbone(cfg, seed=0)
data = gen_synthetic(SyntheticTaskSpec("long_range_pair", 4, 40, 0.1, seed=3))

for strategy in ("VPTDeep", "LSPT"):
    bank = init_bank(strategy, cfg, 4, seed=2)
    train(data, backbone, bank, TrainConfig(epochs=5, strategy=strategy, seed=2))
    _, trace = lspt_forward(data.images[:8], backbone, bank)
    curves = np.array([build_report(trace, s, data.masks[s]).retention_curve for s in range(8)])
    print(f"{strategy:8s} retention by block:", np.round(curves.mean(axis=0), 3))

# Export the LSPT maps for one sample.
out = os.path.join(tempfile.mkdtemp(prefix="lspt_diag_"), "sample0")
report = build_report(trace, 0, data.masks[0], sample_id=0, label=int(data.labels[0]))
files = export_report(report, out)
print(f"wrote {len(files)} files to {out}")
print(open(os.path.join(out, "index.txt")).read())

# The class-token attention of the last block, as a 4x4 grid over the patches.
print(np.round(report.attn_maps[-1].reshape(4, 4), 3))
print("object patches:", np.flatnonzero(data.masks[0]))
