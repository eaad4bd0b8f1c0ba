"""
Where does each similarity head look?
=====================================

Grad-CAM over the final embedding map, one heatmap per head plus the heatmap
of the averaged score used for prediction.
"""

import sys
from pathlib import Path

import numpy as np

from bsnet.autodiff import set_numeric_mode
from bsnet.data import Augment, SyntheticSpec, generate_synthetic, sample_episode, split_dataset
from bsnet.engine import TrainConfig, build_model, meta_train
from bsnet.explain import write_episode_heatmaps

out = Path(sys.argv[1] if len(sys.argv) > 1 else "gradcam_out")
set_numeric_mode("float32")

data = generate_synthetic(SyntheticSpec(n_classes=30, images_per_class=20))
train, _, test = split_dataset(data, (4, 1, 1), seed=0)

###############################################################################
# A briefly trained R&C model is enough to get object-centred maps.

model = build_model("conv4", ["relation", "cosine"], seed=0)
meta_train(model, train, TrainConfig(n_query=3, episodes=100, augment=Augment(enabled=False)))

episode = sample_episode(test, 5, 1, 2, np.random.default_rng(1))
paths = write_episode_heatmaps(model, episode, 0, out, queries=[0, 2, 4])
print(f"wrote {len(paths)} overlays to {out}/")
