"""
Tuning the loss weights of the two heads
========================================

l_q = lambda * l_relation + beta * l_cosine over eleven (lambda, beta) pairs,
each trained from the same seed on the same episode stream.
"""

from bsnet.autodiff import set_numeric_mode
from bsnet.data import Augment, SyntheticSpec, generate_synthetic, split_dataset
from bsnet.engine import TrainConfig
from bsnet.experiments import format_table, run_weight_sweep

set_numeric_mode("float32")
data = generate_synthetic(SyntheticSpec(n_classes=30, images_per_class=20, variation=0.5))
train, _, test = split_dataset(data, (4, 1, 1), seed=0)

config = TrainConfig(n_way=5, k_shot=1, n_query=3, episodes=60, augment=Augment(enabled=False))
rows = run_weight_sweep(train, test, config, eval_episodes=50, eval_query=8,
                        on_row=lambda r: print(f"lambda={r.lam:g} beta={r.beta:g}: {100 * r.mean:.2f}%"))
print()
print(format_table(rows))
