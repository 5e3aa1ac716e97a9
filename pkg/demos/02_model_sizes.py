"""Build the full-size twin networks and compare their parameter budgets.

Run:  python3 demos/02_model_sizes.py

Construction allocates roughly 1.7 GB for the conv model's dense layer.
"""
import numpy as np

from scalosiam.siamese import (
    ConvSiameseConfig,
    ResidualSiameseConfig,
    architecture_table,
    build_model,
    param_count,
    residual_param_count,
)

conv = build_model("conv", ConvSiameseConfig(), np.random.default_rng(0))
print("convolutional twin, 224x224x3 input")
for name, shape, count in architecture_table(conv):
    print(f"  {name:<16} {str(shape):<22} {count:>12,}")
n_conv = param_count(conv)
print(f"  total {n_conv:,}")
del conv

# Most of the conv budget is the 102400 -> 4096 dense layer; pooling after
# every residual stage shrinks that flatten to 6x6x144.
n_res = residual_param_count(ResidualSiameseConfig())
print(f"residual twin total {n_res:,}  ({n_conv / n_res:.1f}x smaller)")
