"""Shared builders for model and training tests."""

import numpy as np

from ctmae import model as M
from ctmae import synth
from ctmae.training import Item

TINY = M.PRESETS["tiny"]


def spread_params(config, seed=0, dtype=np.float64):
    """Parameters drawn at O(0.3) scale so gradients sit well above rounding noise."""
    rng = np.random.default_rng(seed)
    params = M.init_params(config, seed, dtype=dtype)
    for name, shape, kind in M.param_shapes(config):
        if name in M.BUFFERS:
            continue
        base = 1.0 if kind == "one" else 0.0
        params[name].data = (base + rng.normal(scale=0.3, size=shape)).astype(dtype)
    return params


def synth_items(side, n_per_class=2, classes=(0, 1, 2, 3), seed=0):
    items = []
    for label in classes:
        for k in range(n_per_class):
            vol, mask, y = synth.generate(synth.SynthSpec(side=side, label=label, seed=seed + k))
            items.append(Item(np.array(vol.data), np.array(mask.data), y))
    return items
