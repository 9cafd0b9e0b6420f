"""Whole-model gradient check against central finite differences."""
from __future__ import annotations

import numpy as np

from . import model as M
from . import tensor as T

# every trainable layer type, matched by parameter-name suffix / prefix
LAYER_GROUPS = {
    "conv": lambda n: n.endswith(".weight") and not n.startswith("classifier"),
    "bn": lambda n: n.endswith(".scale") or n.endswith(".shift"),
    "sap_W": lambda n: n.endswith(".sap.W") or n.endswith(".sap.b"),
    "sap_u": lambda n: n.endswith(".sap.u"),
    "fr": lambda n: n.startswith("fr."),
    "classifier": lambda n: n.startswith("classifier."),
}


def tiny_config(num_speakers=3, input_dim=16):
    """Full-width, full-depth network with every encoding feature switched on."""
    return M.ModelConfig(input_dim=input_dim, num_speakers=num_speakers, encoding_mode="mla-sap",
                         use_fr=True, use_dln=True)


def sample_coords(params, n_coords, rng):
    """Spread ``n_coords`` flat indices over the layer groups, then over tensors within a group."""
    groups = {g: [n for n in params if match(n)] for g, match in LAYER_GROUPS.items()}
    groups = {g: names for g, names in groups.items() if names}
    per_group = -(-n_coords // len(groups))
    coords = {}
    for names in groups.values():
        picks = rng.choice(len(names), size=per_group, replace=True)
        for k in picks:
            name = names[k]
            size = params[name].size
            coords.setdefault(name, set()).add(int(rng.integers(size)))
    return {n: sorted(ix) for n, ix in coords.items()}


def model_gradient_check(config=None, batch=3, frames=40, n_coords=264, seed=0, step=1e-6,
                         tolerance=1e-3):
    """Check d(loss)/d(param) for sampled parameters of a 64-bit model in training mode.

    Dropout masks are frozen by reseeding the generator on every evaluation,
    so the finite differences see the same network as the backward pass.
    """
    config = config or tiny_config()
    rng = np.random.default_rng(seed)
    with T.float64():
        params = M.build(config, rng)
    X = rng.normal(size=(batch, config.input_dim, frames))
    y = rng.integers(0, config.num_speakers, size=batch)
    buffers = {n: b.copy() for n, b in params.buffers.items()}

    def loss():
        params.buffers.update({n: b.copy() for n, b in buffers.items()})
        out = M.forward(params, config, X, training=True, rng=np.random.default_rng(seed + 1))
        return T.cross_entropy_softmax(out.logits, y)

    coords = sample_coords(params, n_coords, rng)
    inputs = {n: params[n] for n in coords}
    return T.grad_check(loss, inputs, step=step, tolerance=tolerance, coords=coords)
