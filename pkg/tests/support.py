"""Shared test helpers: toy model geometry, seeded weights, and independent
numpy reference implementations used as oracles."""

import numpy as np
from scipy.special import erf

from vita.model import VitConfig, VitWeights, expected_tensor_specs

TOY_CONFIG = VitConfig(image_size=12, patch_size=4, embed_dim=8, num_heads=2,
                       num_blocks=2, mlp_ratio=2, num_classes=5, ln_eps=1e-6)


def make_weights(config: VitConfig, seed: int = 0, scale: float = 0.2) -> VitWeights:
    """Seeded random weights with the full canonical tensor set."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_tensor_specs(config).items():
        if name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "norm.weight":
            arr = np.ones(shape)
        elif name.endswith(".bias") or name == "norm.bias":
            arr = rng.normal(0.0, scale / 4, shape)
        else:
            arr = rng.normal(0.0, scale, shape)
        tensors[name] = arr.astype(np.float32)
    return VitWeights(tensors=tensors, config=config)


def numpy_suffix(captured: np.ndarray, weights: VitWeights, config: VitConfig,
                 cap: int) -> np.ndarray:
    """Pure-numpy replay of encoder blocks cap..N-1, final norm, and head.

    Written against plain arrays with no shared code, so finite differences
    over it yield a reference gradient for the capture-point activation.
    """
    w = {k: np.asarray(v, np.float64) for k, v in weights.tensors.items()}
    eps = config.ln_eps

    def ln(x, g, b):
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * g + b

    def gelu(x):
        return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))

    def softmax(x):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    x = np.asarray(captured, np.float64)
    d, heads = config.embed_dim, config.num_heads
    hd = d // heads
    for i in range(cap, config.num_blocks):
        p = f"blocks.{i}."
        h = ln(x, w[p + "ln1.weight"], w[p + "ln1.bias"])
        qkv = h @ w[p + "attn.qkv.weight"].T + w[p + "attn.qkv.bias"]
        q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
        outs = []
        for hh in range(heads):
            sl = slice(hh * hd, (hh + 1) * hd)
            a = softmax(q[:, sl] @ k[:, sl].T / np.sqrt(hd))
            outs.append(a @ v[:, sl])
        merged = np.concatenate(outs, axis=1)
        x = x + merged @ w[p + "attn.proj.weight"].T + w[p + "attn.proj.bias"]
        h2 = ln(x, w[p + "ln2.weight"], w[p + "ln2.bias"])
        inner = gelu(h2 @ w[p + "mlp.fc1.weight"].T + w[p + "mlp.fc1.bias"])
        x = x + inner @ w[p + "mlp.fc2.weight"].T + w[p + "mlp.fc2.bias"]
    x = ln(x, w["norm.weight"], w["norm.bias"])
    return x[0] @ w["head.weight"].T + w["head.bias"]


def central_difference(f, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Dense central-difference gradient of a scalar function of an array."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        bump = np.zeros_like(x, dtype=np.float64)
        bump[idx] = step
        grad[idx] = (f(x + bump) - f(x - bump)) / (2.0 * step)
        it.iternext()
    return grad
