"""Vision Transformer forward pass with gradient capture and an optional
astrocytic projection in encoder block 0's attention output.

Pre-norm encoder blocks (LN -> MHSA -> residual, LN -> MLP -> residual),
learned positional embeddings added once after the CLS token is prepended,
classifier head reading the final-layer-norm CLS token.

The forward runs eagerly up to a configurable capture block, then records the
remaining blocks + final norm + head on a gradient tape, so CAM backward
passes touch only the suffix they need.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .astro import AstroParams, AstroTrace, astro_linear_forward
from .container import read_container
from .errors import LoadError, NumericError, ShapeError
from .tensor import Tape, Tensor

VIT_B_16 = None  # assigned below, after VitConfig is defined


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 768
    num_heads: int = 12
    num_blocks: int = 12
    mlp_ratio: int = 4
    num_classes: int = 1000
    ln_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.num_blocks < 2:
            raise ValueError("num_blocks must be >= 2 (capture point needs a block after block 0)")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return 1 + self.grid * self.grid

    @property
    def mlp_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio


VIT_B_16 = VitConfig()


def expected_tensor_specs(config: VitConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes for a checkpoint of this geometry."""
    d, p = config.embed_dim, config.patch_size
    specs: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, 3, p, p),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (config.tokens, d),
    }
    for i in range(config.num_blocks):
        prefix = f"blocks.{i}."
        specs[prefix + "ln1.weight"] = (d,)
        specs[prefix + "ln1.bias"] = (d,)
        specs[prefix + "attn.qkv.weight"] = (3 * d, d)
        specs[prefix + "attn.qkv.bias"] = (3 * d,)
        specs[prefix + "attn.proj.weight"] = (d, d)
        specs[prefix + "attn.proj.bias"] = (d,)
        specs[prefix + "ln2.weight"] = (d,)
        specs[prefix + "ln2.bias"] = (d,)
        specs[prefix + "mlp.fc1.weight"] = (config.mlp_dim, d)
        specs[prefix + "mlp.fc1.bias"] = (config.mlp_dim,)
        specs[prefix + "mlp.fc2.weight"] = (d, config.mlp_dim)
        specs[prefix + "mlp.fc2.bias"] = (d,)
    specs["norm.weight"] = (d,)
    specs["norm.bias"] = (d,)
    specs["head.weight"] = (config.num_classes, d)
    specs["head.bias"] = (config.num_classes,)
    return specs


@dataclass
class VitWeights:
    """All learned parameters, keyed by canonical name, exactly as loaded."""

    tensors: dict[str, np.ndarray]
    config: VitConfig
    _runtime: Optional["_Runtime"] = field(default=None, repr=False, compare=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def runtime(self) -> "_Runtime":
        """Float64 promotion of the weights, built once and shared."""
        if self._runtime is None:
            self._runtime = _Runtime(self)
        return self._runtime


def load_weights(container_file, config: VitConfig) -> VitWeights:
    """Load and validate a checkpoint container against the config's geometry."""
    tensors = read_container(container_file)
    specs = expected_tensor_specs(config)
    for name, shape in specs.items():
        if name not in tensors:
            raise LoadError(f"{container_file}: missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise LoadError(
                f"{container_file}: tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
        if not np.all(np.isfinite(tensors[name])):
            raise LoadError(f"{container_file}: tensor {name!r} contains non-finite values")
    extra = sorted(set(tensors) - set(specs))
    if extra:
        raise LoadError(f"{container_file}: unexpected tensors {extra}")
    return VitWeights(tensors=tensors, config=config)


class _BlockRuntime:
    """Per-block float64 weight tensors, transposed the way the ops consume them."""

    def __init__(self, w: VitWeights, i: int):
        g = lambda suffix: np.asarray(w[f"blocks.{i}.{suffix}"], dtype=np.float64)
        self.ln1_g = Tensor(g("ln1.weight"))
        self.ln1_b = Tensor(g("ln1.bias"))
        self.qkv_wT = Tensor(g("attn.qkv.weight").T)
        self.qkv_b = Tensor(g("attn.qkv.bias"))
        # proj kept in [out, in] layout as well: the astro layer and the plain
        # path must share the exact transposed array for bitwise-equal products.
        self.proj_w = g("attn.proj.weight")
        self.proj_b = g("attn.proj.bias")
        self.proj_wT = Tensor(self.proj_w.T)
        self.proj_b_t = Tensor(self.proj_b)
        self.ln2_g = Tensor(g("ln2.weight"))
        self.ln2_b = Tensor(g("ln2.bias"))
        self.fc1_wT = Tensor(g("mlp.fc1.weight").T)
        self.fc1_b = Tensor(g("mlp.fc1.bias"))
        self.fc2_wT = Tensor(g("mlp.fc2.weight").T)
        self.fc2_b = Tensor(g("mlp.fc2.bias"))


class _Runtime:
    def __init__(self, w: VitWeights):
        cfg = w.config
        d, p = cfg.embed_dim, cfg.patch_size
        self.patch_kernel = np.asarray(w["patch_embed.weight"], dtype=np.float64).reshape(d, 3 * p * p)
        self.patch_bias = np.asarray(w["patch_embed.bias"], dtype=np.float64)
        self.cls_token = np.asarray(w["cls_token"], dtype=np.float64)
        self.pos_embed = np.asarray(w["pos_embed"], dtype=np.float64)
        self.blocks = [_BlockRuntime(w, i) for i in range(cfg.num_blocks)]
        self.norm_g = Tensor(np.asarray(w["norm.weight"], dtype=np.float64))
        self.norm_b = Tensor(np.asarray(w["norm.bias"], dtype=np.float64))
        self.head_wT = Tensor(np.asarray(w["head.weight"], dtype=np.float64).T)
        self.head_b = Tensor(np.asarray(w["head.bias"], dtype=np.float64))


@dataclass
class CaptureBundle:
    """Forward results plus the tape needed to pull a gradient back to the capture point."""

    logits: np.ndarray              # [num_classes]
    captured: np.ndarray            # [tokens, embed_dim] activation at the capture point
    gradient: Optional[np.ndarray]  # same shape, filled by backward()
    astro_trace: Optional[AstroTrace]
    capture_block: int
    _logits_t: Tensor = field(repr=False, default=None)
    _captured_t: Tensor = field(repr=False, default=None)

    def backward(self, class_index: int) -> np.ndarray:
        """Gradient of logits[class_index] w.r.t. the captured activation."""
        if not 0 <= class_index < self.logits.shape[0]:
            raise IndexError(f"class index {class_index} out of range")
        score = T.select(self._logits_t, 0, class_index)
        self.gradient = T.backward(score, self._captured_t).data
        return self.gradient


def patchify_embed(image: np.ndarray, weights: VitWeights, config: VitConfig) -> np.ndarray:
    """Image [3,H,W] -> token matrix [tokens, embed_dim].

    Row 0 is the CLS token, rows 1..N the patch projections in raster order;
    positional embeddings are added to every row.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (3, config.image_size, config.image_size):
        raise ShapeError(
            f"patchify_embed: image shape {image.shape}, expected (3, {config.image_size}, {config.image_size})")
    rt = weights.runtime()
    p, g = config.patch_size, config.grid
    # [3,H,W] -> [g, g, 3, p, p] -> [g*g, 3*p*p], channel-major within a patch
    patches = image.reshape(3, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(g * g, 3 * p * p)
    embedded = patches @ rt.patch_kernel.T + rt.patch_bias
    tokens = np.empty((config.tokens, config.embed_dim))
    tokens[0] = rt.cls_token
    tokens[1:] = embedded
    return tokens + rt.pos_embed


def _linear(x: Tensor, wT: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, wT), b)


def _attention(x: Tensor, blk: _BlockRuntime, config: VitConfig,
               astro: Optional[AstroParams]) -> tuple[Tensor, Optional[AstroTrace]]:
    d, heads = config.embed_dim, config.num_heads
    hd = d // heads
    qkv = _linear(x, blk.qkv_wT, blk.qkv_b)
    q = T.slice_cols(qkv, 0, d)
    k = T.slice_cols(qkv, d, 2 * d)
    v = T.slice_cols(qkv, 2 * d, 3 * d)
    outs = []
    for h in range(heads):
        lo, hi = h * hd, (h + 1) * hd
        q_h = T.slice_cols(q, lo, hi)
        k_h = T.slice_cols(k, lo, hi)
        v_h = T.slice_cols(v, lo, hi)
        scores = T.scale(T.matmul(q_h, T.transpose(k_h)), 1.0 / np.sqrt(hd))
        attn = T.softmax_rows(scores)
        outs.append(T.matmul(attn, v_h))
    merged = T.concat_cols(outs)
    if astro is not None:
        return astro_linear_forward(merged, blk.proj_w, blk.proj_b, astro)
    return _linear(merged, blk.proj_wT, blk.proj_b_t), None


def _encoder_block(x: Tensor, blk: _BlockRuntime, config: VitConfig,
                   astro: Optional[AstroParams]) -> tuple[Tensor, Optional[AstroTrace]]:
    attn_out, trace = _attention(T.layer_norm(x, blk.ln1_g, blk.ln1_b, config.ln_eps),
                                 blk, config, astro)
    x = T.add(x, attn_out)
    mlp_in = T.layer_norm(x, blk.ln2_g, blk.ln2_b, config.ln_eps)
    mlp_out = _linear(T.gelu(_linear(mlp_in, blk.fc1_wT, blk.fc1_b)), blk.fc2_wT, blk.fc2_b)
    return T.add(x, mlp_out), trace


def forward(image: np.ndarray, weights: VitWeights, config: VitConfig,
            astro: Optional[AstroParams] = None,
            capture_block: Optional[int] = None) -> CaptureBundle:
    """Full forward pass; returns logits plus the captured activation and tape.

    ``capture_block`` is the encoder block whose *input* (= input of its first
    layer-norm) is recorded for CAM; the default is the final block.  When
    astro params are given, block 0's attention projection runs as the
    astrocytic layer, which lives in the eager prefix and therefore must come
    before the capture point.
    """
    cap = config.num_blocks - 1 if capture_block is None else capture_block
    if not 0 <= cap < config.num_blocks:
        raise ValueError(f"capture_block {cap} out of range for {config.num_blocks} blocks")
    if astro is not None and cap == 0:
        raise ValueError("capture_block 0 is incompatible with the astrocytic layer in block 0")

    rt = weights.runtime()
    x = Tensor(patchify_embed(image, weights, config))
    trace = None
    for i in range(cap):
        x, blk_trace = _encoder_block(x, rt.blocks[i], config, astro if i == 0 else None)
        if blk_trace is not None:
            trace = blk_trace

    captured = x.data
    tape = Tape()
    watched = tape.watch(x)
    h = watched
    for i in range(cap, config.num_blocks):
        h, _ = _encoder_block(h, rt.blocks[i], config, None)
    h = T.layer_norm(h, rt.norm_g, rt.norm_b, config.ln_eps)
    cls = T.slice_rows(h, 0, 1)
    logits_t = _linear(cls, rt.head_wT, rt.head_b)
    logits = logits_t.data[0]
    if not np.all(np.isfinite(logits)):
        raise NumericError("forward: non-finite logits")

    return CaptureBundle(logits=logits, captured=captured, gradient=None,
                         astro_trace=trace, capture_block=cap,
                         _logits_t=logits_t, _captured_t=watched)


def predict(image: np.ndarray, weights: VitWeights, config: VitConfig) -> int:
    """Top-1 class of the *unmodulated* model; ties break to the lowest index."""
    bundle = forward(image, weights, config, astro=None)
    return int(np.argmax(bundle.logits))
