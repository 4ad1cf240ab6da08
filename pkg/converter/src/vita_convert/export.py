"""Export a ViT-B/16 checkpoint to the tensor-container format.

The source of truth is a torchvision VisionTransformer: either a seeded
random initialization or a state-dict file (torchvision or fc1/fc2-style key
naming). The export writes the container, re-reads it to prove the bytes
round-trip, and records reference logits for a handful of probe images so
the consuming engine can be checked for numerical parity later.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision.models import vit_b_16

from .container import read_container, write_container
from .errors import ConvertError

# geometry of the one supported architecture, under both of its common ids
_VIT_B_16 = {
    "image_size": 224,
    "patch_size": 16,
    "embed_dim": 768,
    "num_blocks": 12,
    "mlp_dim": 3072,
    "num_classes": 1000,
}
MODEL_IDS = {
    "vit_base_patch16_224": _VIT_B_16,
    "vit_b_16": _VIT_B_16,
}

PROBE_SIZE = 256  # shorter-side resize target; probes at this size skip resampling
CROP_SIZE = 224
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def expected_shapes(geom: dict) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes, in container write order."""
    d = geom["embed_dim"]
    p = geom["patch_size"]
    mlp = geom["mlp_dim"]
    tokens = (geom["image_size"] // p) ** 2 + 1
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, 3, p, p),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (tokens, d),
    }
    for i in range(geom["num_blocks"]):
        b = f"blocks.{i}."
        shapes[b + "ln1.weight"] = (d,)
        shapes[b + "ln1.bias"] = (d,)
        shapes[b + "attn.qkv.weight"] = (3 * d, d)
        shapes[b + "attn.qkv.bias"] = (3 * d,)
        shapes[b + "attn.proj.weight"] = (d, d)
        shapes[b + "attn.proj.bias"] = (d,)
        shapes[b + "ln2.weight"] = (d,)
        shapes[b + "ln2.bias"] = (d,)
        shapes[b + "mlp.fc1.weight"] = (mlp, d)
        shapes[b + "mlp.fc1.bias"] = (mlp,)
        shapes[b + "mlp.fc2.weight"] = (d, mlp)
        shapes[b + "mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (geom["num_classes"], d)
    shapes["head.bias"] = (geom["num_classes"],)
    return shapes


def _source_key_map(num_blocks: int) -> dict[str, str]:
    """canonical name -> torchvision state-dict key."""
    mapping = {
        "cls_token": "class_token",
        "pos_embed": "encoder.pos_embedding",
        "patch_embed.weight": "conv_proj.weight",
        "patch_embed.bias": "conv_proj.bias",
        "norm.weight": "encoder.ln.weight",
        "norm.bias": "encoder.ln.bias",
        "head.weight": "heads.head.weight",
        "head.bias": "heads.head.bias",
    }
    for i in range(num_blocks):
        dst = f"blocks.{i}."
        src = f"encoder.layers.encoder_layer_{i}."
        mapping[dst + "ln1.weight"] = src + "ln_1.weight"
        mapping[dst + "ln1.bias"] = src + "ln_1.bias"
        mapping[dst + "attn.qkv.weight"] = src + "self_attention.in_proj_weight"
        mapping[dst + "attn.qkv.bias"] = src + "self_attention.in_proj_bias"
        mapping[dst + "attn.proj.weight"] = src + "self_attention.out_proj.weight"
        mapping[dst + "attn.proj.bias"] = src + "self_attention.out_proj.bias"
        mapping[dst + "ln2.weight"] = src + "ln_2.weight"
        mapping[dst + "ln2.bias"] = src + "ln_2.bias"
        mapping[dst + "mlp.fc1.weight"] = src + "mlp.0.weight"
        mapping[dst + "mlp.fc1.bias"] = src + "mlp.0.bias"
        mapping[dst + "mlp.fc2.weight"] = src + "mlp.3.weight"
        mapping[dst + "mlp.fc2.bias"] = src + "mlp.3.bias"
    return mapping


def fc_style_to_torchvision(sd: dict, num_blocks: int = 12) -> dict:
    """Rename an fc1/fc2-style ViT state dict onto torchvision's key scheme.

    The alternate naming uses cls_token/pos_embed/patch_embed.proj at the top
    level and blocks.N.{norm1,attn.qkv,attn.proj,norm2,mlp.fc1,mlp.fc2}.
    Tensor shapes are key-compatible, so renaming is all that is needed.
    """
    renames = {
        "cls_token": "class_token",
        "pos_embed": "encoder.pos_embedding",
        "patch_embed.proj.weight": "conv_proj.weight",
        "patch_embed.proj.bias": "conv_proj.bias",
        "norm.weight": "encoder.ln.weight",
        "norm.bias": "encoder.ln.bias",
        "head.weight": "heads.head.weight",
        "head.bias": "heads.head.bias",
    }
    for i in range(num_blocks):
        src = f"blocks.{i}."
        dst = f"encoder.layers.encoder_layer_{i}."
        renames[src + "norm1.weight"] = dst + "ln_1.weight"
        renames[src + "norm1.bias"] = dst + "ln_1.bias"
        renames[src + "attn.qkv.weight"] = dst + "self_attention.in_proj_weight"
        renames[src + "attn.qkv.bias"] = dst + "self_attention.in_proj_bias"
        renames[src + "attn.proj.weight"] = dst + "self_attention.out_proj.weight"
        renames[src + "attn.proj.bias"] = dst + "self_attention.out_proj.bias"
        renames[src + "norm2.weight"] = dst + "ln_2.weight"
        renames[src + "norm2.bias"] = dst + "ln_2.bias"
        renames[src + "mlp.fc1.weight"] = dst + "mlp.0.weight"
        renames[src + "mlp.fc1.bias"] = dst + "mlp.0.bias"
        renames[src + "mlp.fc2.weight"] = dst + "mlp.3.weight"
        renames[src + "mlp.fc2.bias"] = dst + "mlp.3.bias"
    out = {}
    for key, value in sd.items():
        if key not in renames:
            raise ConvertError(f"checkpoint key {key!r} has no torchvision equivalent")
        out[renames[key]] = value
    return out


def _load_state_dict(path) -> dict:
    try:
        sd = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ConvertError(f"{path}: cannot load checkpoint ({exc})") from exc
    # tolerate the usual single-level wrappers around the actual state dict
    for wrapper in ("state_dict", "model"):
        if isinstance(sd, dict) and wrapper in sd and isinstance(sd[wrapper], dict):
            sd = sd[wrapper]
    if not isinstance(sd, dict) or not sd:
        raise ConvertError(f"{path}: checkpoint does not contain a state dict")
    if "conv_proj.weight" in sd:
        return sd
    if "patch_embed.proj.weight" in sd:
        return fc_style_to_torchvision(sd)
    raise ConvertError(f"{path}: unrecognized checkpoint key scheme")


def build_source_model(model_id: str, checkpoint=None, seed: int = 0):
    """Construct the torch model that acts as the numerical reference.

    Without a checkpoint the weights are a seeded random draw; torchvision
    zero-fills the classifier, which would map every image to identical
    logits, so the head is re-drawn from the same seeded stream.
    """
    if model_id not in MODEL_IDS:
        known = ", ".join(sorted(MODEL_IDS))
        raise ConvertError(f"unknown checkpoint id {model_id!r} (known: {known})")
    torch.manual_seed(seed)
    model = vit_b_16(weights=None)
    if checkpoint is None:
        torch.nn.init.normal_(model.heads.head.weight, std=0.02)
        torch.nn.init.normal_(model.heads.head.bias, std=0.02)
        source = f"random-init(seed={seed})"
    else:
        sd = _load_state_dict(checkpoint)
        try:
            model.load_state_dict(sd, strict=True)
        except RuntimeError as exc:
            raise ConvertError(f"{checkpoint}: {exc}") from exc
        source = os.fspath(checkpoint)
    model.eval()
    return model, source


def canonical_tensors(model, geom: dict) -> dict[str, np.ndarray]:
    """Model state dict keyed by canonical names, as float32 arrays."""
    sd = model.state_dict()
    shapes = expected_shapes(geom)
    key_map = _source_key_map(geom["num_blocks"])
    out: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        tensor = sd[key_map[name]]
        # the source stores the class token and position table with a leading
        # batch axis; the container keeps them squeezed
        if name == "cls_token":
            tensor = tensor.reshape(-1)
        elif name == "pos_embed":
            tensor = tensor.reshape(tensor.shape[-2], tensor.shape[-1])
        arr = tensor.detach().to(torch.float32).numpy()
        if arr.shape != shape:
            raise ConvertError(f"tensor {name!r}: expected shape {shape}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ConvertError(f"tensor {name!r}: non-finite values")
        out[name] = np.ascontiguousarray(arr)
    return out


def render_probes(directory, count: int, seed: int) -> list[Path]:
    """Seeded RGB noise images sized so engine preprocessing never resamples."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        arr = rng.integers(0, 256, size=(PROBE_SIZE, PROBE_SIZE, 3), dtype=np.uint8)
        path = directory / f"probe_{i}.png"
        Image.fromarray(arr, "RGB").save(path)
        paths.append(path)
    return paths


def preprocess(path) -> torch.Tensor:
    """Engine-equivalent preprocessing: shorter side to 256, center crop 224,
    scale to [0,1], ImageNet normalization. Returns a [1,3,224,224] tensor."""
    im = Image.open(path).convert("RGB")
    w, h = im.size
    short = min(w, h)
    if short != PROBE_SIZE:
        scale = PROBE_SIZE / short
        im = im.resize((round(w * scale), round(h * scale)), Image.BILINEAR)
        w, h = im.size
    left = (w - CROP_SIZE) // 2
    top = (h - CROP_SIZE) // 2
    im = im.crop((left, top, left + CROP_SIZE, top + CROP_SIZE))
    arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(arr.transpose(2, 0, 1))[None]


@dataclass(frozen=True)
class TensorRecord:
    name: str
    shape: tuple[int, ...]
    sha256: str  # hex digest of the little-endian float32 payload


@dataclass(frozen=True)
class ProbeRecord:
    image: str  # path relative to the report file
    logits: tuple[float, ...]
    predicted_class: int


@dataclass
class ExportReport:
    model: str
    source: str
    container: str
    container_sha256: str
    tensor_count: int
    tensors: list[TensorRecord] = field(default_factory=list)
    probes: list[ProbeRecord] = field(default_factory=list)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "ExportReport":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        raw["tensors"] = [TensorRecord(name=t["name"], shape=tuple(t["shape"]),
                                       sha256=t["sha256"]) for t in raw["tensors"]]
        raw["probes"] = [ProbeRecord(image=p["image"], logits=tuple(p["logits"]),
                                     predicted_class=p["predicted_class"]) for p in raw["probes"]]
        return cls(**raw)


def default_report_path(out_path) -> str:
    return str(out_path) + ".report.json"


def _file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def export_weights(model_id: str, out_path, checkpoint=None, seed: int = 0,
                   probe_dir=None, probe_count: int = 3,
                   report_path=None) -> ExportReport:
    """Write the container, verify it byte-for-byte, and record probe logits.

    Checksums in the returned report are computed from the re-read container,
    so they describe the file actually on disk, not the in-memory source.
    """
    if probe_count < 3:
        raise ConvertError("at least 3 probe images are required")
    geom = MODEL_IDS.get(model_id)
    if geom is None:
        known = ", ".join(sorted(MODEL_IDS))
        raise ConvertError(f"unknown checkpoint id {model_id!r} (known: {known})")
    model, source = build_source_model(model_id, checkpoint=checkpoint, seed=seed)
    tensors = canonical_tensors(model, geom)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_container(out_path, tensors)

    readback = read_container(out_path)
    if list(readback) != list(tensors):
        raise ConvertError(f"{out_path}: tensor names changed across the write/read cycle")
    records = []
    for name, arr in tensors.items():
        stored = readback[name]
        payload = stored.astype("<f4").tobytes()
        if payload != arr.astype("<f4").tobytes():
            raise ConvertError(f"{out_path}: tensor {name!r} not bitwise stable across write/read")
        records.append(TensorRecord(name=name, shape=tuple(stored.shape),
                                    sha256=hashlib.sha256(payload).hexdigest()))

    if report_path is None:
        report_path = default_report_path(out_path)
    report_dir = Path(report_path).parent
    if probe_dir is None:
        probe_dir = out_path.parent / (out_path.stem + "_probes")
    probes = []
    for probe_path in render_probes(probe_dir, probe_count, seed):
        with torch.no_grad():
            logits = model(preprocess(probe_path))[0].to(torch.float32).numpy()
        probes.append(ProbeRecord(
            image=os.path.relpath(probe_path, start=report_dir),
            logits=tuple(float(v) for v in logits),
            predicted_class=int(np.argmax(logits)),
        ))

    report = ExportReport(
        model=model_id,
        source=source,
        container=str(out_path),
        container_sha256=_file_sha256(out_path),
        tensor_count=len(records),
        tensors=records,
        probes=probes,
    )
    report.to_json(report_path)
    return report
