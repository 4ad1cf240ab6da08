import json

import numpy as np
from PIL import Image


def write_png(path, seed, size=(24, 24), mode="RGB"):
    rng = np.random.default_rng(seed)
    channels = (3,) if mode == "RGB" else ()
    arr = rng.integers(0, 256, size=size + channels, dtype=np.uint8)
    Image.fromarray(arr, mode).save(path)
    return path


def write_raw_heatmap(path, values):
    values = np.asarray(values, dtype="<f4")
    values.tofile(path)
    sidecar = {"width": int(values.shape[1]), "height": int(values.shape[0])}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh)
    return path
