"""Astrocyte-modulated Vision Transformer inference, CAM explainers,
human-alignment metrics, and an evaluation harness."""

from .astro import AstroParams, AstroState, AstroTrace, astro_linear_forward
from .cam import Heatmap, SpatialActivation, grad_cam, grad_cam_pp, tokens_to_grid, upsample_bilinear
from .harness import (EvalRecord, GridSpace, ManifestEntry, explain_single, grid_search,
                      load_manifest, preprocess_image, run_eval, stats_report)
from .metrics import MetricConfig, dsc, spearman, ssim, wilcoxon_rank_sum_one_tailed
from .model import (VIT_B_16, CaptureBundle, VitConfig, VitWeights, expected_tensor_specs,
                    forward, load_weights, patchify_embed, predict)
from .tensor import Tape, Tensor, backward, gelu, layer_norm, matmul, softmax_rows

__version__ = "0.1.0"
