"""Astrocytic linear layer: iterative excitatory/inhibitory weight modulation.

Each output neuron of a token-shared linear layer gets a companion astrocyte
(1:1 ratio, no inter-astrocyte communication).  The astrocyte watches the
CLS-token output of its neuron across iterations, tracks an activity counter
bounded to [-tau, tau], and multiplies the neuron's effective weights by
alpha (excitatory), beta (inhibitory), or 1 each iteration.  After the last
iteration the output is rescaled so its mean per-token L2 norm matches the
unmodulated layer's.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class AstroParams:
    """The five astrocyte hyperparameters.

    beta may be 1.0 (together with alpha=1.0 this makes the layer a plain
    linear layer, which the identity tests rely on); useful inhibitory values
    lie strictly inside (0, 1).
    """

    k: int
    tau: int
    phi: float
    alpha: float
    beta: float

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not self.alpha >= 1.0:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if not (0.0 < self.beta <= 1.0):
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")

    @classmethod
    def parse(cls, text: str) -> "AstroParams":
        """Parse the CLI form "k,tau,phi,alpha,beta"."""
        parts = text.split(",")
        if len(parts) != 5:
            raise ValueError(f"expected 5 comma-separated values k,tau,phi,alpha,beta, got {text!r}")
        return cls(k=int(parts[0]), tau=int(parts[1]), phi=float(parts[2]),
                   alpha=float(parts[3]), beta=float(parts[4]))


@dataclass
class AstroState:
    """Per-neuron iteration state: activity counter, modulation diagonal, step."""

    A: np.ndarray       # int64, clamped to [-tau, tau]
    M_diag: np.ndarray  # float64, product of factors from {alpha, beta, 1}
    t: int


@dataclass
class AstroTrace:
    """Per-iteration record of the modulation trajectory, for inspection/tests."""

    y_cls: list = field(default_factory=list)    # CLS-token outputs per iteration
    A: list = field(default_factory=list)
    m: list = field(default_factory=list)
    M_diag: list = field(default_factory=list)
    norm_y0: float = 0.0
    norm_yk: float = 0.0
    ratio: float = 1.0

    def __len__(self) -> int:
        return len(self.M_diag)

    def dump_jsonl(self, path) -> None:
        """Write one JSON record per iteration (t = 0..k)."""
        with open(path, "w", encoding="utf-8") as fh:
            for t in range(len(self)):
                record = {
                    "t": t,
                    "y_cls": self.y_cls[t].tolist(),
                    "A": self.A[t].tolist(),
                    "m": self.m[t].tolist(),
                    "M_diag": self.M_diag[t].tolist(),
                }
                if t == len(self) - 1:
                    record["norm_y0"] = self.norm_y0
                    record["norm_yk"] = self.norm_yk
                    record["ratio"] = self.ratio
                fh.write(json.dumps(record) + "\n")


def update_activity(A_prev: np.ndarray, y_cls_prev: np.ndarray, phi: float, tau: int) -> np.ndarray:
    """Step the activity counters: +1 where the CLS output reached phi, else -1, clamped.

    The boundary counts as active: y == phi increments.
    """
    step = np.where(y_cls_prev >= phi, 1, -1)
    return np.clip(A_prev + step, -tau, tau)


def modulation_factor(A: np.ndarray, tau: int, alpha: float, beta: float) -> np.ndarray:
    """Per-neuron factor: alpha at the +tau bound, beta at the -tau bound, else 1."""
    return np.where(A >= tau, alpha, np.where(A <= -tau, beta, 1.0))


def normalize_output(y0: np.ndarray, yk: np.ndarray) -> np.ndarray:
    """Rescale yk so that the mean per-token L2 norm matches y0's.

    The mean runs over all tokens, CLS included.
    """
    if y0.shape != yk.shape:
        raise ShapeError(f"normalize_output: shapes differ {y0.shape} vs {yk.shape}")
    mean_norm_0 = np.linalg.norm(y0, axis=1).mean()
    mean_norm_k = np.linalg.norm(yk, axis=1).mean()
    if mean_norm_k == 0.0:
        raise NumericError("normalize_output: modulated output has zero mean token norm")
    return yk * (mean_norm_0 / mean_norm_k)


def astro_linear_forward(x: Tensor, W: np.ndarray, b: np.ndarray,
                         params: AstroParams, collect_trace: bool = True):
    """Run the astrocytic linear layer on x [tokens, d_in].

    Iteration t=0 is the unmodulated pass y(0) = x W^T + b; the activity
    update at step t consumes the CLS row of y(t-1), so k counts modulated
    presentations and the layer evaluates k+1 times in total.  Because the
    modulation matrix is diagonal, x (M W)^T + b == (x W^T) * M_diag + b and
    the token/weight product is computed once.

    Returns (y_hat: Tensor [tokens, d_out], trace: AstroTrace).
    """
    x_data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x_data.ndim != 2 or W.ndim != 2 or x_data.shape[1] != W.shape[1]:
        raise ShapeError(f"astro_linear_forward: x {x_data.shape} incompatible with W {W.shape}")
    d_out = W.shape[0]

    base = x_data @ W.T.astype(np.float64, copy=False)
    y0 = base + b
    trace = AstroTrace()

    state = AstroState(A=np.zeros(d_out, dtype=np.int64), M_diag=np.ones(d_out), t=0)
    if collect_trace:
        trace.y_cls.append(y0[0].copy())
        trace.A.append(state.A.copy())
        trace.m.append(np.ones(d_out))
        trace.M_diag.append(state.M_diag.copy())

    if params.k == 0:
        trace.norm_y0 = trace.norm_yk = float(np.linalg.norm(y0, axis=1).mean())
        trace.ratio = 1.0
        return Tensor(y0), trace

    y_prev = y0
    y_t = y0
    for t in range(1, params.k + 1):
        state.A = update_activity(state.A, y_prev[0], params.phi, params.tau)
        m = modulation_factor(state.A, params.tau, params.alpha, params.beta)
        state.M_diag = state.M_diag * m
        state.t = t
        y_t = base * state.M_diag + b
        if not np.all(np.isfinite(y_t)):
            raise NumericError(f"astro_linear_forward: non-finite output at iteration {t}")
        if collect_trace:
            trace.y_cls.append(y_t[0].copy())
            trace.A.append(state.A.copy())
            trace.m.append(m)
            trace.M_diag.append(state.M_diag.copy())
        y_prev = y_t

    y_hat = normalize_output(y0, y_t)
    trace.norm_y0 = float(np.linalg.norm(y0, axis=1).mean())
    trace.norm_yk = float(np.linalg.norm(y_t, axis=1).mean())
    trace.ratio = trace.norm_y0 / trace.norm_yk
    return Tensor(y_hat), trace
