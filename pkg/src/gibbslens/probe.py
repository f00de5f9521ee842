"""Energy-histogram probes for layer distributions.

A layer that computes filter responses induces a Gibbs density whose
energy at each spatial location is (minus) the aggregated response; the
histogram of those per-location energies estimates the layer's
distribution without ever touching the intractable normalizer. This
module extracts such energy fields from a forward capture, bins them,
builds the analytic Gaussian reference, and compares the two with a
smoothed KL divergence. It also carries two small algebraic checkers:
the product-of-experts identity for softmax heads and the bilinear RBM
energy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .network import Capture, Conv, NetworkSpec, Parameters, forward

CHANNEL_MEAN = "mean"
CHANNEL_SUM = "sum"


@dataclass(frozen=True)
class Binning:
    """Uniform half-open bins [edge_i, edge_{i+1}) over [lo, hi)."""

    lo: float = -128.0
    hi: float = 128.0
    bin_count: int = 64
    smoothing_epsilon: float = 1e-6

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"binning range [{self.lo}, {self.hi}) is empty")
        if self.bin_count < 2:
            raise ValueError(f"bin_count must be >= 2, got {self.bin_count}")
        if self.smoothing_epsilon <= 0:
            raise ValueError(f"smoothing_epsilon must be positive, got {self.smoothing_epsilon}")

    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bin_count + 1)


DEFAULT_BINNING = Binning()


@dataclass
class EnergyHistogram:
    """Binned probability estimate; under/overflow hold out-of-range mass."""

    binning: Binning
    mass: np.ndarray
    sample_count: int
    underflow: float
    overflow: float

    def total_mass(self) -> float:
        return float(self.mass.sum() + self.underflow + self.overflow)

    def to_dict(self) -> dict:
        return {
            "mass": self.mass.tolist(),
            "sample_count": self.sample_count,
            "underflow": self.underflow,
            "overflow": self.overflow,
        }

    @classmethod
    def from_dict(cls, binning: Binning, d: dict) -> "EnergyHistogram":
        return cls(
            binning=binning,
            mass=np.asarray(d["mass"], dtype=np.float64),
            sample_count=int(d["sample_count"]),
            underflow=float(d["underflow"]),
            overflow=float(d["overflow"]),
        )


def make_histogram(samples: np.ndarray, binning: Binning = DEFAULT_BINNING) -> EnergyHistogram:
    """Count samples into half-open bins, normalized by the sample count."""
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("cannot build a histogram from zero samples")
    edges = binning.edges()
    idx = np.searchsorted(edges, s, side="right") - 1  # exact edge goes right
    under = int(np.sum(idx < 0))
    over = int(np.sum(idx >= binning.bin_count))
    interior = idx[(idx >= 0) & (idx < binning.bin_count)]
    counts = np.bincount(interior, minlength=binning.bin_count).astype(np.float64)
    n = s.size
    return EnergyHistogram(
        binning=binning,
        mass=counts / n,
        sample_count=n,
        underflow=under / n,
        overflow=over / n,
    )


def gaussian_reference(
    binning: Binning, mean: float = 0.0, variance: float = 1024.0
) -> EnergyHistogram:
    """Exact N(mean, variance) bin masses; tails fold into under/overflow."""
    if variance <= 0:
        raise ValueError(f"variance must be positive, got {variance}")
    std = math.sqrt(variance)
    edges = binning.edges()
    cdf = np.array([0.5 * (1.0 + math.erf((e - mean) / (std * math.sqrt(2.0)))) for e in edges])
    return EnergyHistogram(
        binning=binning,
        mass=np.diff(cdf),
        sample_count=0,
        underflow=float(cdf[0]),
        overflow=float(1.0 - cdf[-1]),
    )


def _smoothed(h: EnergyHistogram) -> np.ndarray:
    v = np.concatenate(([h.underflow], h.mass, [h.overflow]))
    v = v + h.binning.smoothing_epsilon
    return v / v.sum()


def kl_div(p: EnergyHistogram, q: EnergyHistogram) -> float:
    """KL(p || q) in nats over smoothed bins; under/overflow count as bins."""
    if p.binning != q.binning:
        raise ValueError(f"histograms use different binnings: {p.binning} vs {q.binning}")
    ps = _smoothed(p)
    qs = _smoothed(q)
    return float(np.sum(ps * np.log(ps / qs)))


# ---------------------------------------------------------------------------
# energy fields
# ---------------------------------------------------------------------------

def energy_field(
    capture: Capture,
    group: str,
    aggregate: str = CHANNEL_MEAN,
    negate: bool = False,
) -> np.ndarray:
    """Per-location aggregated filter responses of a group's conv layer.

    For each spatial location of the group's convolutional output (the
    pre-activation responses; pooling/ReLU live in the following layer),
    channels are aggregated by mean (default) or sum. The samples are the
    negated energy; ``negate=True`` returns the energy itself.
    """
    groups = capture.spec.groups
    if group not in groups.tags:
        raise ValueError(f"group {group!r} is not present in this capture; tags: {sorted(set(groups.tags))}")
    conv_layers = [
        i for i in groups.layers_of(group) if isinstance(capture.spec.layers[i], Conv)
    ]
    if not conv_layers:
        raise ValueError(f"group {group!r} contains no convolutional layer to probe")
    response = capture.layers[conv_layers[0]]
    if aggregate == CHANNEL_MEAN:
        field = response.mean(axis=-1)
    elif aggregate == CHANNEL_SUM:
        field = response.sum(axis=-1)
    else:
        raise ValueError(f"unknown aggregate {aggregate!r}; use {CHANNEL_MEAN!r} or {CHANNEL_SUM!r}")
    field = field.ravel()
    return -field if negate else field


# ---------------------------------------------------------------------------
# algebraic checks
# ---------------------------------------------------------------------------

def poe_deviation(beta: np.ndarray, g: np.ndarray) -> float:
    """Max elementwise gap between softmax(beta @ g) and the literal
    normalized product of experts prod_k exp(g_k)^beta_lk."""
    beta = np.asarray(beta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    direct = ops.softmax(beta @ g)
    experts = np.prod(np.exp(g)[None, :] ** beta, axis=1)
    product = experts / experts.sum()
    return float(np.max(np.abs(direct - product)))


@dataclass(frozen=True)
class RbmParams:
    """Bilinear energy parameters: W (V, H), visible and hidden bias vectors."""

    w: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        bv = np.asarray(self.visible_bias, dtype=np.float64)
        bh = np.asarray(self.hidden_bias, dtype=np.float64)
        if w.ndim != 2 or bv.shape != (w.shape[0],) or bh.shape != (w.shape[1],):
            raise ValueError(
                f"inconsistent shapes: W {w.shape}, visible bias {bv.shape}, hidden bias {bh.shape}"
            )
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "visible_bias", bv)
        object.__setattr__(self, "hidden_bias", bh)


def rbm_energy(params: RbmParams, x: np.ndarray, f: np.ndarray) -> float:
    """-(b_H . f + x^T W f + b_V . x)."""
    x = np.asarray(x, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    v, h = params.w.shape
    if x.shape != (v,) or f.shape != (h,):
        raise ValueError(f"x {x.shape} / f {f.shape} do not match W {params.w.shape}")
    return float(-(params.hidden_bias @ f + x @ params.w @ f + params.visible_bias @ x))


# ---------------------------------------------------------------------------
# full probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeReport:
    """Pixel and energy histograms of one image plus KLs to the reference."""

    binning: Binning
    reference_mean: float
    reference_variance: float
    pixel_hist: EnergyHistogram
    f1_hist: EnergyHistogram
    f2_hist: EnergyHistogram
    probabilities: np.ndarray
    kl_input: float
    kl_f1: float

    def to_json(self) -> str:
        doc = {
            "binning": {
                "lo": self.binning.lo,
                "hi": self.binning.hi,
                "bin_count": self.binning.bin_count,
                "smoothing_epsilon": self.binning.smoothing_epsilon,
            },
            "reference": {"mean": self.reference_mean, "variance": self.reference_variance},
            "pixel_hist": self.pixel_hist.to_dict(),
            "f1_hist": self.f1_hist.to_dict(),
            "f2_hist": self.f2_hist.to_dict(),
            "probabilities": self.probabilities.tolist(),
            "kl_input": self.kl_input,
            "kl_f1": self.kl_f1,
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ProbeReport":
        doc = json.loads(text)
        binning = Binning(**doc["binning"])
        return cls(
            binning=binning,
            reference_mean=float(doc["reference"]["mean"]),
            reference_variance=float(doc["reference"]["variance"]),
            pixel_hist=EnergyHistogram.from_dict(binning, doc["pixel_hist"]),
            f1_hist=EnergyHistogram.from_dict(binning, doc["f1_hist"]),
            f2_hist=EnergyHistogram.from_dict(binning, doc["f2_hist"]),
            probabilities=np.asarray(doc["probabilities"], dtype=np.float64),
            kl_input=float(doc["kl_input"]),
            kl_f1=float(doc["kl_f1"]),
        )


def probe(
    spec: NetworkSpec,
    params: Parameters,
    image: np.ndarray,
    binning: Binning = DEFAULT_BINNING,
    aggregate: str = CHANNEL_MEAN,
    negate: bool = False,
    reference_mean: float = 0.0,
    reference_variance: float = 1024.0,
) -> ProbeReport:
    """Histogram the input pixels and the F1/F2 energy fields of one image,
    with KL(reference || estimate) for the input and F1 panels."""
    capture = forward(spec, params, np.asarray(image, dtype=np.float64))
    reference = gaussian_reference(binning, reference_mean, reference_variance)
    pixel_hist = make_histogram(capture.image.ravel(), binning)
    f1_hist = make_histogram(energy_field(capture, "F1", aggregate, negate), binning)
    f2_hist = make_histogram(energy_field(capture, "F2", aggregate, negate), binning)
    return ProbeReport(
        binning=binning,
        reference_mean=reference_mean,
        reference_variance=reference_variance,
        pixel_hist=pixel_hist,
        f1_hist=f1_hist,
        f2_hist=f2_hist,
        probabilities=capture.probs,
        kl_input=kl_div(reference, pixel_hist),
        kl_f1=kl_div(reference, f1_hist),
    )
