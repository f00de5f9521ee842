"""gibbs-lens: synthetic Gaussian-pixel digits, small CNNs, energy probes."""

from .ops import (
    KernelBank,
    Tensor,
    conv2d,
    cross_entropy,
    linear,
    maxpool2,
    relu,
    softmax,
)
from .synth import (
    DatasetFormatError,
    DatasetSpec,
    Split,
    SyntheticDataset,
    generate_dataset,
    generate_image,
    load_dataset,
    render_mask,
    save_dataset,
)
from .network import (
    Capture,
    LayerGroup,
    NetworkSpec,
    Parameters,
    TrainConfig,
    TrainMetrics,
    backward,
    build_network,
    evaluate,
    forward,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train,
)
from .probe import (
    Binning,
    DEFAULT_BINNING,
    EnergyHistogram,
    ProbeReport,
    RbmParams,
    energy_field,
    gaussian_reference,
    kl_div,
    make_histogram,
    poe_deviation,
    probe,
    rbm_energy,
)
from .rng import CounterRng

__version__ = "0.1.0"
