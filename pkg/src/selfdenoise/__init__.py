"""Self-supervised image denoising with a compressive multi-resolution
autoencoder, trained on identical noisy input/target pairs, plus diagnostics
that trace how gradient-descent training memorizes and re-queries samples.
"""

from .tensor import (
    Tape,
    Variable,
    avg_pool2,
    backward,
    checked_finite,
    conv2d,
    conv2d_transpose,
    l1_loss,
    leaky_relu,
    zero_grads,
)
from .model import (
    AutoencoderModel,
    ModelConfig,
    MultiScaleOutput,
    assert_no_skip_connections,
    build,
    mcnn_loss,
)
from .training import TrainConfig, TrainReport, adam_step, sample_patches, sgd_step, train
from .synth import (
    CleanImage,
    NoisePipelineConfig,
    PatchDataset,
    build_corpus,
    corrupt,
    gen_glyph,
    gen_lattice,
)
from .metrics import MetricReport, hf_energy, psnr, snr, ssim
from .kernel import (
    FlowTrace,
    KernelProbe,
    empirical_kernel,
    gradient_flow,
    verify_query_decomposition,
)

__version__ = "0.1.0"
