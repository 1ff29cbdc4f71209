"""Learned point-cloud codec trained as a constrained transport problem.

A compact, fully testable pipeline: density-sensitive learned downsampling,
a quantized latent with a factorized entropy model, a decodable range-coded
bitstream, and adversarial training that balances Chamfer distortion, a
critic-estimated quadratic Wasserstein distance, a transport-anchored
critic regularizer, and a bitrate penalty.
"""

from .cloud import (
    Block,
    DatasetSpec,
    PointCloud,
    fps,
    load_cloud,
    nonuniform_sample,
    partition_blocks,
    synth_dataset,
    write_cloud,
)
from .codec import Bitstream, EntropyModels, decode_bitstream, encode_bitstream
from .entropy import FactorizedModel, QuantizerConfig, dequantize, noise_proxy, quantize, rate_estimate
from .losses import LossBreakdown, LossWeights, generator_objective, discriminator_objective, ot_loss
from .metrics import MetricReport, chamfer_l2, compute_bpp, estimate_normals, psnr_point_to_plane
from .nets import Decoder, Discriminator, Encoder, LatentCode, NetConfig, Sampler, significance_select
from .training import (
    CheckpointMeta,
    TrainConfig,
    TrainState,
    compress_cloud,
    decompress_cloud,
    evaluate_cloud,
    fit,
    init_state,
    load_checkpoint,
    save_checkpoint,
    sweep_lambda,
    train_step,
)

__version__ = "0.1.0"
