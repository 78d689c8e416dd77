"""Content-preserving conditional diffusion for underwater image enhancement."""

from .diffusion import ImageTensor, mean_from_eps, q_posterior_mean, q_sample, to_metric_space, to_model_space
from .network import CPDMNet, ModelConfig, ccm_extract, init_parameters, predict_noise, variant_config
from .sampler import SampleConfig, reverse_step, run_sampler, sample
from .schedule import NoiseSchedule, make_linear_schedule, posterior_mean_coeffs
from .trainer import TrainConfig, TrainStepReport, train_loop, train_step

__version__ = "0.1.0"
