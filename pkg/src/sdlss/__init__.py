"""Sparsity-driven latent space sampling for generative compressed sensing."""
from .diffcore import Tape, Tensor, PiecewiseLinear, LEAKY
from .models import (GeneratorModel, MeasurementOperator, build_generator, build_linear_sensor,
                     build_network_sensor, gen_forward, sense)
from .pml import PmlConfig, hard_threshold, pml_inner_loop, recover, train
from .metrics import psnr_db, reconstruction_error_db, ssim

__version__ = "0.1.0"
