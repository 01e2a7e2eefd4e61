"""Gaussian radiation-field simulation and joint panel/antenna optimization."""

from .errors import (FeasibilityError, FormatError, NumericError, RadiosplatError,
                     SchemaError, ValidationError)
from .scene import (FasRegion, Pose, RisPanel, Scene, User, dbm_to_watts,
                    load_scene, save_scene, watts_to_dbm, wrap_angle)
from .field import (GaussianPrimitive, RadiationField, VirtualEmitter,
                    apply_coefficients, composite_field, direct_path_primitive,
                    eval_field, eval_field_gradient, eval_field_many,
                    eval_primitive, power_gradient, received_sample,
                    ris_to_primitives, virtual_emitter_field)
from .splatting import (AngularGrid, AngularSpectrum, SplatCoefficients, project,
                        spectrum_metrics, splat)
from .channel import (ChannelRealization, CorrelationSpec, correlation_matrix,
                      effective_channel, hermitian_sqrt, rate, sample_channel,
                      sinr_channel)
from .srn import (SrnConfig, SrnContext, SrnModel, SsimConfig, TrainConfig,
                  complex_coeff, load_checkpoint, reconstruction_loss,
                  render_spectrum, save_checkpoint, srn_forward, ssim, train)
from .optimize import (Codebook, GaConfig, GreedyConfig, OptimizerState, ScaConfig,
                       SceneObjective, fao, fas_gradient, marginal_power,
                       optimize_fas, optimize_ris_ga, optimize_ris_greedy, phi,
                       phi_int, project_feasible, rate_field, run_baseline,
                       sinr_field)
from .pointcloud import init_primitives_from_pointcloud
from .datasets import (SpectrumDataset, SpectrumSample, load_spectrum_dataset,
                       save_spectrum_dataset)
from .synthetic import (default_environment, demo_scene, generate_synthetic_scene,
                        synthesize_spectrum_samples, well_separated_emitters)

__version__ = "0.1.0"
