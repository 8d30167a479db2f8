"""Desk-scale lab for differentially private quantized training.

Building blocks: an unbiased stochastic 4-bit quantizer, a small
feed-forward network with per-example gradients and quantization hooks,
a DP-SGD optimizer, a Renyi-DP accountant for sampled Gaussian mechanisms,
a loss-aware dynamic layer scheduler, diagnostics, and a training harness
wrapped in a scikit-learn classifier.
"""

from .accounting import (DEFAULT_ORDERS, PrivacyLedger, RdpCurve, SgmEvent,
                         analysis_fraction, compose, eps_at_delta,
                         ledger_epsilon, rdp_sgm)
from .data import (DatasetHandle, load_idx_dataset, poisson_batches,
                   split_holdout, synth_dataset)
from .diagnostics import (CostModelInput, NormAmplificationReport, StepStats,
                          norm_amplification_report, record_step_stats,
                          speedup_estimate)
from .estimator import DPQuantClassifier
from .network import (LayerSpec, Network, ParamSnapshot, build_network,
                      loss_batch, parse_architecture, restore, snapshot)
from .optim import (DpSgdConfig, clip_per_example, dp_step, noise_vector,
                    sgd_step)
from .quantize import (QuantGrid, QuantizerSpec, build_grid,
                       empirical_moments, quantize)
from .scheduling import (ImpactTable, SchedulerConfig, compute_loss_impact,
                         epoch_schedule, layer_probabilities, select_targets,
                         singleton_policies, uniform_table)
from .training import MetricsRecord, TrainResult, emit_metrics, train_loop

__version__ = "0.1.0"
