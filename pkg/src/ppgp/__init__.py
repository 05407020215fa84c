"""Sparse Gaussian processes whose inducing set is inferred with a discrete point process."""
from .adgrad import CholeskyError, ShapeError, backward, check_gradients, leaf
from .kernel import KernelParams, gram, gram_diag
from .gp_core import (SvgpModel, collapsed_elbo, collapsed_q_u, exact_lml, marginals, predict,
                      uncollapsed_elbo)
from .point_process import PppPosterior, PriorSpec, cardinality_stats, kl_to_prior, log_pmf
from .estimators import (BaselineState, ConcreteConfig, concrete_gradient, enumerate_expectation,
                         masked_bound, sf_gradient)
from .trainer import TrainConfig, TrainHistory, run_training
from .dgp import DgpConfig, DgpModel, dgp_elbo, dgp_predict, dgp_train, init_dgp
from .data import Dataset, SynthSpec, corrupt_outputs, load_csv, posterior_gap, synth_generate
from .experiment import run_experiment
from .io import load_model, save_model

__version__ = "0.1.0"
