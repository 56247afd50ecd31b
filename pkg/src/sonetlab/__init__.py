"""Stabilized skew-symmetric neural ODE blocks, ODE solvers, attacks and stability checks."""

import os as _os

# cap BLAS worker threads before numpy loads its backend
if _os.environ.get("SONETLAB_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["SONETLAB_THREADS"])

from .attacks import (AttackConfig, RobustReport, cw_linf, pgd_l2, pgd_linf,
                      robust_eval, spsa)
from .blocks import (Context, Model, NetworkSpec, SkewOdeBlockParams,
                     assemble_network, channel_copy, load_checkpoint, ode_block_forward,
                     odenet_block_forward, resnet_block_forward, save_checkpoint,
                     skew_field_eval)
from .data import Dataset, load_cifar_binary, load_idx, make_synthetic, mnist_subset
from .experiment import ExperimentConfig, emit_table, run_experiment
from .functional import ActivationKind
from .solvers import (SolverConfig, StepTrace, dopri5_integrate, euler_integrate,
                      integrate, rk4_integrate)
from .stability import (build_block_matrix, block_jacobian, jacobi_eigenvalues,
                        lyapunov_probe, spectral_abscissa_bound,
                        transition_orthogonality_check)
from .tensor import Tape, Tensor, fd_gradient, grad
from .training import TrainConfig, natural_train, sgd_momentum_step, trades_train

__version__ = "0.1.0"

__all__ = [
    "ActivationKind",
    "AttackConfig",
    "Context",
    "Dataset",
    "ExperimentConfig",
    "Model",
    "NetworkSpec",
    "RobustReport",
    "SkewOdeBlockParams",
    "SolverConfig",
    "StepTrace",
    "Tape",
    "Tensor",
    "TrainConfig",
    "assemble_network",
    "block_jacobian",
    "build_block_matrix",
    "channel_copy",
    "cw_linf",
    "dopri5_integrate",
    "emit_table",
    "euler_integrate",
    "fd_gradient",
    "grad",
    "integrate",
    "jacobi_eigenvalues",
    "load_checkpoint",
    "load_cifar_binary",
    "load_idx",
    "lyapunov_probe",
    "make_synthetic",
    "mnist_subset",
    "natural_train",
    "ode_block_forward",
    "odenet_block_forward",
    "pgd_l2",
    "pgd_linf",
    "resnet_block_forward",
    "rk4_integrate",
    "robust_eval",
    "run_experiment",
    "save_checkpoint",
    "sgd_momentum_step",
    "skew_field_eval",
    "spectral_abscissa_bound",
    "spsa",
    "trades_train",
    "transition_orthogonality_check",
]
