"""Spiking-network robustness lab: surrogate-gradient training, l-inf attacks,
vulnerability analysis and gradient-sparsity regularized training."""

from .autodiff import SurrogateFamily, SurrogateSpec, Tensor, backward, gradient_check, heaviside_surrogate
from .model import SnnModel, binary_head, forward_T, grad_fy_input, lif_step, mlp, small_conv
from .attacks import AttackConfig, AttackFamily, ensemble_attack, fgsm, pgd, project_linf, surrogate_grid, transfer_attack
from .vulnerability import (
    LinearStub,
    ratio_bound_report,
    rho_adv_corner_oracle,
    rho_adv_firstorder,
    rho_rand_mc,
    sparsity_norms,
)
from .training import TrainConfig, evaluate, finite_diff_l1, sr_loss, train, train_epoch
from .data import Dataset, load_idx, synth_blobs, synth_frames

__version__ = "0.1.0"
