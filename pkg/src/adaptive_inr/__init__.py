"""Adaptive sinusoidal implicit neural representations.

Sinusoidal MLPs with spectral analysis of the first layers, input frequency
densification, targeted weight decay and structured pruning, driven by a
staged training schedule.
"""

from .pruning import make_plan, prune_below, stability_bound, twd_loss
from .schedule import OptimizerConfig, SchedulePlan, Stage, resume, run
from .siren import SirenNet, append_input_neurons, forward, init_siren, load_checkpoint, remove_pruned, save_checkpoint
from .spectral import amplitude, bessel_j, expand_neuron, layer0_spectrum, plan_densification, tail_bound
from .tasks import FitTask, evaluate, image_task, psnr, sdf_task, synthetic_1d

__version__ = "0.1.0"
