"""Safe imitation learning with barrier-constrained differentiable-QP heads.

Fuses any number of barrier-filtered control heads on the probability
simplex; the fused control provably inherits the heads' forward-invariance
guarantee.  Includes the QP solver and its KKT backward pass, a minimal
reverse-mode tape, the two benchmark robot tasks, an expert label
generator, and a closed-loop evaluation harness.
"""

from .autodiff import AdamState, Mlp, ShapeMismatch, Tape, adam_step, mse_loss
from .config import ConfigError, load_config
from .dynamics import AffineSystem, NonFiniteState, UnknownConstraint, fk, step
from .expert import Dataset, ExpertPolicy, SamplingExhausted, expert_control, generate_dataset
from .harness import MetricsReport, Trajectory, UnsafeStart, benchmark, closed_loop_run, compute_metrics
from .head import HeadOutput, HeadParams, head_forward, head_loss
from .hocbf import ClassK, ConstraintRow, DegenerateRow, HocbfCascade, assemble_row, psi_values, row_gradients
from .model import (AbnetModel, EmptyDataset, IncompatibleTasks, MlpPolicy, NonPositiveLoss,
                    build_baseline, build_model, fuse_by_loss, load_checkpoint, merge,
                    save_checkpoint, train_oneshot, train_scalable)
from .qp import IllConditioned, Infeasible, QpGradients, QpProblem, QpSolution, SingularKkt, SolverOptions, solve, solve_backward
from .tasks import Task, build_task

__version__ = "0.1.0"
