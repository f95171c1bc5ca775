"""Mixture-of-Experts symmetry, weight matching and linear mode connectivity."""
from .lmc import (BarrierReport, InterpolationCurve, RankReport, accuracy_barrier, barrier_report,
                  brute_force_best_permutation, eval_curve, interpolate_params, loss_barrier,
                  metric_auc, ratio_report)
from .matching import (AlignmentResult, align_moe, center_gates, expert_neuron_match,
                       gate_cost_matrix, gram_cost_matrix, solve_lap)
from .model import (ExpertParams, Gates, MoEConfig, MoEParams, dense_forward, expert_forward,
                    gate_scores, in_omega, moe_forward, shared_forward, sparse_forward,
                    top_k_indices)
from .numerics import RngStream, relu, stable_softmax, trapezoid_integral
from .symmetry import (GroupElement, HiddenPerms, apply_group, apply_hidden_perms,
                       plant_equivalent, random_group_element)

__version__ = "0.1.0"
