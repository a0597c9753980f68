"""Similarity-regularized ReLU networks and a first-layer signature extraction attack."""
from .data import Dataset, IdxFormatError, load_mnist, make_random_dataset, read_idx
from .defense import DefenseConfig, select_defended_pairs, total_similarity_loss
from .extraction import (AttackConfig, AttackReport, CriticalPoint, Signature, cluster_signatures,
                         directional_derivative_pair, evaluate_against_ground_truth,
                         find_critical_points, recover_signature, run_layer1_attack)
from .harness import ExperimentConfig, parse_model_name, run_experiment, weight_stats
from .mlp import Architecture, MLPModel, TrainingConfig, forward, init_model, train
from .oracle import BudgetExhausted, Oracle, QueryBudget
from .theory import (InputRange, k_coefficients, model_attack_probability, monte_carlo_disagreement,
                     normal_angle, pair_attack_probability)

__version__ = "0.1.0"
