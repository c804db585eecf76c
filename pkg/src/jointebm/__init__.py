"""Energy-based structured prediction trained with a jointly learned log-partition."""
from .data import Dataset, Split, parse_label_ranking_csv, parse_libsvm_multilabel, split, synth_label_ranking, synth_multilabel
from .energy import BILINEAR, LINEAR_QUADRATIC, Coupling, EnergyModel, coupling_for, energy, grad_energy
from .evaluation import f1_example, f1_score, kendall_score, kendall_tau, score_dataset, tau_vs_oracle
from .inference import ModeSolverConfig, hungarian, mode_birkhoff, mode_pairwise, mode_permutahedron, mode_unary, predict
from .losses import Batch, exact_mle_objective, exact_objective, log_partition, minmin_objective
from .nets import NetSpec, Network
from .spaces import OutputSpace, binary_vectors, enumerate_space, permutation_matrices, permutation_vectors, sample_uniform
from .training import TrainConfig, adam_step, grid_search, train

__version__ = "0.1.0"
