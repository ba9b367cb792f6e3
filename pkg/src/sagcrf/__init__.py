"""Linear-chain CRF training with stochastic average gradient methods."""
from .crf import (
    ChainMarginals, ChainSequence, LabelAlphabet, LabeledSequence, Potentials, SparseVector,
    brute_force_inference, compute_potentials, forward_backward, regularized_objective, sequence_grad,
    sequence_nll, viterbi,
)
from .errors import (
    ContractError, ConvergenceError, NonFiniteError, RefusalError, SagcrfError, TabularFormatError, TuningError,
)
from .features import Dataset, FeatureIndex, build_feature_index, load_tabular, synth_generate, synth_split
from .memory import GradientMemory, apply_new_gradient, memory_report
from .objective import CrfObjective
from .sag import SagConfig, sag_train
from .weights import ScaledWeights

__version__ = "0.1.0"
