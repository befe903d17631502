"""gramdiff: differentiable stochastic regular grammars.

Learns production rules directly from sequences of (possibly noisy,
multi-label) terminal vectors, extracts human-readable rules from the learned
matrices, and applies the grammar to constrained decoding and forecasting.
"""

from .diffcore import (DimensionError, GraphError, ParameterError, Tensor,
                       backward, bce, gumbel_softmax, matmul, sigmoid, softmax)
from .grammar import (GrammarModel, f_rules, g_expand, generate,
                      inflate_block_diagonal, initial_nonterminal,
                      load_checkpoint, save_checkpoint, step)
from .training import (Branch, TrainConfig, expand_branches, prune_branches,
                       sequence_loss, sgd_update, train)
from .extraction import (Rule, SymbolicGrammar, extract, grammar_equivalence,
                         model_from_grammar, render_dot, rule_probabilities)
from .data import (GroundTruthGrammar, SequenceRecord, bayes_optimal_forecast,
                   builtin_grammar, builtin_toy_dataset, load_grammar_file,
                   read_dataset, sample_records, sample_string, to_targets,
                   write_dataset)
from .inference import (constrained_decode, forecast, forecast_accuracy,
                        per_frame_map)

__version__ = "0.1.0"
