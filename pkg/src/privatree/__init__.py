"""Differentially-private decision trees with poisoning-robustness audits."""

from .budget import (BudgetLedger, BudgetPlan, TrainerParams, allocate_budget,
                     pf_worst_case_error_term, required_leaf_budget)
from .mechanisms import (PrivacyBudget, RandomStream, UtilityVector,
                         exponential_mechanism, laplace_noise, permute_and_flip,
                         two_sided_geometric_noise)
from .preprocess import (BinEdges, Dataset, DatasetSchema, FeatureSpec, LoadError,
                         bin_value, load_dataset, load_schema, private_decile_edges,
                         private_quantile)
from .robustness import (PoisonGuaranteeQuery, RobustnessReport, TriggerSpec,
                         accuracy_lower_bound, asr_upper_bound,
                         attack_cost_lower_bound, attack_success_rate,
                         poison_backdoor, run_poisoning_campaign)
from .tree import (CategoricalSplit, Internal, Leaf, ModelFormatError, ModelParams,
                   NoisyHistogram, NumericalSplit, TreeModel, best_categorical_split,
                   best_numerical_split, deserialize, fit, fit_random_baseline,
                   leaf_count, noisy_class_histogram, order_categories_binary,
                   predict, predict_batch, serialize, trainer_params_for, tree_depth,
                   weighted_gini)

__version__ = "0.1.0"
