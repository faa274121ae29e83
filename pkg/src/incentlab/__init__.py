"""Desk-scale workbench for debiased incentive response modeling and
budget-constrained allocation against a synthetic ground-truth campaign."""

from .allocator import (AllocationProblem, AllocationResult,
                        InfeasibleBudgetError, allocate_bruteforce,
                        allocate_dual, assign_at_lambda)
from .diffcore import DenseNet, Optimizer, ce_loss, sigmoid, softplus
from .harness import ExperimentConfig, load_config, run_experiment, run_sweep
from .metrics import (EvalReport, UndefinedAucError, auc, pce,
                      relative_improvement, response_curve)
from .models import (CausePair, IpwWeighting, PcanModel, SbbmModel,
                     cause_loss, disc_loss, gen_loss, load_model, save_model,
                     supervised_loss)
from .synth_campaign import (Campaign, CampaignConfig, CampaignOracle,
                             LoggedDataset, LoggingPolicy, Sample,
                             TreatmentList, UserProfile, Users,
                             empirical_curve, gen_dataset, gen_users,
                             sample_logged, true_mpp)
from .trainer import (TrainConfig, TrainLog, TrainingAborted, train_baseline,
                      train_method, train_pcan, validate)

__version__ = "0.1.0"
