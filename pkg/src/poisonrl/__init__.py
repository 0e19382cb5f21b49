"""poisonrl: a desk-scale laboratory for backdoor poisoning of offline RL.

The package covers the full loop: toy continuous-control environments and
behavior datasets, an attacker-side proxy critic with TD scoring, trigger
and worst-action construction under a strict row budget, conservative
victim trainers that see nothing but the dataset, and a rollout harness
measuring clean versus under-trigger returns.
"""

from .attack import (
    ActionGenSpec,
    BudgetError,
    PoisonConfig,
    PoisonReport,
    ProxyMismatchError,
    SelectionSpec,
    TriggerSpec,
    generate_trigger,
    inject_trigger,
    poison,
    relabel_reward,
    save_report,
    select_critical,
    worst_action,
)
from .dataset import (
    Dataset,
    DatasetError,
    DatasetHashError,
    DatasetStats,
    DatasetTruncatedError,
    DatasetVersionError,
    PatchSet,
    Transition,
    apply_patch,
    compute_stats,
    load_dataset,
    save_dataset,
)
from .envs import BehaviorConfig, Env, EnvSpec, EnvState, generate_dataset, make_env, run_scripted_expert
from .nets import (
    MlpParams,
    OptimState,
    ShapeMismatchError,
    TrainingDivergedError,
    mlp_forward,
    mlp_gradients,
    mlp_init,
    optim_init,
    optim_step,
)
from .proxy import ProxyConfig, QNetwork, TdScores, load_proxy, q_max, save_proxy, td_errors, train_proxy
from .rollout import (
    EvalConfig,
    EvalReport,
    TriggerSchedule,
    evaluate,
    make_schedule,
    run_episode,
)
from .stats import pearson_matrix, percentile_nearest_rank
from .victims import (
    BcqPolicy,
    MlpPolicy,
    TrainedVictim,
    VictimConfig,
    expectile_loss,
    load_victim,
    save_victim,
    train_bcq,
    train_cql,
    train_iql,
    train_victim,
)

__version__ = "0.1.0"
