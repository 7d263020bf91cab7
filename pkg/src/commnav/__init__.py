"""Multi-robot collision avoidance with scheduled trajectory communication.

Robots plan with a receding-horizon constrained optimizer against the
trajectories they assume for their teammates, and learn (via multi-agent
actor-critic training) when and from whom to request those trajectories.
"""

from .comms import (
    CommMatrix,
    DistanceBased,
    FullComm,
    Learned,
    NoComm,
    PolicyKind,
    comm_cost,
    decide_comm,
)
from .env import (
    EpisodeResult,
    Observation,
    RewardConfig,
    Scenario,
    SimConfig,
    build_observation,
    compute_reward,
    curriculum_schedule,
    run_episode,
    spawn_scenario,
)
from .maddpg import AgentNets, MaddpgConfig, ReplayBuffer, TransitionSample
from .neural import GradientBuffer, MlpParams, OptimizerState
from .planner import PlannerConfig, PlanResult, Trajectory, plan, rollout
from .prediction import PlanCache, align_plan, predict_constant_velocity
from .world import (
    ControlInput,
    RobotState,
    WorldConfig,
    WorldState,
    all_at_goal,
    check_collisions,
    step_dynamics,
)

__version__ = "0.1.0"
