"""
Interaction Networks
Goal-Network (relaxation time tau) and Collision-Network (repulsion k_nj), plus the parameter container
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .autograd import ArrayLike, Tensor, as_tensor, concat, parameter
from .cvae import CvaeModel
from .exceptions import CheckpointError, UninitializedStateError
from .layers import DenseLayer, LstmCell, Module, build_mlp, lstm_step, mlp_forward, mlp_parameters

logger = logging.getLogger(__name__)


class GoalNetwork(Module):
    """Encodes the agent state, runs it through an LSTM and combines it with the embedded goal"""

    def __init__(
        self,
        state_encoder: List[DenseLayer],
        lstm: LstmCell,
        post_lstm_linear: DenseLayer,
        goal_embed: List[DenseLayer],
        head_mlp: List[DenseLayer],
    ):
        self.state_encoder = state_encoder
        self.lstm = lstm
        self.post_lstm_linear = post_lstm_linear
        self.goal_embed = goal_embed
        self.head_mlp = head_mlp

    @classmethod
    def build(cls, cfg, rng: Optional[np.random.Generator] = None, prefix: str = "goal_net") -> "GoalNetwork":
        """Random weights from `rng`, or all zeros when rng is None"""
        e, h, m, act = cfg.embed_dim, cfg.lstm_hidden, cfg.mlp_hidden, cfg.hidden_activation
        if rng is None:
            lstm = LstmCell.zeros(e, h, f"{prefix}.lstm")
            post = DenseLayer.zeros(h, e, "identity", f"{prefix}.post_lstm")
        else:
            lstm = LstmCell.init(e, h, rng, f"{prefix}.lstm")
            post = DenseLayer.init(h, e, "identity", rng, f"{prefix}.post_lstm")
        return cls(
            state_encoder=build_mlp([4, e], act, act, rng, f"{prefix}.state_encoder"),
            lstm=lstm,
            post_lstm_linear=post,
            goal_embed=build_mlp([2, e], act, act, rng, f"{prefix}.goal_embed"),
            head_mlp=build_mlp([2 * e, m, 1], act, "sigmoid", rng, f"{prefix}.head"),
        )

    def named_parameters(self) -> Dict[str, Tensor]:
        params = mlp_parameters(self.state_encoder)
        params.update(self.lstm.named_parameters())
        params.update(self.post_lstm_linear.named_parameters())
        params.update(mlp_parameters(self.goal_embed))
        params.update(mlp_parameters(self.head_mlp))
        return params


@dataclass
class AgentMemory:
    """Per-agent recurrent state of the Goal-Network within one window"""

    h: Optional[Tensor] = None
    c: Optional[Tensor] = None
    anchor: Optional[np.ndarray] = None
    steps: int = 0

    @classmethod
    def fresh(cls, net: Optional[GoalNetwork]) -> "AgentMemory":
        memory = cls()
        memory.reset(net)
        return memory

    def reset(self, net: Optional[GoalNetwork]) -> None:
        if net is not None:
            self.h, self.c = net.lstm.initial_state()
        else:
            self.h, self.c = Tensor(np.zeros(1)), Tensor(np.zeros(1))
        self.anchor = None
        self.steps = 0


class CollisionNetwork(Module):
    """Scores one ordered (agent, neighbour) pair"""

    def __init__(self, self_encoder: List[DenseLayer], neighbor_encoder: List[DenseLayer], head_mlp: List[DenseLayer]):
        self.self_encoder = self_encoder
        self.neighbor_encoder = neighbor_encoder
        self.head_mlp = head_mlp

    @classmethod
    def build(cls, cfg, rng: Optional[np.random.Generator] = None, prefix: str = "collision_net") -> "CollisionNetwork":
        e, m, act = cfg.embed_dim, cfg.mlp_hidden, cfg.hidden_activation
        return cls(
            self_encoder=build_mlp([2, e], act, act, rng, f"{prefix}.self_encoder"),
            neighbor_encoder=build_mlp([4, e], act, act, rng, f"{prefix}.neighbor_encoder"),
            head_mlp=build_mlp([2 * e, m, 1], act, "sigmoid", rng, f"{prefix}.head"),
        )

    def named_parameters(self) -> Dict[str, Tensor]:
        params = mlp_parameters(self.self_encoder)
        params.update(mlp_parameters(self.neighbor_encoder))
        params.update(mlp_parameters(self.head_mlp))
        return params


def goal_tau(net: GoalNetwork, q, p_goal: ArrayLike, cfg, memory: Optional[AgentMemory]) -> Tensor:
    """
    Relaxation time tau = a_tau * sigmoid(NN(q, p_goal)) + b_tau

    Advances the agent's recurrent state by one step. Positions enter relative
    to the first position fed since the last reset.

    Args:
        net: Goal-Network
        q: Agent state with `p` and `v`
        p_goal: Goal position
        cfg: NspConfig
        memory: Recurrent state of this agent

    Returns:
        Scalar tensor tau
    """
    if memory is None or memory.h is None or memory.c is None:
        raise UninitializedStateError("Goal-Network state must be reset before use")
    p, v = as_tensor(q.p), as_tensor(q.v)
    if memory.anchor is None:
        memory.anchor = p.data.copy()
    s = cfg.feature_scale

    x = mlp_forward(net.state_encoder, concat([(p - memory.anchor) * s, v * s]))
    memory.h, memory.c = lstm_step(net.lstm, x, memory.h, memory.c)
    memory.steps += 1
    dynamics = net.post_lstm_linear(memory.h)
    goal = mlp_forward(net.goal_embed, (as_tensor(p_goal) - memory.anchor) * s)
    out = mlp_forward(net.head_mlp, concat([dynamics, goal]))
    return out[0] * cfg.a_tau + cfg.b_tau


def collision_k(net: CollisionNetwork, q_self, q_neighbor, cfg) -> Tensor:
    """Repulsion strength k_nj = a_k * sigmoid(NN(q_n, q_j)) + b_k for one ordered pair"""
    s = cfg.feature_scale
    p_n, v_n = as_tensor(q_self.p), as_tensor(q_self.v)
    p_j, v_j = as_tensor(q_neighbor.p), as_tensor(q_neighbor.v)
    own = mlp_forward(net.self_encoder, v_n * s)
    other = mlp_forward(net.neighbor_encoder, concat([(p_j - p_n) * s, (v_j - v_n) * s]))
    out = mlp_forward(net.head_mlp, concat([own, other]))
    return out[0] * cfg.a_k + cfg.b_k


@dataclass
class ModelParams:
    """Every learnable quantity: both force networks, k_env and the CVAE"""

    goal_net: GoalNetwork
    collision_net: CollisionNetwork
    k_env: Tensor
    cvae: CvaeModel

    @classmethod
    def build(cls, cfg, seed: Optional[int] = 0, k_env_init: float = 1.0) -> "ModelParams":
        """
        Initialize all parameters

        Args:
            cfg: NspConfig (network sizes)
            seed: Initializer seed; None gives all-zero network weights
            k_env_init: Initial environment repulsion strength
        """
        rng = None if seed is None else np.random.default_rng(seed)
        return cls(
            goal_net=GoalNetwork.build(cfg, rng),
            collision_net=CollisionNetwork.build(cfg, rng),
            k_env=parameter(float(k_env_init), "k_env"),
            cvae=CvaeModel.build(cfg, rng),
        )

    def group(self, name: str) -> Dict[str, Tensor]:
        """Parameters of one group: goal, collision (with k_env) or cvae"""
        if name == "goal":
            return self.goal_net.named_parameters()
        if name == "collision":
            params = self.collision_net.named_parameters()
            params[self.k_env.name] = self.k_env
            return params
        if name == "cvae":
            return self.cvae.named_parameters()
        raise KeyError(name)

    def named_parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for name in ("goal", "collision", "cvae"):
            params.update(self.group(name))
        return params

    def clamp(self) -> None:
        """Keep k_env non-negative"""
        np.maximum(self.k_env.data, 0.0, out=self.k_env.data)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise CheckpointError(f"parameter mismatch; missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise CheckpointError(f"{name}: checkpoint shape {value.shape} != model shape {p.data.shape}")
            p.data[...] = value
        logger.debug(f"Loaded {len(params)} parameter tensors")
