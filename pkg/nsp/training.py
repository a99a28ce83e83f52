"""
Training
Trajectory and CVAE losses, Adam, and the three-stage progressive schedule
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .autograd import ArrayLike, Tensor, as_tensor, backward, no_grad, stack
from .config import NspConfig, Stage, TrainConfig
from .cvae import cvae_train_forward, kl_to_standard_normal, residual, scale_inputs
from .data_io import Cohort
from .exceptions import NonFiniteLossError, ShapeMismatchError
from .forces import Kinematics, as_kinematics, desired_velocity, net_acceleration
from .geometry import neighborhood
from .models import EpochRecord, SceneGrid, TrajectoryWindow
from .networks import AgentMemory, ModelParams, collision_k, goal_tau
from .rollout import RolloutMode, RolloutResult, rollout_window

logger = logging.getLogger(__name__)
metrics_logger = logging.getLogger("nsp.metrics")

STAGE_GROUPS: Dict[Stage, Tuple[str, ...]] = {
    Stage.GOAL_ONLY: ("goal",),
    Stage.ADD_REPULSION: ("collision",),
    Stage.CVAE_ONLY: ("cvae",),
}


# -- losses ------------------------------------------------------------------

def loss_traj(
    pred: RolloutResult, truth: Union[Sequence[TrajectoryWindow], Mapping[str, ArrayLike]]
) -> Tensor:
    """
    Mean squared position error over agents and predicted steps

    Args:
        pred: Rollout of a cohort
        truth: The same windows, or ground-truth positions per window id; the
            last len(prediction) rows of each are compared

    Returns:
        Scalar tensor
    """
    if not isinstance(truth, Mapping):
        truth = {w.window_id: w.positions() for w in truth}
    total: Optional[Tensor] = None
    count = 0
    for window_id, prediction in pred.predictions.items():
        if window_id not in truth:
            raise ShapeMismatchError(f"no ground truth for window {window_id}")
        steps = len(prediction.positions)
        target = np.asarray(truth[window_id], dtype=np.float64)
        if steps == 0 or target.ndim != 2 or target.shape[0] < steps or target.shape[1] != 2:
            raise ShapeMismatchError(f"window {window_id}: {steps} predictions vs truth {target.shape}")
        diff = stack(prediction.positions) - target[-steps:]
        term = (diff * diff).sum()
        total = term if total is None else total + term
        count += steps
    if total is None:
        raise ShapeMismatchError("empty rollout")
    return total / float(count)


def loss_cvae(alpha_true: ArrayLike, alpha_hat: ArrayLike, mu: ArrayLike, log_var: ArrayLike, lambda_kl: float = 1.0) -> Tensor:
    """Mean squared reconstruction error plus lambda_kl times the mean KL term"""
    alpha_true, alpha_hat = as_tensor(alpha_true), as_tensor(alpha_hat)
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    if alpha_true.shape != alpha_hat.shape or mu.shape != log_var.shape or alpha_true.shape[:-1] != mu.shape[:-1]:
        raise ShapeMismatchError(
            f"alpha {alpha_true.shape}/{alpha_hat.shape} and latent {mu.shape}/{log_var.shape} do not line up"
        )
    if lambda_kl < 0:
        raise ValueError("lambda_kl must be non-negative")
    diff = alpha_hat - alpha_true
    recon = (diff * diff).sum(axis=-1).mean()
    return recon + kl_to_standard_normal(mu, log_var).mean() * lambda_kl


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_update(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """
    One bias-corrected Adam step, applied to the parameters in place

    Missing or None gradients count as zero. A parameter named k_env is
    clamped to be non-negative after its update.
    """
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        if name == "k_env":
            np.maximum(p.data, 0.0, out=p.data)
    return state


class Adam:
    """Adam over a fixed parameter dict, reading gradients from `.grad`"""

    def __init__(self, params: Mapping[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    @classmethod
    def for_stage(cls, params: Mapping[str, Tensor], train_cfg: TrainConfig, stage: Stage) -> "Adam":
        return cls(params, train_cfg.learning_rate(stage), train_cfg.beta1, train_cfg.beta2, train_cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        grads = {name: p.grad for name, p in self.params.items()}
        adam_update(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def decay(self, factor: float) -> None:
        self.lr *= factor


@contextmanager
def trainable_only(params: ModelParams, groups: Sequence[str]) -> Iterator[Dict[str, Tensor]]:
    """Record gradients only for the given groups; the rest stay constant in the graph"""
    trainable: Dict[str, Tensor] = {}
    for group in groups:
        trainable.update(params.group(group))
    everything = params.named_parameters()
    saved = {name: p.requires_grad for name, p in everything.items()}
    try:
        for name, p in everything.items():
            p.requires_grad = name in trainable
        yield trainable
    finally:
        for name, p in everything.items():
            p.requires_grad = saved[name]


def _check_finite(loss: Tensor, stage: Stage, epoch: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(f"{stage.value} stage, epoch {epoch}: loss is {value}")
    return value


def _emit(record: EpochRecord) -> None:
    logger.info(f"[{record.stage}] epoch {record.epoch}: loss {record.loss:.6g} over {record.batches} batches")
    metrics_logger.info("epoch", extra=record.model_dump())


# -- stages 1 and 2 ----------------------------------------------------------

def cohort_loss(cohort: Cohort, grid: Optional[SceneGrid], params: ModelParams, cfg: NspConfig, stage: Stage) -> Tensor:
    """Deterministic rollout of one cohort scored with loss_traj"""
    repulsion = stage != Stage.GOAL_ONLY
    result = rollout_window(
        cohort.windows, grid, params, cfg, RolloutMode.DETERMINISTIC,
        obstacles=cohort.obstacles, use_collision=repulsion, use_env=repulsion,
    )
    return loss_traj(result, cohort.windows)


def train_force_stage(
    cohorts: Sequence[Cohort],
    grid: Optional[SceneGrid],
    params: ModelParams,
    cfg: NspConfig,
    train_cfg: TrainConfig,
    stage: Stage,
) -> List[EpochRecord]:
    """
    Fit the stage's force parameters on l_traj

    Every optimizer step averages the loss of batch_size cohorts; the learning
    rate is multiplied by lr_decay after each epoch.
    """
    if not cohorts:
        logger.warning(f"No cohorts to train the {stage.value} stage on")
        return []
    rng = np.random.default_rng(train_cfg.seed)
    records = []
    with trainable_only(params, STAGE_GROUPS[stage]) as trainable:
        optimizer = Adam.for_stage(trainable, train_cfg, stage)
        for epoch in range(train_cfg.epochs):
            order = rng.permutation(len(cohorts))
            losses = []
            for start in range(0, len(order), train_cfg.batch_size):
                batch = [cohorts[i] for i in order[start:start + train_cfg.batch_size]]
                loss = cohort_loss(batch[0], grid, params, cfg, stage)
                for cohort in batch[1:]:
                    loss = loss + cohort_loss(cohort, grid, params, cfg, stage)
                loss = loss / float(len(batch))
                losses.append(_check_finite(loss, stage, epoch))
                optimizer.zero_grad()
                backward(loss)
                optimizer.step()
                params.clamp()
            record = EpochRecord(
                stage=stage.value, epoch=epoch, loss=float(np.mean(losses)), batches=len(losses), learning_rate=optimizer.lr
            )
            _emit(record)
            records.append(record)
            optimizer.decay(train_cfg.lr_decay)
    return records


# -- stage 3 -----------------------------------------------------------------

@dataclass
class GroundTruthStep:
    """One ground-truth state, the deterministic one-step prediction from it and its context"""

    window_id: str
    t: int
    state: Kinematics
    tau: Tensor
    v_des: np.ndarray
    p_bar: np.ndarray
    p_next: np.ndarray
    history: np.ndarray


def ground_truth_steps(
    cohort: Cohort, grid: Optional[SceneGrid], params: ModelParams, cfg: NspConfig
) -> Iterator[GroundTruthStep]:
    """
    Walk a cohort on ground-truth states, predicting one step at a time

    The Goal-Network memory is advanced on the true states, so every step sees
    the same inputs it would see during a perfect rollout.
    """
    M, T, dt = cfg.first_step, cfg.last_index, cfg.dt
    windows = sorted(cohort.windows, key=lambda w: w.window_id)
    positions = {w.window_id: w.positions() for w in windows}
    velocities = {w.window_id: w.velocities() for w in windows}
    memories: Dict[str, Optional[AgentMemory]] = {}
    tau: Dict[str, Tensor] = {}

    for w in windows:
        wid = w.window_id
        if cfg.fixed_tau is None:
            memories[wid] = AgentMemory.fresh(params.goal_net)
            for k in range(M + 1):
                state = Kinematics(Tensor(positions[wid][k]), Tensor(velocities[wid][k]))
                tau[wid] = goal_tau(params.goal_net, state, w.goal_array(), cfg, memories[wid])
        else:
            memories[wid] = None

    for t in range(M, T):
        states = {w.window_id: Kinematics(Tensor(positions[w.window_id][t]), Tensor(velocities[w.window_id][t])) for w in windows}
        extra = [as_kinematics(s) for s in cohort.obstacles.get(t, [])]
        for w in windows:
            wid = w.window_id
            if cfg.fixed_tau is not None:
                step_tau = Tensor(cfg.fixed_tau)
            elif t == M:
                step_tau = tau[wid]
            else:
                step_tau = goal_tau(params.goal_net, states[wid], w.goal_array(), cfg, memories[wid])
            neighbors = [states[o.window_id] for o in windows if o.window_id != wid] + extra
            forces = net_acceleration(states[wid], w.goal_array(), neighbors, grid, params, cfg, t, T, tau=step_tau)
            p, v = positions[wid][t], velocities[wid][t]
            yield GroundTruthStep(
                window_id=wid,
                t=t,
                state=states[wid],
                tau=step_tau,
                v_des=desired_velocity(p, w.goal_array(), t, T, dt).data,
                p_bar=p + dt * (v + dt * forces.total.data),
                p_next=positions[wid][t + 1],
                history=positions[wid][t - cfg.obs_len + 1:t + 1],
            )


def residual_dataset(
    cohorts: Sequence[Cohort], grid: Optional[SceneGrid], params: ModelParams, cfg: NspConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Residuals alpha = truth - deterministic prediction, with their position histories

    Returns:
        Tuple (alpha (N, 2), history (N, obs_len, 2)), both in pixels
    """
    alphas, histories = [], []
    with no_grad():
        for cohort in cohorts:
            for step in ground_truth_steps(cohort, grid, params, cfg):
                alphas.append(residual(step.p_next, step.p_bar))
                histories.append(step.history)
    if not alphas:
        return np.zeros((0, 2)), np.zeros((0, cfg.obs_len, 2))
    logger.info(f"Built {len(alphas)} residual samples")
    return np.asarray(alphas), np.asarray(histories)


def evaluate_cvae_loss(alpha: np.ndarray, history: np.ndarray, params: ModelParams, cfg: NspConfig, seed: int = 0) -> float:
    """l_cvae over a whole residual set, in scaled units"""
    a, past = scale_inputs(alpha, history, cfg.cvae_scale)
    with no_grad():
        alpha_hat, mu, log_var = cvae_train_forward(params.cvae, a, past, np.random.default_rng(seed))
        return loss_cvae(a, alpha_hat, mu, log_var, cfg.lambda_kl).item()


def train_cvae_stage(
    alpha: np.ndarray, history: np.ndarray, params: ModelParams, cfg: NspConfig, train_cfg: TrainConfig
) -> List[EpochRecord]:
    """Fit the CVAE on scaled residuals with minibatches of cvae_batch_size"""
    stage = Stage.CVAE_ONLY
    if len(alpha) == 0:
        logger.warning("Empty residual set; CVAE stage skipped")
        return []
    a, past = scale_inputs(alpha, history, cfg.cvae_scale)
    rng = np.random.default_rng(train_cfg.seed)
    records = []
    with trainable_only(params, STAGE_GROUPS[stage]) as trainable:
        optimizer = Adam.for_stage(trainable, train_cfg, stage)
        for epoch in range(train_cfg.cvae_epochs):
            order = rng.permutation(len(a))
            losses = []
            for start in range(0, len(order), train_cfg.cvae_batch_size):
                idx = order[start:start + train_cfg.cvae_batch_size]
                alpha_hat, mu, log_var = cvae_train_forward(params.cvae, a[idx], past[idx], rng)
                loss = loss_cvae(a[idx], alpha_hat, mu, log_var, cfg.lambda_kl)
                losses.append(_check_finite(loss, stage, epoch))
                optimizer.zero_grad()
                backward(loss)
                optimizer.step()
            record = EpochRecord(
                stage=stage.value, epoch=epoch, loss=float(np.mean(losses)), batches=len(losses), learning_rate=optimizer.lr
            )
            _emit(record)
            records.append(record)
            optimizer.decay(train_cfg.lr_decay)
    return records


# -- schedule ----------------------------------------------------------------

@dataclass
class TrainingReport:
    params: ModelParams
    records: List[EpochRecord] = field(default_factory=list)

    def stage_losses(self, stage: Stage) -> List[float]:
        return [r.loss for r in self.records if r.stage == stage.value]


def progressive_train(
    cohorts: Sequence[Cohort],
    grid: Optional[SceneGrid],
    params: ModelParams,
    cfg: NspConfig,
    train_cfg: TrainConfig,
    stages: Optional[Sequence[Stage]] = None,
    on_stage_end: Optional[Callable[[Stage, ModelParams], None]] = None,
) -> TrainingReport:
    """
    Run the stages in order: goal force, then repulsion (Goal-Network frozen), then the CVAE

    Args:
        cohorts: Training cohorts
        grid: Scene classes, or None
        params: Parameters, updated in place
        cfg: Hyper-parameters
        train_cfg: Optimizer and schedule
        stages: Subset of stages to run; all three by default
        on_stage_end: Called after every stage, e.g. to write a checkpoint

    Returns:
        TrainingReport with the parameters and every epoch record
    """
    stages = list(stages) if stages else [Stage.GOAL_ONLY, Stage.ADD_REPULSION, Stage.CVAE_ONLY]
    report = TrainingReport(params=params)
    logger.info(f"Progressive training on {len(cohorts)} cohorts, stages {[s.value for s in stages]}")
    for stage in stages:
        if stage == Stage.CVAE_ONLY:
            alpha, history = residual_dataset(cohorts, grid, params, cfg)
            report.records.extend(train_cvae_stage(alpha, history, params, cfg, train_cfg))
        else:
            report.records.extend(train_force_stage(cohorts, grid, params, cfg, train_cfg, stage))
        if on_stage_end is not None:
            on_stage_end(stage, params)
    return report


def effective_tau(cohorts: Sequence[Cohort], grid: Optional[SceneGrid], params: ModelParams, cfg: NspConfig) -> float:
    """
    Relaxation time averaged over ground-truth-conditioned steps, weighted by |v_des - v|

    Steps already at the desired velocity do not depend on tau and get no weight.
    """
    taus, weights = [], []
    with no_grad():
        for cohort in cohorts:
            for step in ground_truth_steps(cohort, grid, params, cfg):
                taus.append(step.tau.item())
                weights.append(float(np.linalg.norm(step.v_des - step.state.v.data)))
    if not taus:
        raise ValueError("no steps to average over")
    weights_arr = np.asarray(weights)
    if weights_arr.sum() == 0.0:
        return float(np.mean(taus))
    return float(np.average(taus, weights=weights_arr))


def effective_k(cohorts: Sequence[Cohort], params: ModelParams, cfg: NspConfig) -> float:
    """
    Repulsion strength averaged over in-sector ground-truth pairs, weighted by exp(-|r| / r_col)

    The weight is the factor multiplying k in F_col, so pairs far apart count little.
    """
    if cfg.fixed_k is not None:
        return cfg.fixed_k
    ks, weights = [], []
    with no_grad():
        for cohort in cohorts:
            windows = sorted(cohort.windows, key=lambda w: w.window_id)
            positions = [w.positions() for w in windows]
            velocities = [w.velocities() for w in windows]
            for t in range(cfg.first_step, cfg.last_index):
                states = [Kinematics(Tensor(p[t]), Tensor(v[t])) for p, v in zip(positions, velocities)]
                extra = [as_kinematics(s) for s in cohort.obstacles.get(t, [])]
                for n, state in enumerate(states):
                    others = states[:n] + states[n + 1:] + extra
                    for j in neighborhood(state, others, cfg.omega, cfg.r_col):
                        dist = float(np.linalg.norm(state.p.data - others[j].p.data))
                        if dist == 0.0:
                            continue
                        ks.append(collision_k(params.collision_net, state, others[j], cfg).item())
                        weights.append(math.exp(-dist / cfg.r_col))
    if not ks:
        raise ValueError("no interacting pairs to average over")
    return float(np.average(ks, weights=weights))
