"""
Command Line
train, predict, simulate, evaluate and gradcheck entry points
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from .autograd import Tensor, grad_check, no_grad
from .config import NspConfig, NspSettings, Stage, TrainConfig, load_config_file
from .cvae import cvae_train_forward, scale_inputs
from .data_io import (
    Cohort,
    TrajectoryRow,
    load_checkpoint,
    load_cohorts,
    load_homography,
    load_scene_grid,
    prediction_id,
    save_checkpoint,
    write_jsonl,
    write_trajectories,
)
from .evaluation import generate_scenario, score_files, standard_sample_goals
from .exceptions import ConfigError, IoError, NspError, UsageError
from .forces import Kinematics
from .logging_setup import attach_metrics_log, configure_logging, detach_metrics_log
from .models import ErrorRecord, SceneGrid
from .networks import AgentMemory, ModelParams, collision_k, goal_tau
from .rollout import RolloutMode, oracle_from_windows, rollout_window
from .simulation import BASELINES, interval_collision_rates, simulate_scene
from .training import loss_cvae, progressive_train

logger = logging.getLogger(__name__)

STAGE_CHOICES = {
    "1": [Stage.GOAL_ONLY],
    "2": [Stage.ADD_REPULSION],
    "3": [Stage.CVAE_ONLY],
    "all": [Stage.GOAL_ONLY, Stage.ADD_REPULSION, Stage.CVAE_ONLY],
}

# Fields that fix the network shapes stored in a checkpoint
ARCHITECTURE_FIELDS = ("embed_dim", "lstm_hidden", "mlp_hidden", "latent_dim", "hidden_activation", "obs_len", "pred_len")


class CliParser(argparse.ArgumentParser):
    """Parser whose errors surface as UsageError instead of exiting"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> CliParser:
    parser = CliParser(prog="nsp", description="Neural social force trajectory prediction")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (default NSP_THREADS or 1)")
    parser.add_argument("--log-level", default=None, help="Logging level (default NSP_LOG_LEVEL or INFO)")
    parser.add_argument("--log-json", action="store_true", help="Log JSON lines")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    train = sub.add_parser("train", help="Progressive training")
    train.add_argument("--config", required=True)
    train.add_argument("--data", default=None, help="Comma-separated trajectory files (default: train_files)")
    train.add_argument("--scene", default=None)
    train.add_argument("--stage", choices=sorted(STAGE_CHOICES), default="all")
    train.add_argument("--out", required=True)
    train.add_argument("--init", default=None, help="Checkpoint to start from")
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--metrics-log", default=None)

    predict = sub.add_parser("predict", help="Predict the last frames of every window")
    predict.add_argument("--ckpt", required=True)
    predict.add_argument("--data", required=True)
    predict.add_argument("--scene", default=None)
    predict.add_argument("--mode", choices=[m.value for m in RolloutMode], default="det")
    predict.add_argument("--samples", type=int, default=1)
    predict.add_argument("--out", required=True)
    predict.add_argument("--config", default=None)
    predict.add_argument("--seed", type=int, default=0)
    predict.add_argument("--forces", default=None, help="Write per-step forces as JSON lines")

    simulate = sub.add_parser("simulate", help="Simulate a crowd on a scene")
    simulate.add_argument("--ckpt", default=None)
    simulate.add_argument("--scene", required=True)
    simulate.add_argument("--agents", type=int, default=50)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--seconds", type=float, default=30.0)
    simulate.add_argument("--fps", type=float, default=10.0)
    simulate.add_argument("--mode", choices=["det", "sto"], default="det")
    simulate.add_argument("--baseline", choices=list(BASELINES), default="none")
    simulate.add_argument("--config", default=None)
    simulate.add_argument("--out", required=True)

    evaluate = sub.add_parser("evaluate", help="Score predictions against ground truth")
    evaluate.add_argument("--pred", required=True)
    evaluate.add_argument("--truth", required=True)
    evaluate.add_argument("--homography", default=None)
    evaluate.add_argument("--collision-r", type=float, default=15.0)
    evaluate.add_argument("--json", action="store_true", help="Line-delimited records only")

    gradcheck = sub.add_parser("gradcheck", help="Finite-difference check of the checkpoint's networks")
    gradcheck.add_argument("--ckpt", required=True)
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--tol", type=float, default=1e-4)
    return parser


def _require_file(path: Optional[str]) -> Optional[str]:
    if path is not None and not Path(path).is_file():
        raise IoError(f"No such file: {path}")
    return path


def _load_grid(path: Optional[str]) -> Optional[SceneGrid]:
    return load_scene_grid(_require_file(path)) if path else None


def _split_paths(value: Optional[str]) -> List[str]:
    return [p.strip() for p in (value or "").split(",") if p.strip()]


def _load_data(paths: Sequence[str], cfg: NspConfig, stride: int) -> List[Cohort]:
    cohorts: List[Cohort] = []
    for path in paths:
        _, file_cohorts = load_cohorts(_require_file(path), cfg, stride)
        cohorts.extend(file_cohorts)
    if not cohorts:
        raise IoError(f"No complete {cfg.window_len}-frame windows in {', '.join(paths)}")
    logger.info(f"{sum(len(c) for c in cohorts)} windows in {len(cohorts)} cohorts")
    return cohorts


def _inference_config(ckpt_cfg: NspConfig, config_path: Optional[str]) -> Tuple[NspConfig, TrainConfig]:
    """Hyper-parameters from the config file, network shapes from the checkpoint"""
    if not config_path:
        return ckpt_cfg, TrainConfig()
    file_cfg, train_cfg = load_config_file(_require_file(config_path))
    shapes = {name: getattr(ckpt_cfg, name) for name in ARCHITECTURE_FIELDS}
    return file_cfg.model_copy(update=shapes), train_cfg


def _map_cohorts(fn: Callable[[int], object], count: int, threads: int) -> list:
    if threads > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(count)))
    return [fn(i) for i in range(count)]


# -- commands ----------------------------------------------------------------

def cmd_train(args, threads: int) -> int:
    overrides = {"epochs": args.epochs, "seed": args.seed}
    cfg, train_cfg = load_config_file(_require_file(args.config), overrides)
    paths = _split_paths(args.data) or train_cfg.train_files
    if not paths:
        raise UsageError("train needs --data or train_files in the config")
    cohorts = _load_data(paths, cfg, train_cfg.window_stride)
    grid = _load_grid(args.scene)

    params = ModelParams.build(cfg, seed=train_cfg.seed, k_env_init=train_cfg.k_env_init)
    if args.init:
        initial, _ = load_checkpoint(_require_file(args.init))
        params.load_state_dict(initial.state_dict())

    def checkpoint(stage: Stage, trained: ModelParams) -> None:
        save_checkpoint(trained, cfg, args.out)
        logger.info(f"Stage {stage.value} finished; checkpoint written to {args.out}")

    handler = attach_metrics_log(args.metrics_log)
    try:
        report = progressive_train(cohorts, grid, params, cfg, train_cfg, STAGE_CHOICES[args.stage], on_stage_end=checkpoint)
    finally:
        detach_metrics_log(handler)
    for stage in STAGE_CHOICES[args.stage]:
        losses = report.stage_losses(stage)
        if losses:
            print(f"{stage.value}: loss {losses[0]:.6g} -> {losses[-1]:.6g} over {len(losses)} epochs")
    return 0


def cmd_predict(args, threads: int) -> int:
    params, ckpt_cfg = load_checkpoint(_require_file(args.ckpt))
    cfg, train_cfg = _inference_config(ckpt_cfg, args.config)
    cohorts = _load_data([args.data], cfg, train_cfg.window_stride)
    grid = _load_grid(args.scene)
    mode = RolloutMode(args.mode)
    samples = 1 if mode == RolloutMode.DETERMINISTIC else args.samples
    if samples < 1:
        raise UsageError("--samples must be >= 1")

    def run(index: int) -> Tuple[List[TrajectoryRow], List[dict]]:
        cohort = cohorts[index]
        rng = np.random.default_rng([args.seed, index])
        oracle = oracle_from_windows(cohort.windows) if mode == RolloutMode.ULTRA else None
        goal_sets = None
        if mode == RolloutMode.STOCHASTIC:
            goal_sets = {w.window_id: standard_sample_goals(w.goal_array(), cfg.sigma_goal, samples, rng) for w in cohort.windows}
        rows, forces = [], []
        for k in range(samples):
            goals = {wid: g[k] for wid, g in goal_sets.items()} if goal_sets else None
            with no_grad():
                result = rollout_window(
                    cohort.windows, grid, params, cfg, mode, rng=rng, oracle=oracle, goals=goals, obstacles=cohort.obstacles
                )
            for wid, pred in result.predictions.items():
                for frame, p in zip(pred.frame_ids, pred.as_array()):
                    rows.append((frame, prediction_id(wid, k), float(p[0]), float(p[1])))
            if k == 0:
                forces.extend(result.force_records())
        return rows, forces

    results = _map_cohorts(run, len(cohorts), threads)
    rows = [row for cohort_rows, _ in results for row in cohort_rows]
    write_trajectories(args.out, rows)
    if args.forces:
        write_jsonl(args.forces, [record for _, forces in results for record in forces])
    print(f"Predicted {len(rows)} rows ({samples} sample(s), {mode.value}) to {args.out}")
    return 0


def cmd_simulate(args, threads: int) -> int:
    grid = _load_grid(args.scene)
    if args.ckpt:
        params, ckpt_cfg = load_checkpoint(_require_file(args.ckpt))
        cfg, _ = _inference_config(ckpt_cfg, args.config)
    elif args.baseline == "sfm":
        cfg = load_config_file(_require_file(args.config))[0] if args.config else NspConfig()
        params = ModelParams.build(cfg, seed=args.seed)
    else:
        raise UsageError("simulate needs --ckpt unless --baseline sfm")
    if args.agents < 1 or args.seconds <= 0 or args.fps <= 0:
        raise UsageError("--agents, --seconds and --fps must be positive")

    rng = np.random.default_rng(args.seed)
    scenario = generate_scenario(grid, args.agents, rng)
    result = simulate_scene(grid, params, cfg, scenario, args.seconds, args.fps, args.mode, args.baseline, rng)
    write_trajectories(args.out, result.rows())
    if result.trajectories.shape[1] >= int(round(16 * args.fps)) and args.agents >= 2:
        rates = interval_collision_rates(result.trajectories, args.fps, cfg.collision_radius)
        for (start, stop), rate in rates.items():
            print(f"collision rate {start:g}-{stop:g}s: {rate:.4f}")
    print(f"Simulated {args.agents} agents x {result.trajectories.shape[1]} frames to {args.out}")
    return 0


def cmd_evaluate(args, threads: int) -> int:
    homography = load_homography(_require_file(args.homography)) if args.homography else None
    report = score_files(_require_file(args.pred), _require_file(args.truth), homography, args.collision_r)
    summary = {"ade": report.ade, "fde": report.fde, "collision_rate": report.collision_rate, "units": report.units}
    if args.json:
        for record in report.records:
            print(record.model_dump_json())
        print(json.dumps(summary))
        return 0
    print(f"{'window':<24} {'K':>3} {'ADE':>10} {'FDE':>10}")
    for record in report.records:
        print(f"{record.window:<24} {record.samples:>3} {record.ade:>10.4f} {record.fde:>10.4f}")
    print(f"ADE {report.ade:.4f} FDE {report.fde:.4f} ({report.units})")
    if report.collision_rate is not None:
        print(f"collision rate {report.collision_rate:.4f}")
    return 0


def cmd_gradcheck(args, threads: int) -> int:
    params, cfg = load_checkpoint(_require_file(args.ckpt))
    rng = np.random.default_rng(args.seed)
    track = np.cumsum(rng.normal(0.0, 5.0, size=(3, 2)), axis=0) + 100.0
    goal = track[-1] + rng.normal(0.0, 50.0, size=2)
    velocities = rng.normal(0.0, 30.0, size=(3, 2))

    def tau_output() -> Tensor:
        memory = AgentMemory.fresh(params.goal_net)
        out = None
        for k in range(len(track)):
            out = goal_tau(params.goal_net, Kinematics(Tensor(track[k]), Tensor(velocities[k])), goal, cfg, memory)
        return out

    def k_output() -> Tensor:
        a = Kinematics(Tensor(track[0]), Tensor(velocities[0]))
        b = Kinematics(Tensor(track[1]), Tensor(velocities[1]))
        return collision_k(params.collision_net, a, b, cfg)

    alpha, history = scale_inputs(rng.normal(0.0, 5.0, size=(4, 2)), rng.normal(100.0, 20.0, size=(4, cfg.obs_len, 2)), cfg.cvae_scale)

    def cvae_output() -> Tensor:
        alpha_hat, mu, log_var = cvae_train_forward(params.cvae, alpha, history, np.random.default_rng(args.seed))
        return loss_cvae(alpha, alpha_hat, mu, log_var, cfg.lambda_kl)

    checks = {
        "goal_net": (tau_output, params.goal_net.parameters()),
        "collision_net": (k_output, params.collision_net.parameters()),
        "cvae": (cvae_output, params.cvae.parameters()),
    }
    worst = {name: grad_check(fn, tensors) for name, (fn, tensors) in checks.items()}
    print(json.dumps(worst))
    failed = [name for name, err in worst.items() if err >= args.tol]
    if failed:
        logger.error(f"Gradient check failed for {failed} (tolerance {args.tol:g})")
        return 1
    return 0


COMMANDS: Dict[str, Callable] = {
    "train": cmd_train,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv and dispatch; every NspError becomes a JSON error line on stderr

    Returns:
        Exit code: 0 success, 2 usage, 3 IO, 4 config, 1 other errors
    """
    try:
        args = build_parser().parse_args(argv)
        try:
            settings = NspSettings()
        except ValidationError as e:
            raise ConfigError(f"Invalid NSP_* environment: {e}") from e
        try:
            configure_logging(args.log_level or settings.log_level, args.log_json or settings.log_json)
        except ValueError as e:
            raise ConfigError(f"Invalid log level: {e}") from e
        threads = args.threads if args.threads is not None else settings.threads
        if threads < 1:
            raise UsageError("--threads must be >= 1")
        return COMMANDS[args.command](args, threads)
    except NspError as e:
        print(ErrorRecord(error=e.code, message=e.message).model_dump_json(), file=sys.stderr)
        return e.exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
