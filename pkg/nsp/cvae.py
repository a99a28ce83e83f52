"""
Stochasticity CVAE
Conditional VAE over the per-step residual between deterministic prediction and observation
"""

from typing import Dict, List, Optional, Tuple

import numpy as np

from .autograd import ArrayLike, Tensor, as_tensor, concat, no_grad
from .exceptions import ShapeMismatchError
from .layers import DenseLayer, Module, build_mlp, mlp_forward, mlp_parameters


class CvaeModel(Module):
    """E_bias, E_past, E_latent and D_latent MLPs.

    Inputs and outputs of the networks live in scaled units (pixels x scale).
    """

    def __init__(
        self,
        e_bias: List[DenseLayer],
        e_past: List[DenseLayer],
        e_latent: List[DenseLayer],
        d_latent: List[DenseLayer],
        latent_dim: int,
        history_len: int,
        scale: float,
    ):
        if e_latent[-1].out_dim != 2 * latent_dim:
            raise ShapeMismatchError(f"latent encoder emits {e_latent[-1].out_dim}, expected {2 * latent_dim}")
        if d_latent[0].in_dim != latent_dim + e_past[-1].out_dim:
            raise ShapeMismatchError("decoder input must be latent_dim + past feature size")
        if e_past[0].in_dim != 2 * history_len:
            raise ShapeMismatchError(f"past encoder expects {e_past[0].in_dim} inputs for {history_len} positions")
        self.e_bias = e_bias
        self.e_past = e_past
        self.e_latent = e_latent
        self.d_latent = d_latent
        self.latent_dim = latent_dim
        self.history_len = history_len
        self.scale = scale

    @classmethod
    def build(cls, cfg, rng: Optional[np.random.Generator] = None, prefix: str = "cvae") -> "CvaeModel":
        """Random weights from `rng`, or all zeros when rng is None"""
        hidden, embed, latent = cfg.mlp_hidden, cfg.embed_dim, cfg.latent_dim
        act = cfg.hidden_activation
        return cls(
            e_bias=build_mlp([2, hidden, embed], act, act, rng, f"{prefix}.e_bias"),
            e_past=build_mlp([2 * cfg.obs_len, hidden, embed], act, act, rng, f"{prefix}.e_past"),
            e_latent=build_mlp([2 * embed, hidden, 2 * latent], act, "identity", rng, f"{prefix}.e_latent"),
            d_latent=build_mlp([latent + embed, hidden, 2], act, "identity", rng, f"{prefix}.d_latent"),
            latent_dim=latent,
            history_len=cfg.obs_len,
            scale=cfg.cvae_scale,
        )

    def named_parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for stack in (self.e_bias, self.e_past, self.e_latent, self.d_latent):
            params.update(mlp_parameters(stack))
        return params


def residual(p_true: ArrayLike, p_bar: ArrayLike) -> np.ndarray:
    """alpha = p_true - p_bar, so that p_bar + alpha recovers p_true"""
    return np.asarray(p_true, dtype=np.float64) - np.asarray(p_bar, dtype=np.float64)


def past_features(history: ArrayLike, scale: float) -> np.ndarray:
    """Flattened history relative to its last position, scaled.

    Accepts (L, 2) for one agent or (B, L, 2) for a batch.
    """
    h = np.asarray(history, dtype=np.float64)
    rel = h - h[..., -1:, :]
    return (rel * scale).reshape(*h.shape[:-2], -1)


def scale_inputs(alpha_px: ArrayLike, history_px: ArrayLike, scale: float) -> Tuple[np.ndarray, np.ndarray]:
    """Scaled (alpha, past-feature) arrays fed to cvae_train_forward"""
    return np.asarray(alpha_px, dtype=np.float64) * scale, past_features(history_px, scale)


def cvae_train_forward(
    m: CvaeModel, alpha: ArrayLike, past: ArrayLike, rng: np.random.Generator
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Encode the residual with its history, sample z and decode

    Args:
        m: The model
        alpha: Scaled residual, (2,) or (B, 2)
        past: Scaled history features, (2L,) or (B, 2L)
        rng: Stream for the reparameterization noise

    Returns:
        Tuple (alpha_hat, mu, log_var), alpha_hat in scaled units
    """
    alpha, past = as_tensor(alpha), as_tensor(past)
    if alpha.shape[-1] != 2 or past.shape[-1] != 2 * m.history_len or alpha.shape[:-1] != past.shape[:-1]:
        raise ShapeMismatchError(f"alpha {alpha.shape} and past {past.shape} do not line up")

    f_bias = mlp_forward(m.e_bias, alpha)
    f_past = mlp_forward(m.e_past, past)
    stats = mlp_forward(m.e_latent, concat([f_bias, f_past], axis=-1))
    mu = stats[..., : m.latent_dim]
    log_var = stats[..., m.latent_dim:]
    eps = rng.standard_normal(mu.shape)
    z = mu + (log_var * 0.5).exp() * eps
    alpha_hat = mlp_forward(m.d_latent, concat([z, f_past], axis=-1))
    return alpha_hat, mu, log_var


def kl_to_standard_normal(mu: ArrayLike, log_var: ArrayLike) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over the last axis"""
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    return ((mu * mu + log_var.exp() - 1.0 - log_var) * 0.5).sum(axis=-1)


def cvae_sample(
    m: CvaeModel,
    history: ArrayLike,
    sigma_latent: float,
    rng: np.random.Generator,
    n: Optional[int] = None,
) -> np.ndarray:
    """
    Draw residuals for one agent from the prior N(0, sigma_latent^2 I)

    Args:
        m: The model
        history: The last L positions in pixels, (L, 2)
        sigma_latent: Prior standard deviation
        rng: Sampling stream
        n: Number of draws; None returns a single (2,) residual

    Returns:
        Residual(s) in pixels, (2,) or (n, 2)
    """
    history = np.asarray(history, dtype=np.float64)
    if history.shape != (m.history_len, 2):
        raise ShapeMismatchError(f"history must be ({m.history_len}, 2), got {history.shape}")
    count = 1 if n is None else n
    with no_grad():
        f_past = mlp_forward(m.e_past, past_features(history, m.scale))
        z = rng.normal(0.0, 1.0, size=(count, m.latent_dim)) * sigma_latent
        tiled = np.broadcast_to(f_past.data, (count, f_past.shape[-1]))
        alpha_hat = mlp_forward(m.d_latent, np.concatenate([z, tiled], axis=1)).data / m.scale
    return alpha_hat[0] if n is None else alpha_hat
