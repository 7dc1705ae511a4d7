"""DDPM schedules, forward/reverse steps and embedding-guided sampling.

Time steps are 1-based: ``t`` runs from ``T`` down to 1 and schedule arrays
are indexed with ``t - 1``.  ``alpha_bar`` is the cumulative product of
``1 - beta``.

Guidance shifts the reverse-step mean by ``-s * sigma_t**2 * grad``, where
``grad`` is the gradient with respect to ``x_t`` of the squared spherical
distance between ``embed(x_hat)`` and the target embedding, and ``x_hat``
blends the predicted clean sample with the current state.  Gradients are
taken with torch autograd through the predictor and the embedder.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .retrieval import CandidatePool, rank_candidates

log = logging.getLogger(__name__)

ALPHA_BAR_FLOOR = 1e-12


class DiffusionError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: torch.Tensor
    alpha_bar: torch.Tensor

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"time step {t} outside [1, {self.T}]")

    def beta_at(self, t: int) -> float:
        self.check_t(t)
        return float(self.beta[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        self.check_t(t)
        return float(self.alpha_bar[t - 1])

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else self.alpha_bar_at(t - 1)


def schedule_from_betas(beta) -> DiffusionSchedule:
    beta = torch.as_tensor(beta, dtype=torch.float64).clone()
    if beta.ndim != 1 or beta.numel() == 0:
        raise ValueError("beta must be a non-empty vector")
    if bool(((beta <= 0) | (beta >= 1)).any()):
        raise ValueError("every beta must lie in (0, 1)")
    alpha_bar = torch.empty_like(beta)
    running = 1.0
    for i, b in enumerate(beta.tolist()):
        running = running * (1.0 - b)
        alpha_bar[i] = running
    return DiffusionSchedule(beta, alpha_bar)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> DiffusionSchedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        return schedule_from_betas([beta_start])
    return schedule_from_betas(torch.linspace(beta_start, beta_end, T, dtype=torch.float64))


def forward_diffuse(x0: torch.Tensor, t: int, epsilon: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    if x0.shape != epsilon.shape:
        raise ValueError("x0 and epsilon must have the same shape")
    ab = schedule.alpha_bar_at(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * epsilon


def predict_x0(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    ab = schedule.alpha_bar_at(t)
    if ab < ALPHA_BAR_FLOOR:
        warnings.warn(f"alpha_bar[{t}]={ab:.3g} floored at {ALPHA_BAR_FLOOR}", RuntimeWarning, stacklevel=2)
        ab = ALPHA_BAR_FLOOR
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def blend_weight(t: int, schedule: DiffusionSchedule, eta_rule: str = "sqrt_one_minus_alphabar",
                 eta: float | None = None) -> float:
    if eta_rule == "sqrt_one_minus_alphabar":
        return math.sqrt(1.0 - schedule.alpha_bar_at(t))
    if eta_rule == "constant":
        if eta is None:
            raise ValueError("constant eta_rule needs an eta value")
        return float(eta)
    raise ValueError(f"unknown eta_rule {eta_rule!r}")


def blend_xhat(x0_hat, x_t, t: int, schedule: DiffusionSchedule, eta_rule: str = "sqrt_one_minus_alphabar",
               eta: float | None = None):
    if x0_hat.shape != x_t.shape:
        raise ValueError("x0_hat and x_t must have the same shape")
    w = blend_weight(t, schedule, eta_rule, eta)
    return x0_hat * w + x_t * (1.0 - w)


def spherical_distance_sq(a, b) -> torch.Tensor:
    """2 * arcsin(|a_hat - b_hat| / 2)**2 on the last axis, after unit-normalizing both."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("spherical distance of a zero vector")
    chord = (a / na - b / nb).norm(dim=-1)
    return 2.0 * torch.arcsin((chord / 2.0).clamp(max=1.0)) ** 2


# --------------------------------------------------------------------------
# Predictors and embedders
# --------------------------------------------------------------------------


class NoisePredictor(Protocol):
    data_shape: tuple[int, ...]

    def __call__(self, x_t: torch.Tensor, t: int) -> torch.Tensor: ...


class ToyGaussianPredictor:
    """Exact noise predictor for standard-normal data: eps_hat = sqrt(1 - alpha_bar_t) * x_t."""

    def __init__(self, schedule: DiffusionSchedule, data_shape: Sequence[int] = ()):
        self.schedule = schedule
        self.data_shape = tuple(data_shape)

    def score(self, x_t: torch.Tensor, t: int) -> torch.Tensor:
        return -x_t

    def __call__(self, x_t, t):
        return math.sqrt(1.0 - self.schedule.alpha_bar_at(t)) * x_t


def toy_gaussian_predictor(schedule: DiffusionSchedule, data_shape: Sequence[int] = ()) -> ToyGaussianPredictor:
    return ToyGaussianPredictor(schedule, data_shape)


class LinearEmbedder:
    """Differentiable linear image embedder ``x -> x @ matrix.T`` (states flattened per item)."""

    def __init__(self, matrix, space_id: str = "linear"):
        self.matrix = torch.tensor(np.array(matrix, dtype=np.float64))
        self.space_id = space_id

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    @property
    def state_dim(self) -> int:
        return self.matrix.shape[1]

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return x.reshape(*x.shape[:-1], -1).to(self.matrix.dtype) @ self.matrix.T

    def to_numpy(self, x) -> np.ndarray:
        with torch.no_grad():
            return self(torch.tensor(np.array(x, dtype=np.float64))).numpy()


@dataclass
class GuidanceConfig:
    s: float = 1000.0
    eta_rule: str = "sqrt_one_minus_alphabar"
    eta: float | None = None
    init: str = "gaussian"
    t_start_fraction: float = 0.5
    sigma_rule: str = "beta"
    stop_gradient_eps: bool = False

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("guidance scale must be non-negative")
        if not 0 < self.t_start_fraction <= 1:
            raise ValueError("t_start_fraction must lie in (0, 1]")
        if self.init not in ("gaussian", "noised_image"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.sigma_rule not in ("beta", "beta_tilde"):
            raise ValueError(f"unknown sigma_rule {self.sigma_rule!r}")


@dataclass
class GuidanceTarget:
    """Target embedding(s) plus a differentiable image embedder.

    ``signal_embedding`` is ``(D,)`` for a single state or ``(B, D)`` for a
    batch of independent chains (one target per chain).
    """

    signal_embedding: torch.Tensor
    image_embedder: Callable[[torch.Tensor], torch.Tensor]

    def __post_init__(self):
        emb = self.signal_embedding
        if isinstance(emb, torch.Tensor):
            self.signal_embedding = emb.detach().to(torch.float64)
        else:
            self.signal_embedding = torch.tensor(np.array(emb, dtype=np.float64))


@dataclass
class Guidance:
    target: GuidanceTarget
    config: GuidanceConfig = field(default_factory=GuidanceConfig)


def guidance_loss(x_t: torch.Tensor, t: int, target: GuidanceTarget, schedule: DiffusionSchedule,
                  predictor, eta_rule: str = "sqrt_one_minus_alphabar", eta: float | None = None,
                  stop_gradient_eps: bool = False) -> torch.Tensor:
    """Per-chain squared spherical distance between embed(x_hat(x_t)) and the target."""
    eps_hat = predictor(x_t, t)
    if stop_gradient_eps:
        eps_hat = eps_hat.detach()
    x_hat = blend_xhat(predict_x0(x_t, t, eps_hat, schedule), x_t, t, schedule, eta_rule, eta)
    return spherical_distance_sq(target.image_embedder(x_hat), target.signal_embedding)


def guidance_gradient(x_t: torch.Tensor, t: int, target: GuidanceTarget, schedule: DiffusionSchedule,
                      predictor, eta_rule: str = "sqrt_one_minus_alphabar", eta: float | None = None,
                      stop_gradient_eps: bool = False, return_loss: bool = False):
    """Gradient of the guidance loss with respect to ``x_t`` (chains are independent)."""
    x = x_t.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = guidance_loss(x, t, target, schedule, predictor, eta_rule, eta, stop_gradient_eps)
        try:
            (grad,) = torch.autograd.grad(loss.sum(), x)
        except RuntimeError as exc:
            raise DiffusionError(f"guidance embedder/predictor is not differentiable: {exc}") from exc
    if return_loss:
        return grad, loss.detach()
    return grad


def step_variance(t: int, schedule: DiffusionSchedule, sigma_rule: str = "beta") -> float:
    beta = schedule.beta_at(t)
    if sigma_rule == "beta":
        return beta
    if sigma_rule == "beta_tilde":
        return beta * (1.0 - schedule.alpha_bar_prev(t)) / (1.0 - schedule.alpha_bar_at(t))
    raise ValueError(f"unknown sigma_rule {sigma_rule!r}")


def reverse_mean(x_t, t: int, eps_hat, schedule: DiffusionSchedule):
    beta = schedule.beta_at(t)
    ab = schedule.alpha_bar_at(t)
    return (x_t - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - beta)


def guided_step(x_t: torch.Tensor, t: int, predictor, schedule: DiffusionSchedule,
                guidance: Guidance | None = None, generator: torch.Generator | None = None,
                sigma_rule: str | None = None, return_loss: bool = False):
    """One reverse step ``x_t -> x_{t-1}``; noise is omitted at ``t == 1``."""
    schedule.check_t(t)
    if sigma_rule is None:
        sigma_rule = guidance.config.sigma_rule if guidance is not None else "beta"
    with torch.no_grad():
        mean = reverse_mean(x_t, t, predictor(x_t, t), schedule)
    var = step_variance(t, schedule, sigma_rule)
    loss = None
    if guidance is not None and guidance.config.s != 0:
        c = guidance.config
        grad, loss = guidance_gradient(x_t, t, guidance.target, schedule, predictor, c.eta_rule, c.eta,
                                       c.stop_gradient_eps, return_loss=True)
        mean = mean - c.s * var * grad
    elif return_loss and guidance is not None:
        with torch.no_grad():
            c = guidance.config
            loss = guidance_loss(x_t, t, guidance.target, schedule, predictor, c.eta_rule, c.eta)
    if t > 1:
        z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
        out = mean + math.sqrt(var) * z
    else:
        out = mean
    if not bool(torch.isfinite(out).all()):
        raise DiffusionError(f"non-finite state after reverse step t={t}")
    if return_loss:
        return out, loss
    return out


# --------------------------------------------------------------------------
# Initialization and sampling
# --------------------------------------------------------------------------


@dataclass
class InitState:
    x: torch.Tensor
    t_start: int
    keys: list[str] | None = None


def start_step(schedule: DiffusionSchedule, t_start_fraction: float) -> int:
    return max(1, min(schedule.T, int(round(t_start_fraction * schedule.T))))


def gaussian_init(shape: Sequence[int], schedule: DiffusionSchedule, generator: torch.Generator | None = None) -> InitState:
    return InitState(torch.randn(tuple(shape), generator=generator, dtype=torch.float64), schedule.T)


def select_init_image(signal_embedding, prior_pool: CandidatePool, image_loader: Callable[[str], np.ndarray],
                      schedule: DiffusionSchedule, t_start_fraction: float = 0.5,
                      generator: torch.Generator | None = None) -> InitState:
    """Pick the prior image closest to each signal embedding and noise it to ``t_start``.

    ``signal_embedding`` may be one vector or a batch; ``image_loader`` maps a
    pool key to that image's state array.
    """
    queries = np.atleast_2d(np.asarray(signal_embedding, dtype=np.float64))
    keys = [rank_candidates(q, prior_pool)[0] for q in queries]
    states = []
    for k in keys:
        try:
            states.append(np.asarray(image_loader(k), dtype=np.float64))
        except Exception as exc:  # loader may be user code
            raise DiffusionError(f"cannot fetch prior image {k!r}: {exc}") from exc
    x0 = torch.as_tensor(np.stack(states))
    if np.asarray(signal_embedding).ndim == 1:
        x0 = x0[0]
    t_start = start_step(schedule, t_start_fraction)
    eps = torch.randn(x0.shape, generator=generator, dtype=torch.float64)
    return InitState(forward_diffuse(x0, t_start, eps, schedule), t_start, keys)


@dataclass
class SampleResult:
    x: torch.Tensor
    t_start: int
    guidance_loss: list[dict] = field(default_factory=list)
    final_loss: torch.Tensor | None = None


def sample(predictor, schedule: DiffusionSchedule, guidance: Guidance | None, init: InitState,
           generator: torch.Generator | None = None, sigma_rule: str | None = None) -> SampleResult:
    """Run the reverse chain from ``init.t_start`` down to 1.

    When guidance is present the per-step loss (per chain) is logged, and
    ``final_loss`` holds the loss of ``embed(x_0)`` against the target.
    """
    x = torch.as_tensor(init.x, dtype=torch.float64)
    steps = []
    for t in range(init.t_start, 0, -1):
        x_prev, loss = guided_step(x, t, predictor, schedule, guidance, generator, sigma_rule, return_loss=True)
        if loss is not None:
            steps.append({"step": t, "guidance_loss": loss.tolist()})
        x = x_prev
    final = None
    if guidance is not None:
        with torch.no_grad():
            final = spherical_distance_sq(guidance.target.image_embedder(x), guidance.target.signal_embedding)
    return SampleResult(x, init.t_start, steps, final)
