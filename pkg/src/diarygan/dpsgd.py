"""Differentially private discriminator updates and RMSProp generator updates.

Discriminator steps follow the per-example recipe: compute one gradient per
training example, rescale each so its L2 norm (taken jointly over all
discriminator parameters) is at most ``C``, sum, add ``N(0, (sigma*C)^2)``
noise to every coordinate of the sum, divide by the batch size and take an
SGD step.

An "example" here is one real record paired with one generated record, so the
clipping bound applies to everything a single real record contributes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import DimensionError, ParameterError
from .nets import DiscriminatorParams, discriminator_logits


@dataclass(frozen=True)
class PrivacyConfig:
    """Clipping bound ``clip_norm`` (C) and noise multiplier (sigma = noise std / C).

    ``enabled=False`` is the fully non-private baseline (no clipping, no
    noise). ``enabled=True`` with ``noise_multiplier=0`` clips without noise.
    The (epsilon, delta) guarantee is not computed here; the step count, batch
    size, C and sigma recorded by the trainer are what an accountant needs.
    """

    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ParameterError(f"clip_norm must be > 0, got {self.clip_norm}")
        if not self.noise_multiplier >= 0:
            raise ParameterError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")

    @property
    def noise_std(self) -> float:
        return self.noise_multiplier * self.clip_norm


@dataclass
class DpSgdState:
    lr: float
    privacy: PrivacyConfig
    rng: nc.SeededRng

    def __post_init__(self):
        if not self.lr >= 0:
            raise ParameterError(f"learning rate must be >= 0, got {self.lr}")


@dataclass
class RmspropState:
    lr: float = 5e-4
    rho: float = 0.9
    eps: float = 1e-8
    v: dict = field(default_factory=dict)

    def copy(self):
        return RmspropState(self.lr, self.rho, self.eps, {k: a.copy() for k, a in self.v.items()})


@dataclass
class DiscriminatorBatch:
    real_tabular: np.ndarray
    real_sequence: np.ndarray
    fake_tabular: np.ndarray
    fake_sequence: np.ndarray

    def __len__(self):
        return self.real_tabular.shape[0]


@dataclass
class StepStats:
    loss: float
    preclip_mean: float | None = None
    preclip_max: float | None = None


# ---------------------------------------------------------------------------
# clipping and noise


def per_example_norms(stacked: dict) -> np.ndarray:
    """Joint L2 norm per example of gradients stacked as name -> (B, *shape)."""
    sq = None
    for name in sorted(stacked):
        g = stacked[name]
        s = (g.reshape(g.shape[0], -1) ** 2).sum(axis=1)
        sq = s if sq is None else sq + s
    return np.sqrt(sq)


def clip_stacked(stacked: dict, clip_norm: float):
    """Clip every example to norm ``clip_norm``; returns ``(clipped, pre-clip norms)``."""
    if not clip_norm > 0:
        raise ParameterError(f"clip_norm must be > 0, got {clip_norm}")
    norms = per_example_norms(stacked)
    with np.errstate(divide="ignore"):
        scale = np.minimum(1.0, clip_norm / norms)
    scale[norms == 0] = 1.0
    clipped = {k: g * scale.reshape((-1,) + (1,) * (g.ndim - 1)) for k, g in stacked.items()}
    return clipped, norms


def _stack(grads: list[dict]) -> dict:
    names = list(grads[0])
    for g in grads[1:]:
        if list(g) != names:
            raise ParameterError("per-example gradient maps cover different parameter sets")
    return {k: np.stack([g[k] for g in grads]) for k in names}


def clip_per_example(grads: list[dict], clip_norm: float) -> list[dict]:
    """Scale each example's gradient map by ``min(1, C / ||g||)``, norm over all parameters."""
    if not clip_norm > 0:
        raise ParameterError(f"clip_norm must be > 0, got {clip_norm}")
    if not grads:
        return []
    clipped, _ = clip_stacked(_stack(grads), clip_norm)
    return [{k: v[i] for k, v in clipped.items()} for i in range(len(grads))]


def privatize_stacked(clipped: dict, cfg: PrivacyConfig, batch_size: int, rng: nc.SeededRng) -> dict:
    """``(sum_i g_i + N(0, (sigma*C)^2 I)) / B``; examples summed in index order.

    Noise is drawn tensor by tensor in sorted name order, so the result does
    not depend on how the gradient map happens to be ordered.
    """
    if batch_size < 1:
        raise ParameterError("batch size must be >= 1")
    out = {}
    for k in sorted(clipped):
        g = clipped[k]
        total = g.sum(axis=0)
        noise = nc.gaussian(rng, total.shape, 0.0, cfg.noise_std)
        out[k] = (total + noise) / batch_size
    return out


def privatize_sum(clipped: list[dict], cfg: PrivacyConfig, batch_size: int, rng: nc.SeededRng) -> dict:
    if batch_size < 1:
        raise ParameterError("batch size must be >= 1")
    if not clipped:
        raise ParameterError("no gradients to aggregate")
    return privatize_stacked(_stack(clipped), cfg, batch_size, rng)


# ---------------------------------------------------------------------------
# updates


def sgd_update(tensors: dict, grads: dict, lr: float) -> dict:
    return {k: v - lr * grads[k] for k, v in tensors.items()}


def rmsprop_step(state: RmspropState, params: dict, grads: dict):
    """``v <- rho v + (1-rho) g^2``; ``theta <- theta - lr g / (sqrt(v) + eps)``.

    Returns new parameter and state objects; inputs are left untouched.
    """
    new_params, new_v = {}, {}
    for k, theta in params.items():
        g = grads[k]
        if g.shape != theta.shape:
            raise DimensionError(f"gradient for {k!r} has shape {g.shape}, parameter has {theta.shape}")
        v = state.v.get(k)
        v = np.zeros_like(theta) if v is None else v
        v = state.rho * v + (1.0 - state.rho) * g * g
        new_v[k] = v
        new_params[k] = theta - state.lr * g / (np.sqrt(v) + state.eps)
    return new_params, RmspropState(state.lr, state.rho, state.eps, new_v)


def discriminator_row_losses(logits, loss: str):
    """Per-row loss terms for a stacked [real; fake] batch of logits (2B x 1)."""
    n = nc._val(logits).shape[0] // 2
    sign = np.concatenate([-np.ones(n), np.ones(n)])[:, None]
    if loss == "standard":
        # -log D(x) for real rows, -log(1 - D(G(z))) for fake rows
        rows = nc.softplus(logits * sign)
    elif loss == "wasserstein":
        rows = logits * sign
    else:
        raise ParameterError(f"unknown loss variant {loss!r}")
    return nc.sum(rows, axis=1)


def _stacked_inputs(batch: DiscriminatorBatch):
    if batch.real_tabular.shape[0] == 0:
        raise ParameterError("discriminator batch is empty")
    if batch.real_tabular.shape[0] != batch.fake_tabular.shape[0]:
        raise DimensionError("real and generated halves of a batch must have equal size")
    return (np.concatenate([batch.real_tabular, batch.fake_tabular]),
            np.concatenate([batch.real_sequence, batch.fake_sequence]))


def discriminator_pair_gradients(d: DiscriminatorParams, batch: DiscriminatorBatch, loss="standard"):
    """Per-example gradients (name -> (B, *shape)) and per-example losses."""
    tab, seq = _stacked_inputs(batch)
    n = len(batch)
    tape = nc.Tape()
    rows = discriminator_row_losses(discriminator_logits(d, tab, seq, tape), loss)
    row_losses = rows.value
    grads = tape.per_example_backward(rows)
    pair = {k: g[:n] + g[n:] for k, g in grads.items()}
    return pair, row_losses[:n] + row_losses[n:]


def discriminator_mean_gradient(d: DiscriminatorParams, batch: DiscriminatorBatch, loss="standard"):
    """Ordinary minibatch gradient of the mean pair loss."""
    tab, seq = _stacked_inputs(batch)
    tape = nc.Tape()
    rows = discriminator_row_losses(discriminator_logits(d, tab, seq, tape), loss)
    total = nc.sum(rows) * (1.0 / len(batch))
    return tape.backward(total), float(total.value)


def dp_discriminator_step(d: DiscriminatorParams, batch: DiscriminatorBatch, state: DpSgdState,
                          loss: str = "standard"):
    """One discriminator update; returns ``(new params, StepStats)``.

    With privacy disabled this is plain minibatch SGD on the mean loss.
    """
    if not state.privacy.enabled:
        grads, value = discriminator_mean_gradient(d, batch, loss)
        return DiscriminatorParams(d.config, sgd_update(d.tensors, grads, state.lr)), StepStats(value)
    per_ex, losses = discriminator_pair_gradients(d, batch, loss)
    clipped, norms = clip_stacked(per_ex, state.privacy.clip_norm)
    grads = privatize_stacked(clipped, state.privacy, len(batch), state.rng)
    new = DiscriminatorParams(d.config, sgd_update(d.tensors, grads, state.lr))
    return new, StepStats(float(losses.mean()), float(norms.mean()), float(norms.max()))
