"""Targets, losses and gradients for the DDPG, SAC and categorical (C51) learners.

All functions are pure: they take parameters and batches and return losses
together with parameter gradients. Observations passed in are assumed to be
normalized already. ``bounds`` is the ``(low, high)`` action box the tanh
output is mapped onto; ``None`` uses the raw network output as the action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, check_finite
from .funcapprox import MlpParams, backward, forward, init_mlp
from .replay import NStepBatch

ALGOS = ("pql_ddpg", "pql_d", "pql_sac", "sync_ddpg_n", "sync_sac_n")

LOG_STD_MIN = 0.5 * math.log(1e-6)
LOG_STD_MAX = 2.0


def algo_family(algo: str) -> str:
    """Map an algorithm name to the loss family it trains with."""
    return {"pql_ddpg": "ddpg", "sync_ddpg_n": "ddpg", "pql_d": "c51", "pql_sac": "sac", "sync_sac_n": "sac"}[algo]


@dataclass(frozen=True)
class CriticPair:
    q1: MlpParams
    q2: MlpParams
    q1_target: MlpParams
    q2_target: MlpParams

    @property
    def online(self) -> tuple[MlpParams, MlpParams]:
        return (self.q1, self.q2)

    @property
    def targets(self) -> tuple[MlpParams, MlpParams]:
        return (self.q1_target, self.q2_target)


@dataclass(frozen=True)
class CategoricalHead:
    n_atoms: int = 51
    v_min: float = -10.0
    v_max: float = 10.0
    atoms: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_atoms < 2 or not self.v_min < self.v_max:
            raise ValueError("need at least two atoms and v_min < v_max")
        object.__setattr__(self, "atoms", self.v_min + np.arange(self.n_atoms) * self.delta)

    @property
    def delta(self) -> float:
        return (self.v_max - self.v_min) / (self.n_atoms - 1)


@dataclass(frozen=True)
class EntropyCoefficient:
    log_alpha: float
    target_entropy: float

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)


# -- network construction -----------------------------------------------------


def make_policy(obs_dim, act_dim, rng, hidden=(256, 256), stochastic=False, dtype=np.float32) -> MlpParams:
    out = 2 * act_dim if stochastic else act_dim
    return init_mlp(
        (obs_dim, *hidden, out),
        rng,
        output_activation="identity" if stochastic else "tanh",
        output_gain=1e-2,
        dtype=dtype,
    )


def make_critics(obs_dim, act_dim, rng, hidden=(256, 256), n_out=1, dtype=np.float32) -> CriticPair:
    q1 = init_mlp((obs_dim + act_dim, *hidden, n_out), rng, dtype=dtype)
    q2 = init_mlp((obs_dim + act_dim, *hidden, n_out), rng, dtype=dtype)
    return CriticPair(q1, q2, q1, q2)


# -- shared pieces ------------------------------------------------------------


def _scale(bounds):
    if bounds is None:
        return 0.0, 1.0
    low, high = bounds
    return (high + low) / 2.0, (high - low) / 2.0


def policy_action(policy: MlpParams, obs: np.ndarray, bounds=None) -> np.ndarray:
    """Deterministic action: tanh output mapped onto ``bounds``."""
    center, half = _scale(bounds)
    y = forward(policy, obs)
    return y if bounds is None else center + half * y


def _critic_value(net: MlpParams, obs, actions):
    x = np.concatenate([obs, actions], axis=1).astype(net.dtype, copy=False)
    out, cache = forward(net, x, return_cache=True)
    return x, out, cache


def _critic_action_grad(net, x, cache, upstream, obs_dim):
    _, gx = backward(net, x, upstream, cache)
    return gx[:, obs_dim:]


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# -- DDPG with clipped double-Q and n-step targets ----------------------------


def ddpg_critic_target(batch: NStepBatch, target_policy: MlpParams, critics: CriticPair, bounds=None) -> np.ndarray:
    a_next = policy_action(target_policy, batch.next_obs, bounds)
    x = np.concatenate([batch.next_obs, a_next], axis=1)
    q1 = forward(critics.q1_target, x)[:, 0]
    q2 = forward(critics.q2_target, x)[:, 0]
    y = batch.returns + batch.discounts * np.minimum(q1, q2)
    check_finite("critic target", y)
    return y


def ddpg_critic_loss(batch: NStepBatch, critics: CriticPair, targets: np.ndarray):
    """Summed MSE of both online critics against the (constant) targets.

    Returns ``(loss, (grad_q1, grad_q2))``.
    """
    b = len(targets)
    loss, grads = 0.0, []
    for net in critics.online:
        x, q, cache = _critic_value(net, batch.obs, batch.actions)
        err = q[:, 0] - targets
        loss += float(np.mean(err.astype(np.float64) ** 2))
        g, _ = backward(net, x, (2.0 / b * err)[:, None], cache)
        grads.append(g)
    if not math.isfinite(loss):
        raise NonFiniteError("critic loss is not finite")
    return loss, tuple(grads)


def ddpg_actor_loss(states: np.ndarray, policy: MlpParams, critics: CriticPair, bounds=None):
    """``-mean(min(Q1, Q2))`` at the policy's action; critics stay frozen."""
    b, obs_dim = states.shape
    center, half = _scale(bounds)
    y, pcache = forward(policy, states, return_cache=True)
    actions = center + half * y
    x1, q1, c1 = _critic_value(critics.q1, states, actions)
    x2, q2, c2 = _critic_value(critics.q2, states, actions)
    q1, q2 = q1[:, 0], q2[:, 0]
    first = q1 <= q2
    loss = -float(np.mean(np.where(first, q1, q2)))
    if not math.isfinite(loss):
        raise NonFiniteError("actor loss is not finite")
    up = np.full(b, -1.0 / b, dtype=policy.dtype)
    ga = _critic_action_grad(critics.q1, x1, c1, (up * first)[:, None], obs_dim)
    ga = ga + _critic_action_grad(critics.q2, x2, c2, (up * ~first)[:, None], obs_dim)
    grads, _ = backward(policy, states, ga * half, pcache)
    return loss, grads


# -- SAC with n-step targets and a learnable temperature ----------------------


def sample_squashed(policy: MlpParams, obs: np.ndarray, eps: np.ndarray, bounds=None):
    """Reparameterised tanh-Gaussian sample. Returns ``(action, log_prob, aux)``."""
    center, half = _scale(bounds)
    out, cache = forward(policy, obs, return_cache=True)
    d = out.shape[1] // 2
    mu, raw_log_std = out[:, :d], out[:, d:]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    eps = eps.astype(out.dtype, copy=False)
    u = mu + std * eps
    y = np.tanh(u)
    # log(1 - tanh(u)^2) written to stay finite for large |u|
    log_jac = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    log_prob = (-0.5 * eps**2 - log_std - 0.5 * math.log(2 * math.pi) - log_jac).sum(axis=1) - d * math.log(half)
    aux = dict(cache=cache, y=y, std=std, eps=eps, clipped=raw_log_std != log_std, half=half)
    return center + half * y, log_prob, aux


def sac_critic_target(
    batch: NStepBatch, target_policy: MlpParams, critics: CriticPair, alpha: float, eps_next: np.ndarray, bounds=None
) -> np.ndarray:
    a_next, logp_next, _ = sample_squashed(target_policy, batch.next_obs, eps_next, bounds)
    x = np.concatenate([batch.next_obs, a_next], axis=1)
    q = np.minimum(forward(critics.q1_target, x)[:, 0], forward(critics.q2_target, x)[:, 0])
    y = batch.returns + batch.discounts * (q - alpha * logp_next)
    check_finite("critic target", y)
    return y


def sac_actor_loss(states, policy: MlpParams, critics: CriticPair, entropy: EntropyCoefficient, eps, bounds=None):
    """Returns ``(actor_loss, alpha_loss, policy_grads, log_alpha_grad)``."""
    b, obs_dim = states.shape
    alpha = entropy.alpha
    actions, logp, aux = sample_squashed(policy, states, eps, bounds)
    x1, q1, c1 = _critic_value(critics.q1, states, actions)
    x2, q2, c2 = _critic_value(critics.q2, states, actions)
    q1, q2 = q1[:, 0], q2[:, 0]
    first = q1 <= q2
    min_q = np.where(first, q1, q2)
    actor_loss = float(np.mean(alpha * logp - min_q))
    alpha_loss = -float(np.mean(entropy.log_alpha * (logp + entropy.target_entropy)))
    if not (math.isfinite(actor_loss) and math.isfinite(alpha_loss)):
        raise NonFiniteError("SAC actor/alpha loss is not finite")

    up = np.full(b, -1.0 / b, dtype=policy.dtype)
    ga = _critic_action_grad(critics.q1, x1, c1, (up * first)[:, None], obs_dim)
    ga = ga + _critic_action_grad(critics.q2, x2, c2, (up * ~first)[:, None], obs_dim)
    y, std, eps = aux["y"], aux["std"], aux["eps"]
    coef = alpha / b
    g_u = ga * aux["half"] * (1.0 - y * y) + coef * 2.0 * y
    g_log_std = np.where(aux["clipped"], 0.0, g_u * std * eps - coef)
    grads, _ = backward(policy, states, np.concatenate([g_u, g_log_std], axis=1), aux["cache"])
    log_alpha_grad = -float(np.mean(logp + entropy.target_entropy))
    return actor_loss, alpha_loss, grads, log_alpha_grad


@dataclass
class SacGrads:
    critics: tuple[MlpParams, MlpParams]
    policy: MlpParams
    log_alpha: float


def sac_losses(
    batch: NStepBatch,
    policy: MlpParams,
    critics: CriticPair,
    entropy: EntropyCoefficient,
    eps_next: np.ndarray,
    eps_cur: np.ndarray,
    target_policy: MlpParams | None = None,
    bounds=None,
):
    """Critic, actor and temperature losses on one batch.

    ``target_policy`` (default: ``policy``) samples the bootstrap action.
    Returns ``(critic_loss, actor_loss, alpha_loss, SacGrads)``.
    """
    tp = policy if target_policy is None else target_policy
    y = sac_critic_target(batch, tp, critics, entropy.alpha, eps_next, bounds)
    critic_loss, critic_grads = ddpg_critic_loss(batch, critics, y)
    actor_loss, alpha_loss, pgrads, la_grad = sac_actor_loss(batch.obs, policy, critics, entropy, eps_cur, bounds)
    return critic_loss, actor_loss, alpha_loss, SacGrads(critic_grads, pgrads, la_grad)


# -- categorical (C51) critic -------------------------------------------------


def c51_project(target_probs, returns, discounts, head: CategoricalHead) -> np.ndarray:
    """Project the Bellman-shifted distribution back onto the fixed atoms."""
    p = np.asarray(target_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != head.n_atoms:
        raise ValueError(f"target_probs must be [B x {head.n_atoms}]")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-5):
        raise ValueError("target distribution rows must sum to 1")
    n_rows, n_atoms = p.shape
    g = np.asarray(returns, dtype=np.float64)[:, None]
    d = np.asarray(discounts, dtype=np.float64)[:, None]
    tz = np.clip(g + d * head.atoms[None, :], head.v_min, head.v_max)
    pos = (tz - head.v_min) / head.delta
    nearest = np.rint(pos)
    pos = np.where(np.abs(pos - nearest) < 1e-9, nearest, pos)
    pos = np.clip(pos, 0, n_atoms - 1)
    lower = np.floor(pos)
    upper = np.ceil(pos)
    w_lower = np.where(lower == upper, 1.0, upper - pos)
    w_upper = pos - lower
    offset = (np.arange(n_rows) * n_atoms)[:, None]
    size = n_rows * n_atoms
    out = np.bincount((offset + lower.astype(np.int64)).ravel(), (p * w_lower).ravel(), size)
    out += np.bincount((offset + upper.astype(np.int64)).ravel(), (p * w_upper).ravel(), size)
    return out.reshape(n_rows, n_atoms)


def c51_target_distribution(
    batch: NStepBatch, target_policy: MlpParams, critics: CriticPair, head: CategoricalHead, bounds=None
) -> np.ndarray:
    """Projected target from whichever target head has the smaller expected value."""
    a_next = policy_action(target_policy, batch.next_obs, bounds)
    x = np.concatenate([batch.next_obs, a_next], axis=1)
    p1 = _softmax(forward(critics.q1_target, x).astype(np.float64))
    p2 = _softmax(forward(critics.q2_target, x).astype(np.float64))
    first = (p1 @ head.atoms) <= (p2 @ head.atoms)
    source = np.where(first[:, None], p1, p2)
    return c51_project(source, batch.returns, batch.discounts, head)


def c51_critic_loss(batch: NStepBatch, critics: CriticPair, head: CategoricalHead, target_probs: np.ndarray):
    """Cross-entropy of each online critic against the projected target, averaged over both.

    Returns ``(loss, (grad_q1, grad_q2))``.
    """
    b = len(target_probs)
    loss, grads = 0.0, []
    for net in critics.online:
        x, logits, cache = _critic_value(net, batch.obs, batch.actions)
        log_p = _log_softmax(logits.astype(np.float64))
        loss += -float(np.mean((target_probs * log_p).sum(axis=1))) / 2.0
        upstream = (np.exp(log_p) - target_probs) / (2.0 * b)
        g, _ = backward(net, x, upstream, cache)
        grads.append(g)
    if not math.isfinite(loss):
        raise NonFiniteError("distributional critic loss is not finite")
    return loss, tuple(grads)


def c51_actor_loss(states, policy: MlpParams, critics: CriticPair, head: CategoricalHead, bounds=None):
    """``-mean(min_i E_i[z])`` with each expectation taken under critic i's distribution."""
    b, obs_dim = states.shape
    center, half = _scale(bounds)
    y, pcache = forward(policy, states, return_cache=True)
    actions = center + half * y
    z = head.atoms
    parts = []
    for net in critics.online:
        x, logits, cache = _critic_value(net, states, actions)
        p = _softmax(logits.astype(np.float64))
        parts.append((net, x, cache, p, p @ z))
    e1, e2 = parts[0][4], parts[1][4]
    first = e1 <= e2
    loss = -float(np.mean(np.where(first, e1, e2)))
    if not math.isfinite(loss):
        raise NonFiniteError("distributional actor loss is not finite")
    ga = 0.0
    for (net, x, cache, p, e), mask in zip(parts, (first, ~first)):
        up = -(mask / b)[:, None] * p * (z[None, :] - e[:, None])
        ga = ga + _critic_action_grad(net, x, cache, up.astype(net.dtype), obs_dim)
    grads, _ = backward(policy, states, ga * half, pcache)
    return loss, grads
