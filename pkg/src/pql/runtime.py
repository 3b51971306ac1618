"""Actor, V-learner and P-learner workers, the three-process runtime, and the sequential baseline.

The worker classes hold all learning state and expose plain step methods.
``run_parallel`` drives each one from its own process and routes snapshots
through the actor. ``run_synchronous`` drives the same classes from one loop.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import queue
import signal
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import (
    CategoricalHead,
    CriticPair,
    EntropyCoefficient,
    algo_family,
    c51_actor_loss,
    c51_critic_loss,
    c51_target_distribution,
    ddpg_actor_loss,
    ddpg_critic_loss,
    ddpg_critic_target,
    make_critics,
    make_policy,
    policy_action,
    sac_actor_loss,
    sac_critic_target,
    sample_squashed,
)
from .config import RunConfig
from .errors import NotReady
from .explore import apply as apply_noise
from .explore import build_schedule, fixed_schedule
from .funcapprox import (
    AdamState,
    MlpParams,
    RunningNormalizer,
    adam_step,
    clip_global_norm,
    forward,
    normalizer_apply,
    normalizer_update,
    save_checkpoint,
    soft_update,
)
from .replay import NStepAssembler, NStepBatch, ReplayBuffer, StateBuffer, TransitionBatch
from .scheduler import ProgressCounters, RatioConfig, may_proceed
from .vecenv import get_task, make_env

METRIC_COLUMNS = (
    "wall_clock_s",
    "env_steps",
    "c_a",
    "c_v",
    "c_p",
    "eval_return_mean",
    "eval_return_stderr",
    "critic_loss_ema",
    "actor_loss_ema",
)

_STREAMS = {"noise": 1, "init": 2, "vlearner": 3, "plearner": 4, "eval": 5}
INITIAL_LOG_ALPHA = math.log(0.1)
LOSS_EMA_DECAY = 0.95


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for one consumer of the master seed."""
    return np.random.default_rng([seed, _STREAMS[stream]])


def eval_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, _STREAMS["eval"]]).generate_state(1)[0])


# -- messages -----------------------------------------------------------------


@dataclass(frozen=True)
class ModelSnapshot:
    """Immutable published parameters. ``params`` is a policy net or a ``(q1, q2)`` pair."""

    kind: str
    version: int
    params: object
    normalizer: RunningNormalizer | None = None
    log_alpha: float | None = None

    def __post_init__(self):
        if self.kind not in ("policy", "critic_pair"):
            raise ValueError(f"unknown snapshot kind {self.kind!r}")


def newer(current: ModelSnapshot | None, candidate: ModelSnapshot | None) -> ModelSnapshot | None:
    if candidate is None:
        return current
    if current is None or candidate.version > current.version:
        return candidate
    return current


@dataclass
class Rollout:
    """H lockstep steps from all N envs; arrays are ``[H, N, ...]`` with raw rewards."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    truncated: np.ndarray
    next_obs: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def n_transitions(self) -> int:
        return self.rewards.size

    @property
    def states(self) -> np.ndarray:
        return self.obs.reshape(-1, self.obs.shape[-1])

    def transitions(self, reward_scale: float):
        for h in range(len(self)):
            yield TransitionBatch(
                self.obs[h],
                self.actions[h],
                self.rewards[h] * reward_scale,
                self.dones[h],
                self.truncated[h],
                self.next_obs[h],
            )


@dataclass(frozen=True)
class DataMessage:
    seq: int
    rollout: Rollout
    normalizer: RunningNormalizer
    policy: ModelSnapshot | None = None


@dataclass(frozen=True)
class StateMessage:
    seq: int
    states: np.ndarray
    normalizer: RunningNormalizer
    critics: ModelSnapshot | None = None


@dataclass(frozen=True)
class EndOfStream:
    batches: int


# -- workers ------------------------------------------------------------------


@dataclass(frozen=True)
class Models:
    policy: MlpParams
    critics: CriticPair


def initial_models(cfg: RunConfig) -> Models:
    task = get_task(cfg.task)
    family = algo_family(cfg.algo)
    rng = stream_rng(cfg.seed, "init")
    policy = make_policy(task.obs_dim, task.act_dim, rng, cfg.hidden, stochastic=family == "sac")
    n_out = CategoricalHead().n_atoms if family == "c51" else 1
    critics = make_critics(task.obs_dim, task.act_dim, rng, cfg.hidden, n_out=n_out)
    return Models(policy, critics)


def deterministic_action(policy: MlpParams, obs: np.ndarray, bounds) -> np.ndarray:
    """Noise-free action; for a Gaussian policy this is the squashed mean."""
    act_dim = policy.out_dim
    low, high = bounds
    if policy.activations[-1] == "identity":
        act_dim //= 2
        mu = forward(policy, obs)[:, :act_dim]
        return (high + low) / 2 + (high - low) / 2 * np.tanh(mu)
    return policy_action(policy, obs, bounds)


class ActorWorker:
    """Steps the vectorised env with exploration and owns the observation normalizer."""

    def __init__(self, cfg: RunConfig, policy: MlpParams):
        self.cfg = cfg
        self.env = make_env(cfg.task, cfg.n_envs, cfg.seed)
        self.bounds = self.env.action_bounds
        self.family = algo_family(cfg.algo)
        if cfg.sigma_fixed is not None:
            self.schedule = fixed_schedule(cfg.n_envs, cfg.sigma_fixed)
        else:
            self.schedule = build_schedule(cfg.n_envs, cfg.sigma_min, cfg.sigma_max)
        self.rng = stream_rng(cfg.seed, "noise")
        self.policy = policy
        self.obs = self.env.observations.copy()
        self.normalizer = normalizer_update(RunningNormalizer.create(self.env.obs_dim), self.obs)
        self.steps = 0

    def act(self, obs: np.ndarray) -> np.ndarray:
        n, d = self.cfg.n_envs, self.env.act_dim
        if self.steps < self.cfg.warm_up:
            return self.rng.uniform(*self.bounds, size=(n, d)).astype(np.float32)
        x = normalizer_apply(self.normalizer, obs)
        if self.family == "sac":
            eps = self.rng.standard_normal((n, d), dtype=np.float32)
            action, _, _ = sample_squashed(self.policy, x, eps, self.bounds)
        else:
            action = apply_noise(policy_action(self.policy, x, self.bounds), self.schedule, self.bounds, self.rng)
        return action.astype(np.float32)

    def rollout(self, n_steps: int) -> Rollout:
        cols = {k: [] for k in ("obs", "actions", "rewards", "dones", "truncated", "next_obs")}
        for _ in range(n_steps):
            action = self.act(self.obs)
            res = self.env.step(action)
            cols["obs"].append(self.obs)
            cols["actions"].append(action)
            cols["rewards"].append(res.rewards.astype(np.float32))
            cols["dones"].append(res.dones)
            cols["truncated"].append(res.truncated)
            cols["next_obs"].append(res.terminal_observations)
            self.obs = res.next_observations
            self.normalizer = normalizer_update(self.normalizer, self.obs)
            self.steps += 1
        return Rollout(**{k: np.stack(v) for k, v in cols.items()})


def _normalized(batch: NStepBatch, stats: RunningNormalizer) -> NStepBatch:
    return NStepBatch(
        normalizer_apply(stats, batch.obs),
        batch.actions,
        batch.returns,
        normalizer_apply(stats, batch.next_obs),
        batch.discounts,
    )


class VLearnerWorker:
    """Assembles n-step records into the replay buffer and trains the critic pair."""

    def __init__(self, cfg: RunConfig, models: Models):
        task = get_task(cfg.task)
        self.cfg = cfg
        self.family = algo_family(cfg.algo)
        self.bounds = (task.action_low, task.action_high)
        self.assembler = NStepAssembler(cfg.n_envs, task.obs_dim, task.act_dim, cfg.n_step, cfg.gamma)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, task.obs_dim, task.act_dim, warmup=min(cfg.n_envs, cfg.buffer_capacity))
        self.critics = models.critics
        self.opt = tuple(AdamState.create(q) for q in models.critics.online)
        self.target_policy = models.policy
        self.log_alpha = INITIAL_LOG_ALPHA
        self.normalizer = RunningNormalizer.create(task.obs_dim)
        self.head = CategoricalHead()
        self.rng = stream_rng(cfg.seed, "vlearner")
        self.updates = 0
        self.transitions_in = 0
        self.records_in = 0

    @property
    def ready(self) -> bool:
        return self.buffer.ready

    def ingest(self, rollout: Rollout, normalizer: RunningNormalizer) -> None:
        for batch in rollout.transitions(self.cfg.scale):
            records = self.assembler.push(batch)
            self.buffer.insert(records)
            self.records_in += len(records)
        self.transitions_in += rollout.n_transitions
        self.normalizer = normalizer

    def set_policy(self, snapshot: ModelSnapshot) -> None:
        """Hard update of the bootstrap policy."""
        self.target_policy = snapshot.params
        if snapshot.log_alpha is not None:
            self.log_alpha = snapshot.log_alpha

    def update(self) -> float:
        if not self.ready:
            raise NotReady("replay buffer below warm-up size")
        batch = _normalized(self.buffer.sample(self.cfg.batch_size, self.rng), self.normalizer)
        if self.family == "c51":
            probs = c51_target_distribution(batch, self.target_policy, self.critics, self.head, self.bounds)
            loss, grads = c51_critic_loss(batch, self.critics, self.head, probs)
        else:
            if self.family == "sac":
                eps = self.rng.standard_normal(batch.actions.shape, dtype=np.float32)
                y = sac_critic_target(batch, self.target_policy, self.critics, math.exp(self.log_alpha), eps, self.bounds)
            else:
                y = ddpg_critic_target(batch, self.target_policy, self.critics, self.bounds)
            loss, grads = ddpg_critic_loss(batch, self.critics, y)
        online, opt = [], []
        for net, g, state in zip(self.critics.online, grads, self.opt):
            new, state = adam_step(net, clip_global_norm(g, self.cfg.grad_clip), state, self.cfg.lr_critic)
            online.append(new)
            opt.append(state)
        targets = [soft_update(t, o, self.cfg.tau) for t, o in zip(self.critics.targets, online)]
        self.critics = CriticPair(*online, *targets)
        self.opt = tuple(opt)
        self.updates += 1
        return loss

    def snapshot(self, version: int) -> ModelSnapshot:
        return ModelSnapshot("critic_pair", version, self.critics.online, self.normalizer)


class PLearnerWorker:
    """Trains the policy (and the SAC temperature) against the latest critic snapshot."""

    def __init__(self, cfg: RunConfig, models: Models):
        task = get_task(cfg.task)
        self.cfg = cfg
        self.family = algo_family(cfg.algo)
        self.bounds = (task.action_low, task.action_high)
        self.states = StateBuffer(cfg.buffer_capacity, task.obs_dim, warmup=min(cfg.n_envs, cfg.buffer_capacity))
        self.policy = models.policy
        self.opt = AdamState.create(models.policy)
        q1, q2 = models.critics.online
        self.critics = CriticPair(q1, q2, q1, q2)
        self.log_alpha = np.array([INITIAL_LOG_ALPHA])
        self.alpha_opt = AdamState.create(self.log_alpha)
        self.target_entropy = -float(task.act_dim)
        self.normalizer = RunningNormalizer.create(task.obs_dim)
        self.head = CategoricalHead()
        self.rng = stream_rng(cfg.seed, "plearner")
        self.updates = 0
        self.states_in = 0

    @property
    def ready(self) -> bool:
        return self.states.ready

    def ingest(self, states: np.ndarray, normalizer: RunningNormalizer) -> None:
        self.states.insert(states)
        self.states_in += len(states)
        self.normalizer = normalizer

    def set_critics(self, snapshot: ModelSnapshot) -> None:
        q1, q2 = snapshot.params
        self.critics = CriticPair(q1, q2, q1, q2)

    def update(self) -> float:
        if not self.ready:
            raise NotReady("state buffer below warm-up size")
        states = normalizer_apply(self.normalizer, self.states.sample(self.cfg.batch_size, self.rng))
        if self.family == "sac":
            eps = self.rng.standard_normal((len(states), self.policy.out_dim // 2), dtype=np.float32)
            entropy = EntropyCoefficient(float(self.log_alpha[0]), self.target_entropy)
            loss, _, grads, la_grad = sac_actor_loss(states, self.policy, self.critics, entropy, eps, self.bounds)
            self.log_alpha, self.alpha_opt = adam_step(self.log_alpha, np.array([la_grad]), self.alpha_opt, self.cfg.lr_actor)
        elif self.family == "c51":
            loss, grads = c51_actor_loss(states, self.policy, self.critics, self.head, self.bounds)
        else:
            loss, grads = ddpg_actor_loss(states, self.policy, self.critics, self.bounds)
        self.policy, self.opt = adam_step(self.policy, clip_global_norm(grads, self.cfg.grad_clip), self.opt, self.cfg.lr_actor)
        self.updates += 1
        return loss

    def snapshot(self, version: int) -> ModelSnapshot:
        log_alpha = float(self.log_alpha[0]) if self.family == "sac" else None
        return ModelSnapshot("policy", version, self.policy, self.normalizer, log_alpha)


# -- evaluation and metrics ---------------------------------------------------


def evaluate(snapshot: ModelSnapshot, task: str, episodes: int, seed: int = 0, initial_states=None) -> tuple[float, float]:
    """Mean and standard error of raw episode returns, one noise-free episode per env.

    ``initial_states`` (``[episodes x phys_dim]``) replaces the random reset draw.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = make_env(task, episodes, seed)
    if initial_states is not None:
        env.set_state(initial_states)
    bounds = env.action_bounds
    stats = snapshot.normalizer or RunningNormalizer.create(env.obs_dim)
    obs = env.observations.copy()
    returns = np.zeros(episodes)
    running = np.ones(episodes, dtype=bool)
    while running.any():
        action = deterministic_action(snapshot.params, normalizer_apply(stats, obs), bounds)
        res = env.step(action)
        returns += np.where(running, res.rewards, 0.0)
        running &= ~res.dones
        obs = res.next_observations
    stderr = float(returns.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    return float(returns.mean()), stderr


class MetricsWriter:
    """Appends one CSV row per evaluation and flushes it immediately."""

    def __init__(self, path: Path | None):
        self.path = path
        self.rows: list[dict] = []
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", encoding="utf-8", newline="")
            self._fh.write(",".join(METRIC_COLUMNS) + "\n")
            self._fh.flush()

    @staticmethod
    def format(row: dict) -> str:
        def cell(name):
            v = row[name]
            if name == "wall_clock_s":
                return f"{v:.3f}"
            if isinstance(v, (int, np.integer)):
                return str(int(v))
            return "nan" if v is None or not math.isfinite(v) else f"{v:.6g}"

        return ",".join(cell(name) for name in METRIC_COLUMNS)

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._fh.write(self.format(row) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class _Ema:
    def __init__(self):
        self.value = math.nan

    def add(self, x: float) -> float:
        self.value = x if math.isnan(self.value) else LOSS_EMA_DECAY * self.value + (1 - LOSS_EMA_DECAY) * x
        return self.value


@dataclass
class RunReport:
    config: RunConfig
    mode: str
    rows: list[dict]
    counters: tuple[int, int, int]
    elapsed_s: float
    csv_path: Path | None = None
    checkpoint_path: Path | None = None
    audit: dict | None = None
    workers: dict = field(default_factory=dict)
    interrupted: bool = False

    @property
    def env_steps(self) -> int:
        return self.counters[0] * self.config.n_envs

    @property
    def final_return(self) -> float:
        return self.rows[-1]["eval_return_mean"] if self.rows else math.nan

    @property
    def best_return(self) -> float:
        values = [r["eval_return_mean"] for r in self.rows]
        return max(values) if values else math.nan

    def time_to_threshold(self, threshold: float) -> float | None:
        for r in self.rows:
            if r["eval_return_mean"] >= threshold:
                return r["wall_clock_s"]
        return None

    def summary(self) -> str:
        c_a, c_v, c_p = self.counters
        return (
            f"{self.mode} {self.config.algo} {self.config.task}: {self.elapsed_s:.1f}s "
            f"env_steps={self.env_steps} c_a={c_a} c_v={c_v} c_p={c_p} "
            f"final_return={self.final_return:.2f} best_return={self.best_return:.2f}"
        )


def _make_row(t, counters, n_envs, ret, critic_ema, actor_ema) -> dict:
    c_a, c_v, c_p = counters
    return dict(
        wall_clock_s=t,
        env_steps=c_a * n_envs,
        c_a=c_a,
        c_v=c_v,
        c_p=c_p,
        eval_return_mean=ret[0],
        eval_return_stderr=ret[1],
        critic_loss_ema=critic_ema,
        actor_loss_ema=actor_ema,
    )


def _resolve_out(cfg: RunConfig, out_dir) -> Path | None:
    out = out_dir if out_dir is not None else cfg.out_dir
    return None if out is None else Path(out)


def _save(out: Path | None, policy: MlpParams, critics, normalizer) -> Path | None:
    if out is None:
        return None
    path = out / "checkpoint.bin"
    q1, q2 = critics
    save_checkpoint(path, {"policy": policy, "q1": q1, "q2": q2}, normalizer)
    return path


# -- synchronous baseline -----------------------------------------------------


class SyncLoop:
    """One actor iteration followed by the critic and policy updates it pays for."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        models = initial_models(cfg)
        self.actor = ActorWorker(cfg, models.policy)
        self.vlearner = VLearnerWorker(cfg, models)
        self.plearner = PLearnerWorker(cfg, models)
        self.counters = [0, 0, 0]
        self._v_credit = 0
        self._p_credit = 0
        self.critic_ema = _Ema()
        self.actor_ema = _Ema()

    def iteration(self) -> tuple[list[float], list[float]]:
        cfg = self.cfg
        rollout = self.actor.rollout(cfg.horizon)
        self.counters[0] += cfg.horizon
        self.vlearner.ingest(rollout, self.actor.normalizer)
        self.plearner.ingest(rollout.states, self.actor.normalizer)
        self._v_credit += cfg.horizon / cfg.beta_av
        critic_losses, actor_losses = [], []
        while self._v_credit >= 1 and self.vlearner.ready:
            self._v_credit -= 1
            critic_losses.append(self.vlearner.update())
            self.critic_ema.add(critic_losses[-1])
            self.counters[1] += 1
            self._p_credit += cfg.beta_pv
            while self._p_credit >= 1 and self.plearner.ready:
                self._p_credit -= 1
                actor_losses.append(self.plearner.update())
                self.actor_ema.add(actor_losses[-1])
                self.counters[2] += 1
        # every iteration ends with a full exchange of the newest parameters
        self.vlearner.set_policy(self.plearner.snapshot(self.counters[2]))
        self.plearner.set_critics(self.vlearner.snapshot(self.counters[1]))
        self.actor.policy = self.plearner.policy
        return critic_losses, actor_losses


def _reached(writer, target: float | None) -> bool:
    return target is not None and bool(writer.rows) and writer.rows[-1]["eval_return_mean"] >= target


def run_synchronous(cfg: RunConfig, out_dir=None, stop_at_return: float | None = None) -> RunReport:
    """Sequential rollout and updates. With ``clock="logical"`` time is counted in vector env steps.

    ``stop_at_return`` ends the run at the first evaluation scoring at least that much.
    """
    if cfg.budget_seconds is None and cfg.budget_steps is None:
        raise ValueError("a time or step budget is required")
    out = _resolve_out(cfg, out_dir)
    writer = MetricsWriter(None if out is None else out / "metrics.csv")
    loop = SyncLoop(cfg)
    start = time.perf_counter()
    logical = cfg.clock == "logical"
    now = (lambda: float(loop.counters[0])) if logical else (lambda: time.perf_counter() - start)
    seed = eval_seed(cfg.seed)

    def record():
        snap = loop.plearner.snapshot(loop.counters[2])
        snap = ModelSnapshot("policy", snap.version, snap.params, loop.actor.normalizer)
        ret = evaluate(snap, cfg.task, cfg.eval_episodes, seed)
        writer.write(_make_row(now(), tuple(loop.counters), cfg.n_envs, ret, loop.critic_ema.value, loop.actor_ema.value))

    next_eval = cfg.eval_interval
    try:
        while True:
            if cfg.budget_steps is not None and loop.counters[0] * cfg.n_envs >= cfg.budget_steps:
                break
            if cfg.budget_seconds is not None and now() >= cfg.budget_seconds:
                break
            loop.iteration()
            if now() >= next_eval:
                record()
                if _reached(writer, stop_at_return):
                    break
                next_eval = now() + cfg.eval_interval
        if not _reached(writer, stop_at_return):
            record()
    finally:
        writer.close()
    ckpt = _save(out, loop.plearner.policy, loop.vlearner.critics.online, loop.actor.normalizer)
    return RunReport(
        cfg,
        "synchronous",
        writer.rows,
        tuple(loop.counters),
        time.perf_counter() - start,
        writer.path,
        ckpt,
        workers=dict(transitions=loop.vlearner.transitions_in, records=loop.vlearner.records_in),
    )


# -- parallel processes -------------------------------------------------------


@dataclass
class Channels:
    to_vlearner: object
    to_plearner: object
    critic_to_actor: object
    policy_to_actor: object
    policy_to_eval: object
    results: object
    losses: object  # shared doubles: critic EMA, actor EMA

    @classmethod
    def create(cls, ctx, capacity: int) -> Channels:
        return cls(
            ctx.Queue(capacity),
            ctx.Queue(capacity),
            ctx.Queue(),
            ctx.Queue(),
            ctx.Queue(),
            ctx.Queue(),
            ctx.RawArray("d", [math.nan, math.nan]),
        )


def publish(slot, snapshot: ModelSnapshot) -> None:
    """Snapshot channels are latest-wins: receivers drain and keep the newest version."""
    slot.put(snapshot)


def latest(slot, current: ModelSnapshot | None) -> ModelSnapshot | None:
    while True:
        try:
            current = newer(current, slot.get_nowait())
        except queue.Empty:
            return current


def _put(q, item, deadline_s: float = 60.0) -> None:
    """Blocking put; bounded by a long deadline so a dead consumer cannot hang us."""
    q.put(item, timeout=deadline_s)


def ratio_config(cfg: RunConfig) -> RatioConfig:
    return RatioConfig.for_horizon(cfg.horizon, cfg.beta_av, cfg.beta_pv, cfg.warm_up, cfg.free_running)


def run_actor(cfg: RunConfig, models: Models, counters: ProgressCounters, ch: Channels, stop) -> dict:
    actor = ActorWorker(cfg, models.policy)
    gate = ratio_config(cfg)
    policy = ModelSnapshot("policy", 0, models.policy)
    critics = None
    sent_policy = sent_critics = -1
    versions_used = []
    seq = 0
    while not stop.is_set():
        if not counters.wait("actor", gate, timeout=0.1, stop=stop):
            policy = latest(ch.policy_to_actor, policy)
            continue
        policy = latest(ch.policy_to_actor, policy)
        actor.policy = policy.params
        versions_used.append(policy.version)
        rollout = actor.rollout(cfg.horizon)
        counters.record("actor", cfg.horizon)
        critics = latest(ch.critic_to_actor, critics)
        fwd_policy = policy if policy.version > sent_policy else None
        fwd_critics = critics if critics is not None and critics.version > sent_critics else None
        _put(ch.to_vlearner, DataMessage(seq, rollout, actor.normalizer, fwd_policy))
        _put(ch.to_plearner, StateMessage(seq, rollout.states, actor.normalizer, fwd_critics))
        sent_policy = policy.version
        sent_critics = sent_critics if critics is None else critics.version
        seq += 1
    _put(ch.to_vlearner, EndOfStream(seq))
    _put(ch.to_plearner, EndOfStream(seq))
    monotone = all(a <= b for a, b in zip(versions_used, versions_used[1:]))
    return dict(batches=seq, transitions=seq * cfg.horizon * cfg.n_envs, versions_monotone=monotone,
                policy_versions=len(set(versions_used)), normalizer=actor.normalizer)


def _learner_loop(name, worker, inbox, on_message, counters, gate, stop, on_update):
    """Shared learner body: drain messages, update when gated in, finish on the end marker."""
    seqs, end = [], None
    busy = 0.0

    def take(msg):
        nonlocal end
        if isinstance(msg, EndOfStream):
            end = msg
        else:
            seqs.append(msg.seq)
            on_message(msg)

    def drain(timeout=None):
        try:
            take(inbox.get(timeout=timeout) if timeout else inbox.get_nowait())
            while end is None:
                take(inbox.get_nowait())
        except queue.Empty:
            pass

    while end is None:
        drain()
        if end is not None:
            break
        if stop.is_set():
            drain(timeout=1.0)
            continue
        if not worker.ready:
            drain(timeout=0.05)
            continue
        if not may_proceed(name, counters.read(), gate):
            counters.wait(name, gate, timeout=0.05, stop=stop)
            continue
        t0 = time.perf_counter()
        loss = worker.update()
        busy += time.perf_counter() - t0
        on_update(loss)
        counters.record(name)
    return seqs, end, busy


def run_vlearner(cfg: RunConfig, models: Models, counters: ProgressCounters, ch: Channels, stop) -> dict:
    v = VLearnerWorker(cfg, models)
    ema = _Ema()

    def on_message(msg: DataMessage):
        v.ingest(msg.rollout, msg.normalizer)
        if msg.policy is not None:
            v.set_policy(msg.policy)

    def on_update(loss):
        ch.losses[0] = ema.add(loss)
        if v.updates % cfg.publish_interval == 0:
            publish(ch.critic_to_actor, v.snapshot(v.updates // cfg.publish_interval))

    seqs, end, busy = _learner_loop("vlearner", v, ch.to_vlearner, on_message, counters, ratio_config(cfg), stop, on_update)
    audit = dict(
        expected=end.batches,
        consumed=len(seqs),
        unique=len(set(seqs)),
        in_order=seqs == list(range(len(seqs))),
        complete=sorted(seqs) == list(range(end.batches)),
        transitions=v.transitions_in,
        records=v.records_in,
        pending=v.assembler.open_windows,
    )
    return dict(updates=v.updates, busy_s=busy, audit=audit, critics=v.critics.online)


def run_plearner(cfg: RunConfig, models: Models, counters: ProgressCounters, ch: Channels, stop) -> dict:
    p = PLearnerWorker(cfg, models)
    ema = _Ema()

    def on_message(msg: StateMessage):
        p.ingest(msg.states, msg.normalizer)
        if msg.critics is not None:
            p.set_critics(msg.critics)

    def on_update(loss):
        ch.losses[1] = ema.add(loss)
        if p.updates % cfg.publish_interval == 0:
            snap = p.snapshot(p.updates // cfg.publish_interval)
            publish(ch.policy_to_actor, snap)
            publish(ch.policy_to_eval, snap)

    seqs, end, busy = _learner_loop("plearner", p, ch.to_plearner, on_message, counters, ratio_config(cfg), stop, on_update)
    return dict(updates=p.updates, busy_s=busy, consumed=len(seqs), expected=end.batches, policy=p.policy, log_alpha=float(p.log_alpha[0]))


_WORKERS = {"actor": run_actor, "vlearner": run_vlearner, "plearner": run_plearner}


def _worker_main(name, cfg, models, counters, ch, stop):
    signal.signal(signal.SIGINT, signal.SIG_IGN)  # the parent owns shutdown
    # snapshot slots are lossy by design; never block exit on unread snapshots
    for slot in (ch.critic_to_actor, ch.policy_to_actor, ch.policy_to_eval):
        slot.cancel_join_thread()
    try:
        ch.results.put(("done", name, _WORKERS[name](cfg, models, counters, ch, stop)))
    except BaseException:
        ch.results.put(("error", name, traceback.format_exc()))
        stop.set()
    finally:
        counters.notify()


class WorkerError(RuntimeError):
    pass


def run_parallel(cfg: RunConfig, out_dir=None, stop_event=None, stop_at_return: float | None = None) -> RunReport:
    """Actor, V-learner and P-learner as separate processes; the caller evaluates and writes metrics.

    ``stop_event`` (a ``threading.Event``-like object) requests an early, clean shutdown.
    ``stop_at_return`` ends the run at the first evaluation scoring at least that much.
    """
    if cfg.budget_seconds is None and cfg.budget_steps is None:
        raise ValueError("a time or step budget is required")
    if cfg.clock != "wall":
        raise ValueError("parallel runs only support the wall clock")
    out = _resolve_out(cfg, out_dir)
    writer = MetricsWriter(None if out is None else out / "metrics.csv")
    ctx = mp.get_context("spawn")
    counters = ProgressCounters(ctx)
    stop = ctx.Event()
    ch = Channels.create(ctx, cfg.channel_capacity)
    models = initial_models(cfg)
    procs = {
        name: ctx.Process(target=_worker_main, args=(name, cfg, models, counters, ch, stop), name=f"pql-{name}", daemon=True)
        for name in _WORKERS
    }
    seed = eval_seed(cfg.seed)
    results, errors = {}, {}
    policy = ModelSnapshot("policy", 0, models.policy)
    interrupted = False

    def collect(timeout=0.0):
        try:
            kind, name, payload = ch.results.get(timeout=timeout) if timeout else ch.results.get_nowait()
        except queue.Empty:
            return False
        (errors if kind == "error" else results)[name] = payload
        return True

    for p in procs.values():
        p.start()
    start = time.perf_counter()
    now = lambda: time.perf_counter() - start

    def record():
        nonlocal policy
        policy = latest(ch.policy_to_eval, policy)
        t = now()
        ret = evaluate(policy, cfg.task, cfg.eval_episodes, seed)
        writer.write(_make_row(t, counters.read(), cfg.n_envs, ret, ch.losses[0], ch.losses[1]))

    try:
        next_eval = cfg.eval_interval
        while not stop.is_set():
            collect()
            if errors or not all(p.is_alive() for p in procs.values()):
                break
            if stop_event is not None and stop_event.is_set():
                interrupted = True
                break
            if cfg.budget_seconds is not None and now() >= cfg.budget_seconds:
                break
            if cfg.budget_steps is not None and counters.c_a * cfg.n_envs >= cfg.budget_steps:
                break
            if now() >= next_eval:
                record()
                if _reached(writer, stop_at_return):
                    break
                next_eval = now() + cfg.eval_interval
            else:
                time.sleep(min(0.05, max(0.0, next_eval - now())))
    except KeyboardInterrupt:
        interrupted = True
    finally:
        stop.set()
        counters.notify()
        deadline = time.monotonic() + 5.0
        while len(results) + len(errors) < len(procs) and time.monotonic() < deadline:
            if not collect(timeout=0.05) and not any(p.is_alive() for p in procs.values()):
                collect(timeout=0.5)
                break
        for p in procs.values():
            p.join(max(0.0, deadline - time.monotonic()))
            if p.is_alive():
                p.terminate()
                p.join(1.0)
        elapsed = now()

    if errors:
        writer.close()
        name, tb = next(iter(errors.items()))
        raise WorkerError(f"{name} process failed:\n{tb}")
    missing = [n for n in procs if n not in results]
    if missing:
        writer.close()
        codes = {n: procs[n].exitcode for n in missing}
        raise WorkerError(f"processes exited without reporting: {codes}")

    final_policy = results["plearner"]["policy"]
    normalizer = results["actor"]["normalizer"]
    policy = ModelSnapshot("policy", policy.version + 1, final_policy, normalizer)
    ret = evaluate(policy, cfg.task, cfg.eval_episodes, seed)
    writer.write(_make_row(max(elapsed, now()), counters.read(), cfg.n_envs, ret, ch.losses[0], ch.losses[1]))
    writer.close()
    ckpt = _save(out, final_policy, results["vlearner"]["critics"], normalizer)
    return RunReport(
        cfg,
        "parallel",
        writer.rows,
        counters.read(),
        elapsed,
        writer.path,
        ckpt,
        audit=results["vlearner"]["audit"],
        workers={
            "actor": {k: v for k, v in results["actor"].items() if k != "normalizer"},
            "vlearner": {k: results["vlearner"][k] for k in ("updates", "busy_s")},
            "plearner": {k: v for k, v in results["plearner"].items() if k != "policy"},
        },
        interrupted=interrupted,
    )


def run(cfg: RunConfig, out_dir=None, stop_at_return: float | None = None) -> RunReport:
    if cfg.parallel:
        return run_parallel(cfg, out_dir, stop_at_return=stop_at_return)
    return run_synchronous(cfg, out_dir, stop_at_return=stop_at_return)
