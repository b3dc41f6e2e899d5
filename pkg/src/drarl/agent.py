"""Soft actor-critic driving policy and the retraining regimes.

The actor maps the 40-dim scene observation to a squashed Gaussian over
planar acceleration; twin critics score observation-action pairs.  All
gradients are derived by hand on top of the plain MLP primitives so they can
be checked against finite differences.  Retraining consumes imagination
environments built from recorded disengagement cases under one of four
regimes: pure replay, the identified reason window, a random object and
window start drawn per episode, or the identified object with its window
collapsed to the takeover frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import DisengagementCase, ReasonElement, ReasonSet, ReplayBuffer
from .features import OBS_DIM, FeatureScales, featurize
from .imagine import ImagineConfig, ImaginationEnv, build_env, build_replay_env, step_reward
from .nets import Adam, init_mlp, mlp_backward, mlp_forward
from .scenarios import ScenarioSpec, build_world
from .sim import STUCK_FRAMES, STUCK_SPEED

ACT_DIM = 2
ACTION_LIMIT = 4.0
LOGSTD_MIN = -5.0
LOGSTD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)
SQUASH_EPS = 1e-6

POLICY_VERSION = "sac-policy-v1"

REGIMES = ("replay", "drarl", "random", "fixed")


class AgentError(Exception):
    pass


@dataclass
class SacConfig:
    hidden: int = 64
    gamma: float = 0.99
    polyak: float = 0.995
    alpha: float = 0.02
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    batch_size: int = 64
    start_steps: int = 400
    update_after: int = 400
    update_every: int = 1
    memory_cap: int = 200_000
    episodes_per_case: int = 400
    validate_every: int = 150
    validate_worlds: int = 24

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise AgentError("gamma must lie in (0, 1]")
        if not 0.0 < self.polyak < 1.0:
            raise AgentError("polyak must lie in (0, 1)")
        if self.alpha < 0.0:
            raise AgentError("alpha must be nonnegative")


@dataclass
class Policy:
    actor: list
    critics: tuple
    targets: tuple
    obs_dim: int = OBS_DIM
    version: str = POLICY_VERSION

    def save(self, path):
        doc = {
            "version": self.version,
            "obs_dim": self.obs_dim,
            "actor": [[w.tolist(), b.tolist()] for w, b in self.actor],
            "critics": [
                [[w.tolist(), b.tolist()] for w, b in c] for c in self.critics
            ],
            "targets": [
                [[w.tolist(), b.tolist()] for w, b in c] for c in self.targets
            ],
        }
        if hasattr(path, "write"):
            json.dump(doc, path)
        else:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(doc, fh)

    @classmethod
    def load(cls, path):
        if hasattr(path, "read"):
            doc = json.load(path)
        else:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        if doc.get("version") != POLICY_VERSION:
            raise AgentError(f"unsupported policy version {doc.get('version')!r}")

        def params(raw):
            return [(np.asarray(w, dtype=float), np.asarray(b, dtype=float))
                    for w, b in raw]

        return cls(
            actor=params(doc["actor"]),
            critics=tuple(params(c) for c in doc["critics"]),
            targets=tuple(params(c) for c in doc["targets"]),
            obs_dim=int(doc["obs_dim"]),
        )


def _clone(params):
    return [(w.copy(), b.copy()) for w, b in params]


def clone_policy(policy: Policy) -> Policy:
    return Policy(_clone(policy.actor),
                  tuple(_clone(c) for c in policy.critics),
                  tuple(_clone(c) for c in policy.targets),
                  obs_dim=policy.obs_dim)


def init_policy(rng, obs_dim: int = OBS_DIM, hidden: int = 64) -> Policy:
    actor = init_mlp([obs_dim, hidden, hidden, 2 * ACT_DIM], rng)
    c1 = init_mlp([obs_dim + ACT_DIM, hidden, hidden, 1], rng)
    c2 = init_mlp([obs_dim + ACT_DIM, hidden, hidden, 1], rng)
    return Policy(actor, (c1, c2), (_clone(c1), _clone(c2)), obs_dim=obs_dim)


def actor_head(actor, obs):
    """Mean, clipped log-std, forward cache and the clip mask for a batch."""
    out, cache = mlp_forward(actor, obs)
    mu = out[:, :ACT_DIM]
    raw = out[:, ACT_DIM:]
    logstd = np.clip(raw, LOGSTD_MIN, LOGSTD_MAX)
    mask = (raw > LOGSTD_MIN) & (raw < LOGSTD_MAX)
    return mu, logstd, cache, mask


def act(policy: Policy, obs, rng=None, deterministic: bool = True):
    """Action in [-ACTION_LIMIT, ACTION_LIMIT]^2 for a single observation."""
    obs = np.asarray(obs, dtype=float).reshape(1, -1)
    mu, logstd, _, _ = actor_head(policy.actor, obs)
    if deterministic:
        u = mu
    else:
        if rng is None:
            raise AgentError("stochastic action needs a generator")
        u = mu + np.exp(logstd) * rng.standard_normal(mu.shape)
    return ACTION_LIMIT * np.tanh(u[0])


def _squash_logprob(eps, logstd, u):
    """Log-density of the squashed action and the pieces its gradient needs."""
    t = np.tanh(u)
    jac = ACTION_LIMIT * (1.0 - t * t) + SQUASH_EPS
    logp = np.sum(-0.5 * eps * eps - logstd - 0.5 * LOG_2PI, axis=1)
    logp = logp - np.sum(np.log(jac), axis=1)
    # d logp / du for the squash correction term
    dlogp_du = 2.0 * ACTION_LIMIT * t * (1.0 - t * t) / jac
    return t, jac, logp, dlogp_du


def critic_loss_and_grads(policy: Policy, batch, cfg: SacConfig, rng):
    """Bellman residual loss for both critics with parameter gradients.

    Targets use the target networks and a fresh squashed-Gaussian sample at
    the next observation; terminal transitions bootstrap nothing, so their
    target is exactly the reward.
    """
    obs, acts, rews, dones, next_obs = batch
    B = obs.shape[0]

    mu2, logstd2, _, _ = actor_head(policy.actor, next_obs)
    eps2 = rng.standard_normal(mu2.shape)
    u2 = mu2 + np.exp(logstd2) * eps2
    _, _, logp2, _ = _squash_logprob(eps2, logstd2, u2)
    a2 = ACTION_LIMIT * np.tanh(u2)

    xin2 = np.concatenate([next_obs, a2], axis=1)
    q1t, _ = mlp_forward(policy.targets[0], xin2)
    q2t, _ = mlp_forward(policy.targets[1], xin2)
    qmin = np.minimum(q1t[:, 0], q2t[:, 0])
    y = rews + cfg.gamma * (1.0 - dones) * (qmin - cfg.alpha * logp2)

    xin = np.concatenate([obs, acts], axis=1)
    q1, cache1 = mlp_forward(policy.critics[0], xin)
    q2, cache2 = mlp_forward(policy.critics[1], xin)
    r1 = q1[:, 0] - y
    r2 = q2[:, 0] - y
    loss = float(np.mean(r1 * r1) + np.mean(r2 * r2))
    g1, _ = mlp_backward(policy.critics[0], cache1, (2.0 * r1 / B)[:, None])
    g2, _ = mlp_backward(policy.critics[1], cache2, (2.0 * r2 / B)[:, None])
    return loss, g1, g2, y


def actor_loss_and_grads(policy: Policy, obs, eps, cfg: SacConfig):
    """Expected alpha*logpi - min-Q loss under frozen exploration noise.

    Freezing eps makes the loss a deterministic function of the actor
    parameters, which is what a finite-difference check needs.
    """
    B = obs.shape[0]
    mu, logstd, cache, mask = actor_head(policy.actor, obs)
    std = np.exp(logstd)
    u = mu + std * eps
    t, jac, logp, dlogp_du = _squash_logprob(eps, logstd, u)
    a = ACTION_LIMIT * np.tanh(u)

    xin = np.concatenate([obs, a], axis=1)
    q1, cache1 = mlp_forward(policy.critics[0], xin)
    q2, cache2 = mlp_forward(policy.critics[1], xin)
    pick1 = q1[:, 0] <= q2[:, 0]
    qmin = np.where(pick1, q1[:, 0], q2[:, 0])
    loss = float(np.mean(cfg.alpha * logp - qmin))

    gq = -1.0 / B
    _, gx1 = mlp_backward(policy.critics[0], cache1,
                          (gq * pick1.astype(float))[:, None])
    _, gx2 = mlp_backward(policy.critics[1], cache2,
                          (gq * (~pick1).astype(float))[:, None])
    dL_da = (gx1 + gx2)[:, policy.obs_dim:]

    da_du = ACTION_LIMIT * (1.0 - t * t)
    dL_du = dL_da * da_du + (cfg.alpha / B) * dlogp_du
    dL_dmu = dL_du
    dL_dlogstd = dL_du * (std * eps) - cfg.alpha / B
    dL_dlogstd = dL_dlogstd * mask
    grad_out = np.concatenate([dL_dmu, dL_dlogstd], axis=1)
    grads, _ = mlp_backward(policy.actor, cache, grad_out)
    return loss, grads


def polyak_update(targets, sources, polyak: float):
    for (tw, tb), (sw, sb) in zip(targets, sources):
        tw *= polyak
        tw += (1.0 - polyak) * sw
        tb *= polyak
        tb += (1.0 - polyak) * sb


class ReplayMemory:
    """Flat transition ring buffer."""

    def __init__(self, cap: int, obs_dim: int):
        self.cap = cap
        self.obs = np.zeros((cap, obs_dim))
        self.act = np.zeros((cap, ACT_DIM))
        self.rew = np.zeros(cap)
        self.done = np.zeros(cap)
        self.next_obs = np.zeros((cap, obs_dim))
        self.size = 0
        self._head = 0

    def push(self, obs, act_, rew, done, next_obs):
        i = self._head
        self.obs[i] = obs
        self.act[i] = act_
        self.rew[i] = rew
        self.done[i] = done
        self.next_obs[i] = next_obs
        self._head = (i + 1) % self.cap
        self.size = min(self.size + 1, self.cap)

    def sample(self, batch: int, rng):
        idx = rng.integers(0, self.size, batch)
        return (self.obs[idx], self.act[idx], self.rew[idx], self.done[idx],
                self.next_obs[idx])


class SacLearner:
    """Owns the optimizers and the update step."""

    def __init__(self, policy: Policy, cfg: SacConfig):
        self.policy = policy
        self.cfg = cfg
        self.opt_actor = Adam(policy.actor, cfg.actor_lr)
        self.opt_c1 = Adam(policy.critics[0], cfg.critic_lr)
        self.opt_c2 = Adam(policy.critics[1], cfg.critic_lr)

    def update(self, batch, rng):
        cfg = self.cfg
        closs, g1, g2, _ = critic_loss_and_grads(self.policy, batch, cfg, rng)
        self.opt_c1.step(self.policy.critics[0], g1)
        self.opt_c2.step(self.policy.critics[1], g2)
        obs = batch[0]
        eps = rng.standard_normal((obs.shape[0], ACT_DIM))
        aloss, ga = actor_loss_and_grads(self.policy, obs, eps, cfg)
        self.opt_actor.step(self.policy.actor, ga)
        polyak_update(self.policy.targets[0], self.policy.critics[0], cfg.polyak)
        polyak_update(self.policy.targets[1], self.policy.critics[1], cfg.polyak)
        return closs, aloss


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainReport:
    episodes: int = 0
    steps: int = 0
    skipped_cases: int = 0
    outcomes: dict = field(default_factory=dict)
    returns: list = field(default_factory=list)

    def outcome_rate(self, name: str) -> float:
        total = sum(self.outcomes.values())
        return self.outcomes.get(name, 0) / total if total else 0.0


def _note_outcome(report: TrainReport, outcome: str):
    report.outcomes[outcome] = report.outcomes.get(outcome, 0) + 1


def _train_episode(env: ImaginationEnv, learner: SacLearner, memory: ReplayMemory,
                   rng, report: TrainReport, steps_done: int) -> int:
    cfg = learner.cfg
    obs = env.reset()
    ep_ret = 0.0
    done = False
    info: dict = {}
    while not done:
        if steps_done < cfg.start_steps:
            action = rng.uniform(-ACTION_LIMIT, ACTION_LIMIT, ACT_DIM)
        else:
            action = act(learner.policy, obs, rng, deterministic=False)
        next_obs, reward, done, info = env.step(action)
        terminal = 1.0 if (done and info["outcome"] != "timeout") else 0.0
        memory.push(obs, action, reward, terminal, next_obs)
        obs = next_obs
        ep_ret += reward
        steps_done += 1
        if steps_done >= cfg.update_after and steps_done % cfg.update_every == 0:
            if memory.size >= cfg.batch_size:
                learner.update(memory.sample(cfg.batch_size, rng), rng)
    report.episodes += 1
    report.steps = steps_done
    report.returns.append(ep_ret)
    _note_outcome(report, info["outcome"])
    return steps_done


def _random_reason(case: DisengagementCase, rng) -> ReasonSet:
    uid = int(rng.choice(case.object_uids()))
    d = case.disengagement_t
    b = int(rng.integers(0, d))
    return ReasonSet((ReasonElement(uid, b, d),))


def _fixed_reason(reason: ReasonSet, d: int) -> ReasonSet:
    return ReasonSet(tuple(ReasonElement(el.uid, d, d) for el in reason.elements))


def train_on_cases(
    policy: Policy,
    cases: list[DisengagementCase],
    reasons: list[ReasonSet],
    regime: str,
    cfg: SacConfig | None = None,
    imagine_cfg: ImagineConfig | None = None,
    seed: int = 0,
    episodes_per_case: int | None = None,
) -> tuple[Policy, TrainReport]:
    """Retrain a copy of the policy on imagination environments.

    regime selects how recorded objects are scheduled: "replay" re-emits the
    recording, "drarl" uses the supplied reason windows, "random" draws an
    object and a window start per episode, and "fixed" keeps the identified
    objects but collapses their windows to the takeover frame.
    """
    if regime not in REGIMES:
        raise AgentError(f"unknown regime {regime!r}")
    if len(reasons) != len(cases):
        raise AgentError("need one reason set per case")
    cfg = cfg or SacConfig()
    imagine_cfg = imagine_cfg or ImagineConfig()
    per_case = cfg.episodes_per_case if episodes_per_case is None else episodes_per_case

    trained = clone_policy(policy)
    learner = SacLearner(trained, cfg)
    memory = ReplayMemory(cfg.memory_cap, policy.obs_dim)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    report = TrainReport()

    envs: list[ImaginationEnv | None] = []
    usable: list[int] = []
    for i, case in enumerate(cases):
        mode_rng = np.random.default_rng(np.random.SeedSequence([seed, 13, i]))
        if regime == "replay":
            envs.append(build_replay_env(case, mode_rng, imagine_cfg))
        elif regime == "drarl":
            if reasons[i].empty:
                envs.append(None)
                report.skipped_cases += 1
                continue
            envs.append(build_env(case, reasons[i], mode_rng, imagine_cfg))
        elif regime == "fixed":
            if reasons[i].empty:
                envs.append(None)
                report.skipped_cases += 1
                continue
            fixed = _fixed_reason(reasons[i], case.disengagement_t)
            envs.append(build_env(case, fixed, mode_rng, imagine_cfg))
        else:  # random: env rebuilt per episode
            envs.append(None)
        usable.append(i)

    if not usable:
        return trained, report

    steps = 0
    rand_rngs = {
        i: np.random.default_rng(np.random.SeedSequence([seed, 17, i]))
        for i in usable
    }
    for _round in range(per_case):
        for i in usable:
            if regime == "random":
                r = rand_rngs[i]
                reason = _random_reason(cases[i], r)
                mode_rng = np.random.default_rng(
                    np.random.SeedSequence([seed, 13, i, int(r.integers(1 << 30))])
                )
                env = build_env(cases[i], reason, mode_rng, imagine_cfg)
            else:
                env = envs[i]
            steps = _train_episode(env, learner, memory, rng, report, steps)
    return trained, report


# ---------------------------------------------------------------------------
# pretraining on nominal worlds


def run_world_episode(policy: Policy | None, built, rng=None,
                      scales: FeatureScales | None = None,
                      learner: SacLearner | None = None,
                      memory: ReplayMemory | None = None,
                      steps_done: int = 0,
                      stochastic: bool = False,
                      reward_cfg=None) -> tuple[str, int, float]:
    """Drive a scenario world with a policy until a terminal outcome.

    Returns the outcome, the updated global step count and the episode
    return.  With a learner and memory attached this is a training episode;
    without them it is a plain evaluation rollout.
    """
    scales = scales or FeatureScales()
    world = built.world
    smap = world.smap
    goal_x = built.route_len - 0.5
    speeds = [world.ego.speed]
    obs = featurize(world.frame(), smap, scales)
    outcome = "timeout"
    reward_cfg = reward_cfg or ImagineConfig().reward
    ep_return = 0.0
    for _ in range(built.horizon):
        if policy is None:
            action = np.zeros(ACT_DIM)
        elif stochastic and learner is not None and steps_done < learner.cfg.start_steps:
            action = rng.uniform(-ACTION_LIMIT, ACTION_LIMIT, ACT_DIM)
        elif stochastic:
            action = act(policy, obs, rng, deterministic=False)
        else:
            action = act(policy, obs, deterministic=True)
        prev_progress = smap.progress_of(world.ego.x, world.ego.y)
        frame = world.step(action)
        next_obs = featurize(frame, smap, scales)
        speeds.append(world.ego.speed)
        collided = world.collided()
        progress = smap.progress_of(world.ego.x, world.ego.y)
        reward = step_reward(reward_cfg, smap, world.ego,
                             progress - prev_progress, collided)
        ep_return += reward
        if collided:
            outcome = "collision"
        elif world.ego.x >= goal_x:
            outcome = "passed"
        elif detect_stuck_tail(speeds):
            outcome = "stuck"
        done = outcome != "timeout"
        if memory is not None:
            terminal = 1.0 if done else 0.0
            memory.push(obs, action, reward, terminal, next_obs)
            steps_done += 1
            if learner is not None and steps_done >= learner.cfg.update_after:
                if memory.size >= learner.cfg.batch_size:
                    learner.update(memory.sample(learner.cfg.batch_size, rng), rng)
        obs = next_obs
        if done:
            break
    return outcome, steps_done, ep_return


def detect_stuck_tail(speeds) -> bool:
    if len(speeds) < STUCK_FRAMES:
        return False
    tail = speeds[-STUCK_FRAMES:]
    return all(s < STUCK_SPEED for s in tail)


def pretrain_original(
    episodes: int = 4000,
    seed: int = 0,
    cfg: SacConfig | None = None,
) -> tuple[Policy, ReplayBuffer, TrainReport]:
    """Train the original policy on nominal worlds from scratch.

    Every episode's frames are kept; the returned buffer is the training set
    for the trajectory predictor.  The returned policy is the checkpoint that
    scored best on a fixed held-out validation set, not necessarily the last
    one, so late training drift cannot erase an earlier good policy.
    """
    cfg = cfg or SacConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    policy = init_policy(rng)
    learner = SacLearner(policy, cfg)
    memory = ReplayMemory(cfg.memory_cap, policy.obs_dim)
    report = TrainReport()
    episodes_frames = []
    steps = 0
    best = clone_policy(policy)
    best_score = (-1, -np.inf)
    for ep in range(episodes):
        built = build_world(ScenarioSpec("nominal", seed * 100_003 + ep))
        outcome, steps, ep_ret = run_world_episode(
            policy, built, rng, learner=learner, memory=memory,
            steps_done=steps, stochastic=True,
        )
        report.episodes += 1
        report.steps = steps
        report.returns.append(ep_ret)
        _note_outcome(report, outcome)
        episodes_frames.append(tuple(built.world.frames))
        if (ep + 1) % cfg.validate_every == 0 or ep == episodes - 1:
            score = _validation_score(policy, seed, cfg.validate_worlds)
            if score > best_score:
                best_score = score
                best = clone_policy(policy)
    return best, ReplayBuffer(tuple(episodes_frames)), report


def _validation_score(policy: Policy, seed: int, n_worlds: int):
    """Deterministic pass count and mean return on held-out nominal worlds."""
    passes = 0
    rets = []
    for i in range(n_worlds):
        built = build_world(ScenarioSpec("nominal", 900_000_001 + seed * 10_007 + i))
        outcome, _, ret = run_world_episode(policy, built)
        passes += outcome == "passed"
        rets.append(ret)
    return passes, float(np.mean(rets))
