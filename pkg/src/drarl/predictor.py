"""Sampleable future-state predictor for surrounding objects.

A discrete-latent mixture density model: a gate network maps a short history
window to mode probabilities, a second head gives each mode a bivariate
Gaussian over per-frame actions (vehicles: acceleration and yaw rate;
pedestrians: ax and ay).  The likelihood marginalizes the latent mode in
closed form, so training is plain SGD on the exact negative log likelihood.
Futures are sampled by drawing a mode, then per-frame actions, then pushing
them through the kind-appropriate kinematic integrator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import DT, SPEED_CAP, Frame, KinematicState, ReplayBuffer, VALID_KINDS, wrap_angle
from .nets import Adam, Params, init_mlp, mlp_backward, mlp_forward

HISTORY_FRAMES = 4     # frames of history before the window end
HORIZON_FRAMES = 2     # prediction horizon sampled per check
N_MODES = 8
HIDDEN = 64

LOGSTD_MIN = -4.0
LOGSTD_MAX = 2.0

POS_SCALE = 20.0
VEL_SCALE = 10.0

_KIND_INDEX = {k: i for i, k in enumerate(VALID_KINDS)}

# history velocities + history offsets + ego rel + neighbor rel/presence
# + kind one-hot + padding flag
FEATURE_DIM = 2 * (HISTORY_FRAMES + 1) + 2 * HISTORY_FRAMES + 4 + 5 + len(VALID_KINDS) + 1


class PredictorError(Exception):
    pass


class PredictorTrainingError(PredictorError):
    """Training diverged; carries the epoch and loss that blew up."""


@dataclass(frozen=True)
class HistoryWindow:
    """Conditioning context for one object at one frame.

    states holds the object's last HISTORY_FRAMES+1 states ending at the
    window frame; short histories are front-padded with the earliest state
    and flagged.
    """

    states: tuple[KinematicState, ...]
    ego_rel: tuple[float, float, float, float]        # dx, dvx, dy, dvy
    neighbor_rel: tuple[float, float, float, float]   # zeros when absent
    neighbor_present: bool
    kind: str
    padded: bool

    @property
    def current(self) -> KinematicState:
        return self.states[-1]

    def features(self) -> np.ndarray:
        cur = self.current
        vals: list[float] = []
        for st in self.states:
            vals.extend((st.vx / VEL_SCALE, st.vy / VEL_SCALE))
        for st in self.states[:-1]:
            vals.extend(((st.x - cur.x) / POS_SCALE, (st.y - cur.y) / POS_SCALE))
        dx, dvx, dy, dvy = self.ego_rel
        vals.extend((dx / POS_SCALE, dvx / VEL_SCALE, dy / POS_SCALE, dvy / VEL_SCALE))
        nx, nvx, ny, nvy = self.neighbor_rel
        vals.extend(
            (nx / POS_SCALE, nvx / VEL_SCALE, ny / POS_SCALE, nvy / VEL_SCALE,
             1.0 if self.neighbor_present else 0.0)
        )
        onehot = [0.0] * len(VALID_KINDS)
        onehot[_KIND_INDEX[self.kind]] = 1.0
        vals.extend(onehot)
        vals.append(1.0 if self.padded else 0.0)
        out = np.array(vals, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise PredictorError("window contains non-finite values")
        return out


def build_window(frames: list[Frame] | tuple[Frame, ...], uid: int, t: int) -> HistoryWindow | None:
    """Window for object uid ending at frame index t, or None when the object
    is absent at t.  Missing history is front-padded with the earliest state."""
    t0 = frames[0].t
    idx = t - t0
    if idx < 0 or idx >= len(frames):
        return None
    rec = frames[idx].get(uid)
    if rec is None:
        return None
    states: list[KinematicState] = []
    padded = False
    for k in range(HISTORY_FRAMES, -1, -1):
        j = idx - k
        past = frames[j].get(uid) if j >= 0 else None
        if past is None:
            padded = True
            states.append(None)  # placeholder, filled below
        else:
            states.append(past.state)
    earliest = next(s for s in states if s is not None)
    states = [earliest if s is None else s for s in states]
    ego = frames[idx].ego
    cur = states[-1]
    ego_rel = (ego.x - cur.x, ego.vx - cur.vx, ego.y - cur.y, ego.vy - cur.vy)
    best = None
    for other in frames[idx].objects:
        if other.uid == uid:
            continue
        d = math.hypot(other.state.x - cur.x, other.state.y - cur.y)
        key = (d, other.uid)
        if best is None or key < best[0]:
            best = (key, other)
    if best is None:
        neighbor_rel = (0.0, 0.0, 0.0, 0.0)
        present = False
    else:
        st = best[1].state
        neighbor_rel = (st.x - cur.x, st.vx - cur.vx, st.y - cur.y, st.vy - cur.vy)
        present = True
    return HistoryWindow(tuple(states), ego_rel, neighbor_rel, present, rec.kind, padded)


def inverse_action(kind: str, q0: KinematicState, q1: KinematicState) -> tuple[float, float]:
    """Recover the one-frame action from consecutive states by finite
    differences; exact for trajectories produced by the forward integrators."""
    if kind == "pedestrian":
        return ((q1.vx - q0.vx) / DT, (q1.vy - q0.vy) / DT)
    accel = (q1.speed - q0.speed) / DT
    yaw_rate = wrap_angle(q1.heading - q0.heading) / DT
    return (accel, yaw_rate)


def integrate_action(kind: str, q: KinematicState, action: tuple[float, float]) -> KinematicState:
    """One forward frame under the kind-appropriate kinematics."""
    if kind == "pedestrian":
        vx = q.vx + action[0] * DT
        vy = q.vy + action[1] * DT
        x = q.x + 0.5 * (q.vx + vx) * DT
        y = q.y + 0.5 * (q.vy + vy) * DT
        return KinematicState(x, vx, y, vy, q.heading).with_heading_from_velocity()
    speed = max(q.speed + action[0] * DT, 0.0)
    heading = wrap_angle(q.heading + action[1] * DT)
    vx, vy = speed * math.cos(heading), speed * math.sin(heading)
    x = q.x + 0.5 * (q.vx + vx) * DT
    y = q.y + 0.5 * (q.vy + vy) * DT
    return KinematicState(x, vx, y, vy, heading)


@dataclass
class PredictorDataset:
    """Flattened (window, action-sequence) pairs ready for training."""

    features: np.ndarray   # (N, FEATURE_DIM)
    actions: np.ndarray    # (N, horizon, 2)
    kinds: np.ndarray      # (N,) kind indices, kept for diagnostics

    def __len__(self) -> int:
        return self.features.shape[0]


def extract_windows(buffer: ReplayBuffer, horizon: int = HORIZON_FRAMES) -> PredictorDataset:
    """Slide full (unpadded) windows over every episode and object.

    An episode of length L contributes max(0, L - HISTORY_FRAMES - horizon)
    samples per fully-present object.
    """
    feats: list[np.ndarray] = []
    acts: list[np.ndarray] = []
    kinds: list[int] = []
    for episode in buffer.episodes:
        frames = list(episode)
        if len(frames) < HISTORY_FRAMES + horizon + 1:
            continue
        t0 = frames[0].t
        uids = sorted({rec.uid for fr in frames for rec in fr.objects})
        for uid in uids:
            present = [fr.get(uid) is not None for fr in frames]
            for idx in range(HISTORY_FRAMES, len(frames) - horizon):
                if not all(present[idx - HISTORY_FRAMES : idx + horizon + 1]):
                    continue
                window = build_window(frames, uid, t0 + idx)
                assert window is not None and not window.padded
                seq = []
                for k in range(horizon):
                    qa = frames[idx + k].get(uid).state
                    qb = frames[idx + k + 1].get(uid).state
                    seq.append(inverse_action(window.kind, qa, qb))
                feats.append(window.features())
                acts.append(np.array(seq, dtype=np.float64))
                kinds.append(_KIND_INDEX[window.kind])
    if not feats:
        return PredictorDataset(
            np.zeros((0, FEATURE_DIM)), np.zeros((0, horizon, 2)), np.zeros(0, dtype=int)
        )
    return PredictorDataset(np.stack(feats), np.stack(acts), np.array(kinds, dtype=int))


@dataclass
class PredictorConfig:
    n_modes: int = N_MODES
    hidden: int = HIDDEN
    epochs: int = 16
    lr: float = 3e-3
    lr_decay_every: int = 6
    batch_size: int = 64
    seed: int = 0


@dataclass
class PredictorModel:
    """Gate + per-mode action heads with their normalization constants."""

    gate: Params
    head: Params
    n_modes: int = N_MODES
    version: str = "future-sampler-v1"
    loss_history: list[float] = field(default_factory=list)

    def mode_params_batch(self, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """probs (B, Z), means (B, Z, 2), logstds (B, Z, 2) after clamping."""
        logits, _ = mlp_forward(self.gate, feats)
        logits = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        raw, _ = mlp_forward(self.head, feats)
        raw = raw.reshape(feats.shape[0], self.n_modes, 4)
        means = raw[:, :, :2]
        logstds = np.clip(raw[:, :, 2:], LOGSTD_MIN, LOGSTD_MAX)
        return probs, means, logstds

    def mode_params(self, window: HistoryWindow) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        p, m, s = self.mode_params_batch(window.features()[None, :])
        return p[0], m[0], s[0]

    def save(self, path) -> None:
        blob = {
            "version": self.version,
            "n_modes": self.n_modes,
            "feature_dim": FEATURE_DIM,
            "history_frames": HISTORY_FRAMES,
            "dt": DT,
            "gate": [[w.tolist(), b.tolist()] for w, b in self.gate],
            "head": [[w.tolist(), b.tolist()] for w, b in self.head],
            "loss_history": self.loss_history,
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(blob, f)

    @classmethod
    def load(cls, path) -> "PredictorModel":
        with open(path, "r", encoding="utf-8") as f:
            blob = json.load(f)
        if blob.get("version") != "future-sampler-v1":
            raise PredictorError(f"unsupported model version {blob.get('version')!r}")
        gate = [(np.array(w), np.array(b)) for w, b in blob["gate"]]
        head = [(np.array(w), np.array(b)) for w, b in blob["head"]]
        return cls(gate=gate, head=head, n_modes=int(blob["n_modes"]),
                   loss_history=list(blob.get("loss_history", [])))


def init_model(config: PredictorConfig) -> PredictorModel:
    rng = np.random.default_rng(config.seed)
    gate = init_mlp([FEATURE_DIM, config.hidden, config.hidden, config.n_modes], rng)
    head = init_mlp([FEATURE_DIM, config.hidden, config.hidden, config.n_modes * 4], rng)
    # spread the mode means so gradient descent can separate modes
    w, b = head[-1]
    bias = b.reshape(config.n_modes, 4)
    bias[:, :2] = rng.normal(0.0, 0.5, size=(config.n_modes, 2))
    bias[:, 2:] = -1.0  # start stds near exp(-1)
    return PredictorModel(gate=gate, head=head, n_modes=config.n_modes)


def _nll_forward(model: PredictorModel, feats: np.ndarray, targets: np.ndarray):
    """Mean NLL plus everything the backward pass needs."""
    B = feats.shape[0]
    logits, gate_cache = mlp_forward(model.gate, feats)
    shift = logits - logits.max(axis=1, keepdims=True)
    log_pi = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
    raw, head_cache = mlp_forward(model.head, feats)
    raw = raw.reshape(B, model.n_modes, 4)
    means = raw[:, :, :2]
    raw_logstd = raw[:, :, 2:]
    logstd = np.clip(raw_logstd, LOGSTD_MIN, LOGSTD_MAX)
    std = np.exp(logstd)
    y = targets[:, None, :, :]                       # (B, 1, T, 2)
    mu = means[:, :, None, :]                        # (B, Z, 1, 2)
    sd = std[:, :, None, :]
    resid = (y - mu) / sd
    T = targets.shape[1]
    ll = (-0.5 * resid**2 - logstd[:, :, None, :] - 0.5 * math.log(2.0 * math.pi)).sum(
        axis=(2, 3)
    )                                                # (B, Z)
    joint = log_pi + ll
    m = joint.max(axis=1, keepdims=True)
    total = m[:, 0] + np.log(np.exp(joint - m).sum(axis=1))
    loss = -total.mean()
    cache = dict(
        feats=feats, targets=targets, log_pi=log_pi, joint=joint, gate_cache=gate_cache,
        head_cache=head_cache, means=means, std=std, raw_logstd=raw_logstd, logstd=logstd, B=B, T=T,
    )
    return loss, cache


def _nll_backward(model: PredictorModel, cache: dict):
    B = cache["B"]
    joint = cache["joint"]
    r = np.exp(joint - joint.max(axis=1, keepdims=True))
    r /= r.sum(axis=1, keepdims=True)                # responsibilities (B, Z)
    pi = np.exp(cache["log_pi"])
    d_logits = (pi - r) / B
    gate_grads, _ = mlp_backward(model.gate, cache["gate_cache"], d_logits)
    y = cache["targets"][:, None, :, :]
    mu = cache["means"][:, :, None, :]
    sd = cache["std"][:, :, None, :]
    resid = (y - mu) / sd
    d_mu = (r[:, :, None] * (-resid / sd).sum(axis=2)) / B
    d_logstd = (r[:, :, None] * (1.0 - resid**2).sum(axis=2)) / B
    # clamped log-stds stop gradients at the boundary
    active = (cache["raw_logstd"] > LOGSTD_MIN) & (cache["raw_logstd"] < LOGSTD_MAX)
    d_logstd = np.where(active, d_logstd, 0.0)
    d_raw = np.concatenate([d_mu, d_logstd], axis=2).reshape(B, model.n_modes * 4)
    head_grads, _ = mlp_backward(model.head, cache["head_cache"], d_raw)
    return gate_grads, head_grads


def nll(model: PredictorModel, windows, actions) -> float:
    """Mean negative log likelihood (nats) of observed action sequences."""
    if isinstance(windows, np.ndarray):
        feats = windows
    else:
        feats = np.stack([w.features() for w in windows])
    targets = np.asarray(actions, dtype=np.float64)
    if targets.ndim == 2:
        targets = targets[:, None, :]
    loss, _ = _nll_forward(model, feats, targets)
    return float(loss)


def train(dataset: PredictorDataset, config: PredictorConfig | None = None) -> PredictorModel:
    """Fit the mixture by minibatch gradient descent on the exact marginal NLL.

    The returned model carries the parameters from the best epoch, not the
    last one, so a late noisy epoch cannot undo the fit.
    """
    config = config or PredictorConfig()
    if len(dataset) == 0:
        raise PredictorError("empty dataset")
    model = init_model(config)
    if config.epochs == 0:
        return model
    rng = np.random.default_rng(config.seed + 1)
    opt_gate = Adam(model.gate, config.lr)
    opt_head = Adam(model.head, config.lr)
    pool = _index_pool(dataset)
    loss0, _ = _nll_forward(model, dataset.features, dataset.actions)
    model.loss_history.append(float(loss0))
    best = (loss0, _clone_params(model.gate), _clone_params(model.head))
    for epoch in range(config.epochs):
        if epoch > 0 and epoch % config.lr_decay_every == 0:
            opt_gate.lr *= 0.5
            opt_head.lr *= 0.5
        order = rng.permutation(pool)
        for start in range(0, len(pool), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, cache = _nll_forward(model, dataset.features[idx], dataset.actions[idx])
            if not math.isfinite(loss):
                raise PredictorTrainingError(
                    f"non-finite NLL at epoch {epoch}, batch {start // config.batch_size}"
                )
            gate_grads, head_grads = _nll_backward(model, cache)
            opt_gate.step(model.gate, gate_grads)
            opt_head.step(model.head, head_grads)
        loss_e, _ = _nll_forward(model, dataset.features, dataset.actions)
        if not math.isfinite(loss_e):
            raise PredictorTrainingError(f"non-finite NLL after epoch {epoch}")
        model.loss_history.append(float(loss_e))
        if loss_e < best[0]:
            best = (loss_e, _clone_params(model.gate), _clone_params(model.head))
    model.gate[:] = best[1]
    model.head[:] = best[2]
    return model


def _clone_params(params: Params) -> Params:
    return [(w.copy(), b.copy()) for w, b in params]


def _index_pool(dataset: PredictorDataset) -> np.ndarray:
    """Training indices with strong manoeuvres duplicated.

    Steady cruising dominates the raw windows, so without reweighting the
    mixture starves the braking and recovery modes that OOD checks depend on.
    """
    peak = np.abs(dataset.actions).max(axis=(1, 2))
    reps = 1 + np.minimum((peak / 0.6).astype(int), 4)
    return np.repeat(np.arange(len(dataset)), reps)


@dataclass(frozen=True)
class FutureSampleSet:
    """Sampled future positions of one object, horizon frames ahead."""

    positions: np.ndarray   # (n, 2)
    horizon_frames: int

    def __post_init__(self):
        if self.positions.shape[0] < 2:
            raise PredictorError("need at least two sampled futures")
        if not np.all(np.isfinite(self.positions)):
            raise PredictorError("non-finite sampled positions")


def sample_from_modes(
    probs: np.ndarray,
    means: np.ndarray,
    stds: np.ndarray,
    state: KinematicState,
    kind: str,
    horizon: int,
    n: int,
    rng: np.random.Generator,
) -> FutureSampleSet:
    """Draw a mode per sample, then per-frame actions, then integrate."""
    z = rng.choice(len(probs), size=n, p=probs)
    noise = rng.standard_normal(size=(n, horizon, 2))
    acts = means[z][:, None, :] + stds[z][:, None, :] * noise
    if kind == "pedestrian":
        vel = np.tile([state.vx, state.vy], (n, 1))
        pos = np.tile([state.x, state.y], (n, 1))
        for k in range(horizon):
            new_vel = np.clip(vel + acts[:, k, :] * DT, -SPEED_CAP, SPEED_CAP)
            pos = pos + 0.5 * (vel + new_vel) * DT
            vel = new_vel
    else:
        speed = np.full(n, state.speed)
        heading = np.full(n, state.heading)
        vel = np.column_stack([state.vx * np.ones(n), state.vy * np.ones(n)])
        pos = np.tile([state.x, state.y], (n, 1))
        for k in range(horizon):
            speed = np.maximum(speed + acts[:, k, 0] * DT, 0.0)
            heading = heading + acts[:, k, 1] * DT
            new_vel = np.column_stack([speed * np.cos(heading), speed * np.sin(heading)])
            pos = pos + 0.5 * (vel + new_vel) * DT
            vel = new_vel
    return FutureSampleSet(positions=pos, horizon_frames=horizon)


def sample_futures(
    model: PredictorModel,
    window: HistoryWindow,
    n: int,
    horizon: int,
    rng: np.random.Generator,
) -> FutureSampleSet:
    probs, means, logstds = model.mode_params(window)
    return sample_from_modes(
        probs, means, np.exp(logstds), window.current, window.kind, horizon, n, rng
    )
