"""Double-DQN training over the ward simulator.

The replay buffer stores compact ward snapshots; token matrices are rebuilt
per batch. Next actions are chosen by the primary network's constrained
greedy rule and scored by the target network.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, EvaluationError, NumericError
from .mdp import NORMAL, RewardParams
from .protocols import get_protocol
from .qnet import LearnedProtocol, QNetConfig, TransformerQNet, save_model
from .simulator import ReplayBuffer, SimConfig, fill_replay, run_episode
from .trajectory import CohortDataset

VAL_SEED_BASE = 900_000

# desk-scale settings: one CPU core, a few minutes per capacity
DESK_QNET = {"embed_dim": 32, "num_heads": 4, "hidden_dim": 64, "num_layers": 1, "precision": "float32"}
DESK_TRAIN = {"learning_rate": 1e-3, "epochs": 10, "gradient_steps": 200, "update_freq": 50, "tau": 1.0,
              "val_seeds": 10}


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 3e-5
    update_freq: int = 500
    epochs: int = 60
    gradient_steps: int = 1000
    gamma: float = 0.95
    tau: float = 0.005
    mode: str = "off_policy"
    behavior: str | None = None
    epsilon: float = 0.1
    reward: RewardParams = field(default_factory=RewardParams)
    single_network: bool = False
    optimizer: str = "adam"
    grad_clip: float | None = 10.0
    buffer_capacity: int = 16000
    fill_steps: int | None = None
    val_seeds: int = 5
    val_horizon: int | None = None
    keep_best: bool = True
    early_fraction: float | None = None
    divergence_loss: float = 1e6
    reward_scale: float = 1.0  # multiplies rewards inside the TD target; the greedy policy is scale-free
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.reward, dict):
            self.reward = RewardParams(**self.reward)
        self.mode = self.mode.replace("-", "_")
        if not 0 < self.gamma < 1:
            raise ConfigurationError("gamma must lie in (0, 1)")
        if not 0 < self.tau <= 1:
            raise ConfigurationError("tau must lie in (0, 1]")
        if self.mode not in ("off_policy", "offline"):
            raise ConfigurationError(f"unknown training mode {self.mode!r}")
        if self.mode == "offline" and not self.behavior:
            raise ConfigurationError("offline training needs a behavior protocol")
        if self.batch_size < 1 or self.batch_size > self.buffer_capacity:
            raise ConfigurationError("batch_size must lie in [1, buffer_capacity]")
        if self.epochs < 1 or self.gradient_steps < 0 or self.update_freq < 1:
            raise ConfigurationError("epochs >= 1, gradient_steps >= 0 and update_freq >= 1 are required")
        if not 0 <= self.epsilon <= 1:
            raise ConfigurationError("epsilon must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if not self.reward_scale > 0:
            raise ConfigurationError("reward_scale must be > 0")
        if self.early_fraction is not None and not 0 < self.early_fraction <= 1:
            raise ConfigurationError("early_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reward"] = asdict(self.reward)
        return d


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    epochs: list = field(default_factory=list)  # dicts: epoch, survival, dpr, return, wall
    target_updates: list = field(default_factory=list)  # gradient steps after which the target moved

    def write(self, out_dir, prefix: str = "") -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        p_loss = out / f"{prefix}loss.csv"
        with open(p_loss, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for i, v in enumerate(self.losses, start=1):
                w.writerow([i, repr(float(v))])
        p_ep = out / f"{prefix}epochs.csv"
        with open(p_ep, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "survival", "dpr"])
            for e in self.epochs:
                w.writerow([e["epoch"], repr(float(e["survival"])), repr(float(e["dpr"]))])
        return {"loss": p_loss, "epochs": p_ep}


@dataclass
class TrainResult:
    model: object
    params: np.ndarray
    history: TrainHistory
    best_epoch: int
    metadata: dict

    def protocol(self, name: str = "learned") -> LearnedProtocol:
        return LearnedProtocol(self.model, self.params, name=name)

    def save(self, path):
        return save_model(path, self.model, self.params, self.metadata)


# ---------------------------------------------------------------------------
# building blocks


def soft_update(target, primary, tau: float) -> np.ndarray:
    target = np.asarray(target)
    primary = np.asarray(primary)
    if target.shape != primary.shape:
        raise ConfigurationError(f"shape mismatch: {target.shape} vs {primary.shape}")
    return tau * primary + (1.0 - tau) * target


def encode_batch(model, cohort, batch: dict, which: str = "s"):
    return model.encode(cohort, batch[f"{which}_status"], batch[f"{which}_patient"], batch[f"{which}_cursor"],
                        batch[f"{which}_vent"], batch[f"{which}_counters"])


def td_target(model, enc_next, rewards, primary, target, gamma: float, capacity: int, withdrawal_on: bool,
              force_fill=None) -> np.ndarray:
    """r + gamma * sum_i T_target(s')_{i, a'_i}, a' greedy under the primary net."""
    out_p = model.q_out(primary, enc_next)
    a_next = model.select(out_p, enc_next, capacity, withdrawal_on, force_fill)
    out_t = out_p if target is primary else model.q_out(target, enc_next)
    return np.asarray(rewards, dtype=np.float64) + gamma * model.joint(out_t, enc_next, a_next)


def gradient_step(model, params, enc, actions, targets, alpha: float):
    """One plain gradient-descent step on the Huber loss; returns (new_params, loss)."""
    loss, grad, _ = model.loss_grad(params, enc, actions, targets)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    return params - alpha * grad, loss


class Adam:
    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return params - self.lr * mh / (np.sqrt(vh) + self.eps)


class SGD:
    def __init__(self, size, lr):
        self.lr = lr

    def step(self, params, grad):
        return params - self.lr * grad


def epsilon_flip(epsilon: float, capacity: int, withdrawal_on: bool):
    """Exploration: with probability epsilon toggle one unlocked Normal bed, staying feasible."""

    def explore(state, action, rng):
        if epsilon <= 0 or rng.random() >= epsilon:
            return action
        a = np.array(action, dtype=np.uint8)
        movable = state.status == NORMAL
        if withdrawal_on:
            movable &= ~state.locked
        cand = np.flatnonzero(movable)
        if len(cand) == 0:
            return a
        i = cand[rng.integers(len(cand))]
        if a[i]:
            a[i] = 0
        elif a.sum() < capacity:
            a[i] = 1
        else:
            on = np.flatnonzero(a.astype(bool) & movable)
            if len(on) == 0:
                return a
            a[on[rng.integers(len(on))]] = 0
            a[i] = 1
        return a

    return explore


def _cohort_subset(cohort, fraction):
    if fraction is None or not isinstance(cohort, CohortDataset):
        return cohort
    n = max(1, int(round(len(cohort) * fraction)))
    return CohortDataset(cohort.trajectories[:n], groups=cohort.groups, split_tag=cohort.split_tag)


def _validate(protocol, sim_config, cohort, seeds, reference, horizon, reward):
    from .evaluation import dpr  # local: evaluation imports protocols, which imports nothing from here

    rets, surv, pars = [], [], []
    for s, ref in zip(seeds, reference):
        log = run_episode(protocol, sim_config, cohort, horizon=horizon, seed=s, reward_params=reward, record=False)
        rets.append(sum(log.rewards))
        surv.append(100.0 * log.survivors / ref if ref > 0 else 0.0)
        counts = log.group_counts()
        rates = [100.0 * a / r if r else None for r, a in counts.values()]
        try:
            pars.append(dpr(rates))
        except EvaluationError:
            pass  # fewer than two groups faced a decision
    parity = float(np.mean(pars)) if pars else float("nan")
    return float(np.mean(rets)), float(np.mean(surv)), parity


# ---------------------------------------------------------------------------
# training loop


def default_model(cohort, sim_config: SimConfig, qnet_config: QNetConfig | None = None):
    arrays = cohort.packed if isinstance(cohort, CohortDataset) else cohort
    cfg = qnet_config or QNetConfig()
    cfg = QNetConfig(**{**asdict(cfg), "k": arrays.k, "n_groups": arrays.n_groups,
                        "max_tokens": cfg.max_tokens or sim_config.bed_count})
    return TransformerQNet(cfg)


def train(cohort, sim_config: SimConfig, config: TrainConfig, model=None, progress=None) -> TrainResult:
    """Algorithm: E epochs of (buffer refresh, G Double-DQN gradient steps, validation)."""
    cohort = _cohort_subset(cohort, config.early_fraction)
    arrays = cohort.packed if isinstance(cohort, CohortDataset) else cohort
    if model is None:
        model = default_model(cohort, sim_config)
    C, W = sim_config.capacity, sim_config.withdrawal_on
    ss = np.random.SeedSequence(config.seed)
    s_init, s_sim, s_batch = ss.spawn(3)
    params = model.init_params(int(s_init.generate_state(1)[0]))
    target = params.copy()
    opt = Adam(len(params), config.learning_rate) if config.optimizer == "adam" else SGD(len(params), config.learning_rate)
    batch_rng = np.random.default_rng(s_batch)
    sim_seed = int(s_sim.generate_state(1)[0])
    explore = epsilon_flip(config.epsilon, C, W)
    buffer = ReplayBuffer(sim_config.bed_count, arrays.n_groups, config.buffer_capacity)
    fill = config.fill_steps or sim_config.horizon
    if fill < 1:
        raise ConfigurationError("buffer refresh needs at least one step")

    sim = None
    if config.mode == "offline":
        behavior = get_protocol(config.behavior)
        steps = min(config.buffer_capacity, fill * config.epochs)
        buffer, sim = fill_replay(behavior, sim_config, arrays, steps, buffer, seed=sim_seed,
                                  reward_params=config.reward, explore=explore)

    val_seeds = [VAL_SEED_BASE + config.seed * 100 + i for i in range(config.val_seeds)]
    val_horizon = config.val_horizon or sim_config.horizon
    reference = []
    if val_seeds:
        full = SimConfig(capacity=sim_config.bed_count, arrival_rate=sim_config.arrival_rate,
                         bed_count=sim_config.bed_count, horizon=val_horizon)
        lottery = get_protocol("lottery")
        reference = [run_episode(lottery, full, arrays, horizon=val_horizon, seed=s, record=False).survivors
                     for s in val_seeds]

    history = TrainHistory()
    best = (-math.inf, params.copy(), 0)
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        if config.mode == "off_policy":
            behavior = LearnedProtocol(model, params.copy())
            buffer, sim = fill_replay(behavior, sim_config, arrays, fill, buffer, sim=sim, seed=sim_seed,
                                      reward_params=config.reward, explore=explore)
        for _ in range(config.gradient_steps):
            batch = buffer.batch(buffer.sample(config.batch_size, batch_rng))
            enc = encode_batch(model, arrays, batch, "s")
            enc2 = encode_batch(model, arrays, batch, "s2")
            tgt = params if config.single_network else target
            y = td_target(model, enc2, config.reward_scale * batch["reward"], params, tgt, config.gamma, C, W)
            loss, grad, _ = model.loss_grad(params, enc, batch["action"], y)
            if not math.isfinite(loss) or loss > config.divergence_loss:
                raise NumericError(
                    f"training diverged at epoch {epoch}, step {step + 1}: loss={loss!r}, "
                    f"|grad|={float(np.linalg.norm(grad)):.3g}, |theta|={float(np.linalg.norm(params)):.3g}"
                )
            if config.grad_clip is not None:
                norm = float(np.linalg.norm(grad))
                if norm > config.grad_clip:
                    grad = grad * (config.grad_clip / norm)
            params = opt.step(params, grad)
            step += 1
            history.losses.append(loss)
            if not config.single_network and step % config.update_freq == 0:
                target = soft_update(target, params, config.tau)
                history.target_updates.append(step)
        if val_seeds:
            ret, surv, par = _validate(LearnedProtocol(model, params), sim_config, arrays, val_seeds, reference,
                                       val_horizon, config.reward)
        else:
            ret, surv, par = 0.0, float("nan"), float("nan")
        history.epochs.append({"epoch": epoch, "survival": surv, "dpr": par, "return": ret,
                               "wall": time.perf_counter() - t0})
        if ret > best[0]:
            best = (ret, params.copy(), epoch)
        if progress is not None:
            progress(history.epochs[-1])

    final, best_epoch = (best[1], best[2]) if config.keep_best and val_seeds else (params, config.epochs)
    metadata = {
        "seed": config.seed, "lambda": config.reward.lam, "mu": config.reward.mu, "capacity": C,
        "bed_count": sim_config.bed_count, "withdrawal_on": W, "mode": config.mode, "behavior": config.behavior,
        "epochs": config.epochs, "best_epoch": best_epoch, "gradient_steps": config.gradient_steps,
    }
    return TrainResult(model, final, history, best_epoch, metadata)
