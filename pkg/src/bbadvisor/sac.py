"""Soft actor-critic for a continuous, bounded action.

Everything is plain numpy in float64: dense tanh networks with hand-written
backpropagation, Adam, a squashed-Gaussian actor, twin critics with Polyak
targets, and a ring replay buffer.  Parameters of each network live in one
flat vector so that optimizer and target updates are single array ops.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LOG2 = math.log(2.0)


class NonFiniteError(FloatingPointError):
    """A loss, gradient or network output became NaN/inf."""


@dataclass
class SACConfig:
    gamma: float = 0.99
    alpha: float = 0.2
    tau_soft: float = 0.005
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    batch_size: int = 256
    hidden_sizes: tuple[int, ...] = (128, 128)
    replay_capacity: int = 200_000
    action_low: float = -1.0
    action_high: float = 1.0
    seed: int = 0
    reward_scale: float = 1.0

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.tau_soft <= 1:
            raise ValueError("tau_soft must lie in (0, 1]")
        if not self.action_low < self.action_high:
            raise ValueError("action_low must be < action_high")
        if self.batch_size < 1 or self.replay_capacity < 1:
            raise ValueError("batch_size and replay_capacity must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SACConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


# --------------------------------------------------------------------------
# networks

class MLP:
    """Dense network, tanh hidden layers, linear output, flat parameter vector."""

    def __init__(self, sizes: tuple[int, ...], rng: np.random.Generator | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        self.shapes = shapes
        self.theta = np.zeros(sum(int(np.prod(s)) for s in shapes))
        self.params = self._views(self.theta)
        if rng is not None:
            for k in range(0, len(self.params), 2):
                bound = 1.0 / math.sqrt(self.params[k].shape[0])
                self.params[k][...] = rng.uniform(-bound, bound, self.params[k].shape)
                self.params[k + 1][...] = rng.uniform(-bound, bound, self.params[k + 1].shape)

    def _views(self, flat: np.ndarray) -> list[np.ndarray]:
        views, offset = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            views.append(flat[offset:offset + size].reshape(shape))
            offset += size
        return views

    def copy(self) -> "MLP":
        other = MLP(self.sizes)
        other.theta[:] = self.theta
        return other

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            h = h @ W + b
            if k < n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts: list[np.ndarray], dout: np.ndarray, want_params: bool = True):
        """Return (flat parameter gradient or None, gradient w.r.t. the input)."""
        grad = np.zeros_like(self.theta) if want_params else None
        gviews = self._views(grad) if want_params else None
        n_layers = len(self.params) // 2
        delta = dout
        for k in reversed(range(n_layers)):
            if k < n_layers - 1:
                delta = delta * (1.0 - acts[k + 1] ** 2)
            if want_params:
                np.matmul(acts[k].T, delta, out=gviews[2 * k])
                gviews[2 * k + 1][...] = delta.sum(axis=0)
            delta = delta @ self.params[2 * k].T
        return grad, delta


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        lr_t = self.lr * math.sqrt(1 - self.beta2 ** self.t) / (1 - self.beta1 ** self.t)
        theta -= lr_t * self.m / (np.sqrt(self.v) + self.eps)


def soft_update(target: np.ndarray, online: np.ndarray, tau_soft: float) -> np.ndarray:
    """Polyak blend ``target <- (1 - tau) target + tau online`` in place."""
    if target.shape != online.shape:
        raise ValueError(f"shape mismatch {target.shape} vs {online.shape}")
    target *= 1.0 - tau_soft
    target += tau_soft * online
    return target


# --------------------------------------------------------------------------
# squashed Gaussian policy

def _log_std(raw: np.ndarray) -> np.ndarray:
    return LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (np.tanh(raw) + 1.0)


def log1m_tanh2(u: np.ndarray) -> np.ndarray:
    """Stable log(1 - tanh(u)^2)."""
    return 2.0 * (LOG2 - u - np.logaddexp(0.0, -2.0 * u))


def squashed_log_prob(u: np.ndarray, mu: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Log-density of tanh(u) for u ~ N(mu, exp(log_std)^2), summed over action dims."""
    z = (u - mu) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI - log1m_tanh2(u), axis=-1)


class Actor:
    def __init__(self, obs_dim: int, act_dim: int, hidden: tuple[int, ...],
                 rng: np.random.Generator | None = None):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.net = MLP((obs_dim, *hidden, 2 * act_dim), rng)

    def heads(self, obs: np.ndarray):
        out, acts = self.net.forward(obs)
        mu = out[:, :self.act_dim]
        raw = out[:, self.act_dim:]
        return mu, raw, acts

    def sample(self, obs: np.ndarray, eps: np.ndarray):
        """Reparameterized sample in normalized [-1, 1]; returns (a, log_prob)."""
        mu, raw, _ = self.heads(obs)
        log_std = _log_std(raw)
        u = mu + np.exp(log_std) * eps
        a = np.tanh(u)
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("actor produced a non-finite action")
        return a, squashed_log_prob(u, mu, log_std)

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        mu, _, _ = self.heads(obs)
        if not np.all(np.isfinite(mu)):
            raise NonFiniteError("actor produced a non-finite mean")
        return np.tanh(mu)


def to_units(a_norm, low: float, high: float):
    return low + 0.5 * (np.asarray(a_norm) + 1.0) * (high - low)


def from_units(a, low: float, high: float):
    return 2.0 * (np.asarray(a) - low) / (high - low) - 1.0


def policy_sample(actor: Actor, obs, rng: np.random.Generator, low: float = -1.0,
                  high: float = 1.0, deterministic: bool = False):
    """Draw one action in ``[low, high]`` and its exact log-density there.

    The log-density includes the tanh Jacobian and the affine rescaling.
    With ``deterministic`` the squashed mean is returned and log_prob is None.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if not np.all(np.isfinite(obs)):
        raise ValueError("observation must be finite")
    def out(a):
        a = to_units(a, low, high)[0]
        return float(a[0]) if actor.act_dim == 1 else a

    if deterministic:
        return out(actor.mean_action(obs)), None
    eps = rng.standard_normal((obs.shape[0], actor.act_dim))
    a, logp = actor.sample(obs, eps)
    logp = logp - actor.act_dim * math.log(0.5 * (high - low))
    return out(a), float(logp[0])


# --------------------------------------------------------------------------
# losses with analytic gradients

def critic_loss_and_grad(critic: MLP, obs: np.ndarray, act: np.ndarray, y: np.ndarray):
    """Mean squared Bellman error ``mean((Q(s, a) - y)^2)`` and its gradient."""
    q, acts = critic.forward(np.concatenate([obs, act], axis=1))
    diff = q[:, 0] - y
    loss = float(np.mean(diff * diff))
    grad, _ = critic.backward(acts, (2.0 / len(y)) * diff[:, None])
    return loss, grad


def actor_loss_and_grad(actor: Actor, critics: tuple[MLP, MLP], obs: np.ndarray,
                        eps: np.ndarray, alpha: float):
    """``mean(alpha * log pi(a|s) - min_i Q_i(s, a))`` with a = tanh(mu + std * eps)."""
    mu, raw, acts = actor.heads(obs)
    log_std = _log_std(raw)
    std = np.exp(log_std)
    u = mu + std * eps
    a = np.tanh(u)
    logp = squashed_log_prob(u, mu, log_std)

    x = np.concatenate([obs, a], axis=1)
    q1, acts1 = critics[0].forward(x)
    q2, acts2 = critics[1].forward(x)
    use1 = q1[:, 0] <= q2[:, 0]
    q_min = np.where(use1, q1[:, 0], q2[:, 0])
    batch = obs.shape[0]
    loss = float(np.mean(alpha * logp - q_min))

    # dL/dQ_min = -1/B, routed to whichever critic is smaller
    _, dx1 = critics[0].backward(acts1, np.where(use1, -1.0 / batch, 0.0)[:, None], False)
    _, dx2 = critics[1].backward(acts2, np.where(use1, 0.0, -1.0 / batch)[:, None], False)
    dq_da = (dx1 + dx2)[:, obs.shape[1]:]

    # d logp/du = 2 tanh(u) (squash term); the Gaussian term is constant in eps
    d_u = (alpha / batch) * 2.0 * a + dq_da * (1.0 - a * a)
    d_mu = d_u
    d_log_std = d_u * std * eps - alpha / batch
    d_raw = d_log_std * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - np.tanh(raw) ** 2)
    grad, _ = actor.net.backward(acts, np.concatenate([d_mu, d_raw], axis=1))
    return loss, grad


# --------------------------------------------------------------------------
# replay

@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, act_dim: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self.ptr = 0

    def __len__(self) -> int:
        return self.size

    def push(self, s, a, r, s_next, done) -> None:
        s = np.asarray(s, dtype=np.float64)
        s_next = np.asarray(s_next, dtype=np.float64)
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(s_next)) and math.isfinite(r)):
            raise ValueError("transition contains non-finite values")
        i = self.ptr
        self.s[i], self.a[i], self.r[i] = s, a, r
        self.s_next[i], self.done[i] = s_next, float(done)
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])


# --------------------------------------------------------------------------
# agent

class SACAgent:
    """Actor, twin critics and their targets for one bounded scalar action."""

    def __init__(self, obs_dim: int, config: SACConfig, act_dim: int = 1):
        self.config = config
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.rng = np.random.default_rng(config.seed)
        hidden = config.hidden_sizes
        self.actor = Actor(obs_dim, act_dim, hidden, self.rng)
        self.q1 = MLP((obs_dim + act_dim, *hidden, 1), self.rng)
        self.q2 = MLP((obs_dim + act_dim, *hidden, 1), self.rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.actor_opt = Adam(self.actor.net.theta.size, config.lr_actor)
        self.q1_opt = Adam(self.q1.theta.size, config.lr_critic)
        self.q2_opt = Adam(self.q2.theta.size, config.lr_critic)
        self.steps = 0

    # -- acting
    def act(self, obs, deterministic: bool = False) -> float:
        """Normalized action in [-1, 1]."""
        obs = np.asarray(obs, dtype=np.float64)[None, :]
        if deterministic:
            return float(self.actor.mean_action(obs)[0, 0])
        eps = self.rng.standard_normal((1, self.act_dim))
        a, _ = self.actor.sample(obs, eps)
        return float(a[0, 0])

    def random_action(self) -> float:
        return float(self.rng.uniform(-1.0, 1.0))

    def to_units(self, a_norm: float) -> float:
        return float(to_units(a_norm, self.config.action_low, self.config.action_high))

    # -- learning
    def critic_targets(self, batch: Batch, eps: np.ndarray | None = None) -> np.ndarray:
        cfg = self.config
        if eps is None:
            eps = self.rng.standard_normal((len(batch.r), self.act_dim))
        a_next, logp_next = self.actor.sample(batch.s_next, eps)
        x = np.concatenate([batch.s_next, a_next], axis=1)
        q_next = np.minimum(self.q1_target(x)[:, 0], self.q2_target(x)[:, 0])
        soft_v = q_next - cfg.alpha * logp_next
        return cfg.reward_scale * batch.r + cfg.gamma * (1.0 - batch.done) * soft_v

    def critic_update(self, batch: Batch) -> float:
        y = self.critic_targets(batch)
        loss1, g1 = critic_loss_and_grad(self.q1, batch.s, batch.a, y)
        loss2, g2 = critic_loss_and_grad(self.q2, batch.s, batch.a, y)
        loss = loss1 + loss2
        if not (math.isfinite(loss) and np.all(np.isfinite(g1)) and np.all(np.isfinite(g2))):
            raise NonFiniteError(f"critic loss became non-finite at step {self.steps}")
        self.q1_opt.step(self.q1.theta, g1)
        self.q2_opt.step(self.q2.theta, g2)
        return loss

    def actor_update(self, batch: Batch) -> float:
        eps = self.rng.standard_normal((len(batch.r), self.act_dim))
        loss, grad = actor_loss_and_grad(self.actor, (self.q1, self.q2), batch.s, eps,
                                         self.config.alpha)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NonFiniteError(f"actor loss became non-finite at step {self.steps}")
        self.actor_opt.step(self.actor.net.theta, grad)
        return loss

    def update(self, buffer: ReplayBuffer) -> tuple[float, float]:
        batch = buffer.sample(self.config.batch_size, self.rng)
        c_loss = self.critic_update(batch)
        a_loss = self.actor_update(batch)
        soft_update(self.q1_target.theta, self.q1.theta, self.config.tau_soft)
        soft_update(self.q2_target.theta, self.q2.theta, self.config.tau_soft)
        self.steps += 1
        return c_loss, a_loss

    # -- persistence
    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "actor": self.actor.net.theta, "q1": self.q1.theta, "q2": self.q2.theta,
            "q1_target": self.q1_target.theta, "q2_target": self.q2_target.theta,
        }

    def describe(self) -> dict:
        return {"obs_dim": self.obs_dim, "act_dim": self.act_dim, "steps": self.steps,
                "config": _jsonable(asdict(self.config))}


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# --------------------------------------------------------------------------
# checkpoint container
#
#   magic   8 bytes  b"BBSACCK\0"
#   version u32 LE
#   hlen    u32 LE   length of the JSON header
#   header  hlen bytes of UTF-8 JSON (sorted keys)
#   payload float64 little-endian arrays, in header order
#   digest  32 bytes SHA-256 over everything before it

CHECKPOINT_MAGIC = b"BBSACCK\0"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, agents: dict[str, SACAgent], meta: dict | None = None) -> None:
    header = {"agents": {}, "arrays": [], "meta": meta or {}}
    chunks = []
    offset = 0
    for name, agent in agents.items():
        header["agents"][name] = agent.describe()
        for key, arr in agent.arrays().items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            header["arrays"].append({"name": f"{name}/{key}", "shape": list(arr.shape),
                                     "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = (CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)) + hbytes
            + b"".join(chunks))
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Verify and parse a checkpoint into (header, arrays by name)."""
    blob = Path(path).read_bytes()
    if len(blob) < 48 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack("<II", body[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(body[16:16 + hlen])
    payload = body[16 + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[dict[str, SACAgent], dict]:
    header, arrays = read_checkpoint(path)
    agents = {}
    for name, desc in header["agents"].items():
        agent = SACAgent(desc["obs_dim"], SACConfig.from_dict(desc["config"]), desc["act_dim"])
        for key, theta in agent.arrays().items():
            stored = arrays[f"{name}/{key}"]
            if stored.shape != theta.shape:
                raise CheckpointError(f"shape mismatch for {name}/{key}")
            theta[:] = stored
        agent.steps = desc["steps"]
        agents[name] = agent
    return agents, header["meta"]
