"""Gaussian MLP policy and value network with hand-written backpropagation.

All parameters live in one float64 vector; named arrays are views into it. The
fixed order (also the checkpoint payload order) is::

    for each hidden layer of the policy trunk:  W (in, out), b (out,)
    mean head:                                  W (h_last, act_dim), b (act_dim,)
    log_std:                                    (act_dim,)
    for each hidden layer of the value trunk:   W (in, out), b (out,)
    value head:                                 W (h_last, 1), b (1,)

Weights are stored row-major, inputs multiply from the left (``x @ W``).
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

LOG_STD_MIN = math.log(0.05)
LOG_STD_MAX = math.log(2.0)
LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"PGCK"
CHECKPOINT_VERSION = 1


class PolicyError(ValueError):
    pass


class CheckpointError(PolicyError):
    pass


@dataclass(frozen=True)
class Architecture:
    obs_dim: int
    act_dim: int
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.obs_dim < 1 or self.act_dim < 1:
            raise PolicyError("obs_dim and act_dim must be >= 1")
        if not self.hidden or min(self.hidden) < 1:
            raise PolicyError("hidden must be a non-empty list of positive widths")
        if self.activation != "tanh":
            raise PolicyError(f"unsupported activation {self.activation!r}")

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out: list[tuple[str, tuple[int, ...]]] = []
        for net in ("pi", "v"):
            fan_in = self.obs_dim
            for k, width in enumerate(self.hidden):
                out.append((f"{net}.W{k}", (fan_in, width)))
                out.append((f"{net}.b{k}", (width,)))
                fan_in = width
            head = self.act_dim if net == "pi" else 1
            out.append((f"{net}.Wout", (fan_in, head)))
            out.append((f"{net}.bout", (head,)))
            if net == "pi":
                out.append(("log_std", (self.act_dim,)))
        return out

    @property
    def size(self) -> int:
        return sum(math.prod(s) for _, s in self.shapes())


class PolicyParams:
    """Flat parameter vector plus named views into it."""

    def __init__(self, arch: Architecture, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (arch.size,):
            raise PolicyError(f"expected {arch.size} parameters, got {flat.shape}")
        self.arch = arch
        self.flat = flat
        self.views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in arch.shapes():
            n = math.prod(shape)
            self.views[name] = flat[offset:offset + n].reshape(shape)
            offset += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.arch, self.flat.copy())

    def with_flat(self, flat: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.arch, flat)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.flat, other.flat)

    @property
    def log_std_slice(self) -> slice:
        offset = 0
        for name, shape in self.arch.shapes():
            n = math.prod(shape)
            if name == "log_std":
                return slice(offset, offset + n)
            offset += n
        raise AssertionError("log_std missing from architecture")


def _orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(arch: Architecture, seed: int) -> PolicyParams:
    """Orthogonal weights (gain sqrt(2) hidden, 0.01 mean head, 1 value head), zero biases, log_std 0."""
    rng = np.random.default_rng(seed)
    params = PolicyParams(arch, np.zeros(arch.size))
    for name, shape in arch.shapes():
        if ".W" not in name:
            continue
        if name == "pi.Wout":
            gain = 0.01
        elif name == "v.Wout":
            gain = 1.0
        else:
            gain = math.sqrt(2.0)
        params[name][...] = _orthogonal(rng, shape, gain)
    return params


class PolicyOutput(NamedTuple):
    mean: np.ndarray     # (n, act_dim)
    log_std: np.ndarray  # (act_dim,) state independent
    value: np.ndarray    # (n,)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


class HeadGrad(NamedTuple):
    """Loss derivative with respect to the network outputs."""

    d_mean: np.ndarray
    d_log_std: np.ndarray
    d_value: np.ndarray


HeadLoss = Callable[[PolicyOutput], tuple[float, HeadGrad]]


def _as_batch(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[None, :]
    if obs.ndim != 2 or obs.shape[1] != params.arch.obs_dim:
        raise PolicyError(f"observation shape {obs.shape} does not match obs_dim={params.arch.obs_dim}")
    return obs


def _trunk(params: PolicyParams, net: str, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    for k in range(len(params.arch.hidden)):
        x = np.tanh(x @ params[f"{net}.W{k}"] + params[f"{net}.b{k}"])
        acts.append(x)
    return acts


def _forward_cached(params: PolicyParams, obs: np.ndarray):
    pi_acts = _trunk(params, "pi", obs)
    v_acts = _trunk(params, "v", obs)
    mean = pi_acts[-1] @ params["pi.Wout"] + params["pi.bout"]
    value = (v_acts[-1] @ params["v.Wout"] + params["v.bout"])[:, 0]
    return PolicyOutput(mean, params["log_std"].copy(), value), (pi_acts, v_acts)


def forward(params: PolicyParams, obs: np.ndarray) -> PolicyOutput:
    """Batched forward pass; a 1-D observation is treated as a batch of one."""
    out, _ = _forward_cached(params, _as_batch(params, obs))
    return out


def policy_mean_fn(params: PolicyParams) -> Callable[[np.ndarray], np.ndarray]:
    """Deterministic action function (policy mean) for evaluation."""

    def act(obs: np.ndarray) -> np.ndarray:
        x = _trunk(params, "pi", _as_batch(params, obs))[-1]
        return x @ params["pi.Wout"] + params["pi.bout"]

    return act


def sample_action(output: PolicyOutput, rng: np.random.Generator) -> np.ndarray:
    return output.mean + output.std * rng.standard_normal(output.mean.shape)


def log_prob(output: PolicyOutput, action: np.ndarray) -> np.ndarray:
    """Diagonal Gaussian log density, one value per batch row."""
    z = (np.asarray(action) - output.mean) / output.std
    return np.sum(-0.5 * z * z - output.log_std - 0.5 * LOG_2PI, axis=-1)


def kl_terms(old_mean, old_log_std, new_mean, new_log_std) -> np.ndarray:
    """Per-row KL[old || new] for diagonal Gaussians, summed over action dims."""
    var_old = np.exp(2.0 * old_log_std)
    var_new = np.exp(2.0 * new_log_std)
    k = new_log_std - old_log_std + (var_old + (old_mean - new_mean) ** 2) / (2.0 * var_new) - 0.5
    return np.sum(k, axis=-1)


def kl_gaussian(old: PolicyOutput, new: PolicyOutput) -> float:
    return float(np.mean(kl_terms(old.mean, old.log_std, new.mean, new.log_std)))


def _backprop_trunk(params: PolicyParams, net: str, acts: list[np.ndarray], d_top: np.ndarray,
                    grads: PolicyParams) -> None:
    delta = d_top
    for k in reversed(range(len(params.arch.hidden))):
        delta = delta * (1.0 - acts[k + 1] ** 2)
        grads[f"{net}.W{k}"][...] = acts[k].T @ delta
        grads[f"{net}.b{k}"][...] = delta.sum(axis=0)
        if k:
            delta = delta @ params[f"{net}.W{k}"].T


def value_and_grad(params: PolicyParams, obs: np.ndarray, head_loss: HeadLoss) -> tuple[float, PolicyParams]:
    """Loss and its exact gradient for a loss defined on the network outputs."""
    obs = _as_batch(params, obs)
    out, (pi_acts, v_acts) = _forward_cached(params, obs)
    loss, hg = head_loss(out)
    if not np.isfinite(loss):
        raise PolicyError(f"non-finite loss {loss}")
    grads = PolicyParams(params.arch, np.zeros(params.arch.size))
    d_mean = np.asarray(hg.d_mean, dtype=np.float64)
    grads["pi.Wout"][...] = pi_acts[-1].T @ d_mean
    grads["pi.bout"][...] = d_mean.sum(axis=0)
    _backprop_trunk(params, "pi", pi_acts, d_mean @ params["pi.Wout"].T, grads)
    grads["log_std"][...] = hg.d_log_std
    d_value = np.asarray(hg.d_value, dtype=np.float64)[:, None]
    grads["v.Wout"][...] = v_acts[-1].T @ d_value
    grads["v.bout"][...] = d_value.sum(axis=0)
    _backprop_trunk(params, "v", v_acts, d_value @ params["v.Wout"].T, grads)
    return float(loss), grads


def grad(params: PolicyParams, obs: np.ndarray, head_loss: HeadLoss) -> PolicyParams:
    return value_and_grad(params, obs, head_loss)[1]


def loss_value(params: PolicyParams, obs: np.ndarray, head_loss: HeadLoss) -> float:
    return float(head_loss(forward(params, obs))[0])


def finite_diff_check(params: PolicyParams, obs: np.ndarray, head_loss: HeadLoss, probes: int = 20,
                      seed: int = 0, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients on random coordinates.

    If ``head_loss`` has a ``per_sample(out)`` method returning per-row terms that
    sum to the loss, the difference is taken term by term before summation, so
    rounding of the (mostly unchanged) total does not swamp small gradients.
    """
    g = grad(params, obs, head_loss).flat
    per_sample = getattr(head_loss, "per_sample", None)

    def delta(plus: PolicyParams, minus: PolicyParams) -> float:
        if per_sample is None:
            return loss_value(plus, obs, head_loss) - loss_value(minus, obs, head_loss)
        return math.fsum(per_sample(forward(plus, obs)) - per_sample(forward(minus, obs)))

    rng = np.random.default_rng(seed)
    idx = rng.choice(params.arch.size, size=min(probes, params.arch.size), replace=False)
    worst = 0.0
    for i in idx:
        plus, minus = params.flat.copy(), params.flat.copy()
        plus[i] += h
        minus[i] -= h
        g_fd = delta(params.with_flat(plus), params.with_flat(minus)) / (2.0 * h)
        worst = max(worst, abs(g[i] - g_fd) / max(1e-8, abs(g_fd)))
    return worst


def check_gradient(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray, probes: int = 20,
                   seed: int = 0, h: float = 1e-6) -> float:
    """Same relative-error probe for an arbitrary ``fn(x) -> (loss, grad)`` on a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = fn(x)[1]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in rng.choice(x.size, size=min(probes, x.size), replace=False):
        plus, minus = x.copy(), x.copy()
        plus[i] += h
        minus[i] -= h
        g_fd = (fn(plus)[0] - fn(minus)[0]) / (2.0 * h)
        worst = max(worst, abs(g[i] - g_fd) / max(1e-8, abs(g_fd)))
    return worst


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size))


def sgd_adam_update(params: PolicyParams, grads: PolicyParams, state: AdamState,
                    lr: float) -> tuple[PolicyParams, AdamState]:
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads.flat
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads.flat ** 2
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    flat = params.flat - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    ls = params.log_std_slice
    flat[ls] = np.clip(flat[ls], LOG_STD_MIN, LOG_STD_MAX)
    if not np.all(np.isfinite(flat)):
        raise PolicyError("parameters became non-finite")
    return params.with_flat(flat), AdamState(m, v, t, state.beta1, state.beta2, state.eps)


# -- checkpoints -------------------------------------------------------------

_HEADER = struct.Struct("<4sIIII")


def checkpoint_bytes(params: PolicyParams) -> bytes:
    arch = params.arch
    payload = params.flat.astype("<f8").tobytes()
    head = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, arch.obs_dim, arch.act_dim, len(arch.hidden))
    widths = struct.pack(f"<{len(arch.hidden)}I", *arch.hidden)
    return head + widths + payload + struct.pack("<I", zlib.crc32(payload))


def parse_checkpoint(blob: bytes) -> tuple[PolicyParams, Architecture]:
    if len(blob) < _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, obs_dim, act_dim, n_hidden = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = _HEADER.size
    if len(blob) < off + 4 * n_hidden:
        raise CheckpointError("truncated checkpoint header")
    hidden = struct.unpack_from(f"<{n_hidden}I", blob, off)
    off += 4 * n_hidden
    try:
        arch = Architecture(obs_dim, act_dim, tuple(hidden))
    except PolicyError as e:
        raise CheckpointError(f"invalid architecture in checkpoint: {e}") from None
    payload_len = len(blob) - off - 4
    if payload_len < 0:
        raise CheckpointError("truncated checkpoint")
    if payload_len != 8 * arch.size:
        raise CheckpointError(
            f"dimension mismatch: payload has {payload_len} bytes, architecture needs {8 * arch.size}")
    payload = blob[off:off + payload_len]
    (crc,) = struct.unpack_from("<I", blob, off + payload_len)
    if crc != zlib.crc32(payload):
        raise CheckpointError("checkpoint CRC mismatch")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return PolicyParams(arch, flat), arch


def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params))
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected: Architecture | None = None) -> tuple[PolicyParams, Architecture]:
    params, arch = parse_checkpoint(Path(path).read_bytes())
    if expected is not None and arch != expected:
        raise CheckpointError(f"dimension mismatch: checkpoint has {arch}, expected {expected}")
    return params, arch
