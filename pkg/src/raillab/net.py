"""FC128 -> FC64 -> LSTM64 -> FC64 actor-critic in plain numpy.

Forward pass, truncated backpropagation through time for the advantage
actor-critic loss, shared RMSProp, and a binary checkpoint format.
"""

from __future__ import annotations

import io
import json
import struct
import threading
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from raillab.errors import ReplayError, TrainingFault

HIDDEN = (128, 64, 64)
LSTM_SIZE = 64
CKPT_MAGIC = b"RLCKPT"
CKPT_VERSION = 1


class LstmState(NamedTuple):
    hidden: np.ndarray
    cell: np.ndarray


def zero_state(size=LSTM_SIZE, batch=None) -> LstmState:
    shape = (size,) if batch is None else (batch, size)
    return LstmState(np.zeros(shape), np.zeros(shape))


def param_names(use_lstm=True):
    names = ["W1", "b1", "W2", "b2"]
    if use_lstm:
        names += ["Wl", "bl"]
    return names + ["W3", "b3", "Wp", "bp", "Wv", "bv"]


@dataclass
class NetworkParams:
    input_dim: int
    n_actions: int
    tensors: dict
    use_lstm: bool = True

    @property
    def names(self):
        return param_names(self.use_lstm)

    @property
    def lstm_size(self):
        return self.tensors["bl"].shape[0] // 4 if self.use_lstm else 0

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.input_dim, self.n_actions,
            {k: v.copy() for k, v in self.tensors.items()}, self.use_lstm,
        )

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def check_finite(self):
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise TrainingFault(f"parameter {k} holds non-finite values")


def shapes(input_dim, n_actions, use_lstm=True, hidden=HIDDEN):
    h1, h2, h3 = hidden
    out = {"W1": (input_dim, h1), "b1": (h1,), "W2": (h1, h2), "b2": (h2,)}
    if use_lstm:
        out["Wl"] = (h2 + LSTM_SIZE, 4 * LSTM_SIZE)
        out["bl"] = (4 * LSTM_SIZE,)
        trunk = LSTM_SIZE
    else:
        trunk = h2
    out.update({
        "W3": (trunk, h3), "b3": (h3,),
        "Wp": (h3, n_actions), "bp": (n_actions,),
        "Wv": (h3, 1), "bv": (1,),
    })
    return out


def init_params(input_dim, n_actions, seed, use_lstm=True, gain=1.0) -> NetworkParams:
    """Uniform +-1/sqrt(fan_in) weights, zero biases, forget-gate bias 1.

    ``gain`` widens the bound of every non-recurrent weight matrix; sqrt(6)
    gives the variance-preserving bound for rectifier layers.
    """
    if input_dim < 1 or n_actions < 1:
        raise ValueError("input_dim and n_actions must be positive")
    if gain <= 0:
        raise ValueError("gain must be positive")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in shapes(input_dim, n_actions, use_lstm).items():
        if name.startswith("W"):
            bound = (1.0 if name == "Wl" else gain) / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    if use_lstm:
        tensors["bl"][LSTM_SIZE:2 * LSTM_SIZE] = 1.0
    return NetworkParams(input_dim, n_actions, tensors, use_lstm)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(logits, mask=None):
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _lstm_cell(p, x, h_prev, c_prev):
    H = h_prev.shape[-1]
    z = np.concatenate([x, h_prev], axis=-1) @ p["Wl"] + p["bl"]
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    o = _sigmoid(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return o * tc, c, (i, f, o, g, tc)


def forward(params: NetworkParams, obs, state: LstmState = None, mask=None):
    """One decision step. Works on a single vector or a batch of rows.

    Returns ``(action_probs, value, new_state)``.
    """
    p = params.tensors
    x = np.asarray(obs, dtype=np.float64)
    h1 = np.maximum(x @ p["W1"] + p["b1"], 0.0)
    h2 = np.maximum(h1 @ p["W2"] + p["b2"], 0.0)
    if params.use_lstm:
        if state is None:
            state = zero_state(params.lstm_size, None if x.ndim == 1 else x.shape[0])
        h, c, _ = _lstm_cell(p, h2, state.hidden, state.cell)
        new_state = LstmState(h, c)
    else:
        h, new_state = h2, state
    h3 = np.maximum(h @ p["W3"] + p["b3"], 0.0)
    probs = _softmax(h3 @ p["Wp"] + p["bp"], mask)
    value = (h3 @ p["Wv"] + p["bv"])[..., 0]
    if not (np.all(np.isfinite(probs)) and np.all(np.isfinite(value))):
        raise TrainingFault("non-finite network output")
    return probs, value, new_state


@dataclass
class Trajectory:
    """One agent's decision segment, consumed by ``a3c_gradients``."""

    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    init_state: LstmState = None
    bootstrap: float = 0.0

    def __len__(self):
        return len(self.actions)

    def append(self, obs, action, mask=None):
        self.obs.append(obs)
        self.actions.append(int(action))
        self.rewards.append(0.0)
        self.dones.append(False)
        self.masks.append(mask)


def discounted_returns(rewards, dones, bootstrap, gamma):
    R = 0.0 if dones[-1] else float(bootstrap)
    out = np.zeros(len(rewards))
    for t in range(len(rewards) - 1, -1, -1):
        if dones[t]:
            R = 0.0
        R = rewards[t] + gamma * R
        out[t] = R
    return out


def a3c_gradients(params: NetworkParams, traj: Trajectory, gamma=0.99, value_coef=0.5, entropy_coef=0.01):
    """Gradients of the actor-critic loss over one segment.

    loss = sum_t -log pi(a_t|s_t) * A_t + value_coef * (R_t - V_t)^2
           - entropy_coef * H(pi(.|s_t))
    with A_t = R_t - V_t held constant in the policy term.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    T = len(traj)
    if T == 0:
        raise ValueError("empty trajectory")
    p = params.tensors
    X = np.asarray(traj.obs, dtype=np.float64)
    acts = np.asarray(traj.actions)
    if any(m is not None for m in traj.masks):
        mask = np.array([np.ones(params.n_actions, bool) if m is None else m for m in traj.masks])
    else:
        mask = None
    R = discounted_returns(traj.rewards, traj.dones, traj.bootstrap, gamma)

    # forward, time-vectorized outside the recurrence
    a1 = X @ p["W1"] + p["b1"]
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ p["W2"] + p["b2"]
    h2 = np.maximum(a2, 0.0)
    if params.use_lstm:
        H = params.lstm_size
        state = traj.init_state or zero_state(H)
        hs = np.zeros((T + 1, H))
        cs = np.zeros((T + 1, H))
        hs[0], cs[0] = state.hidden, state.cell
        gates = []
        for t in range(T):
            hs[t + 1], cs[t + 1], cache = _lstm_cell(p, h2[t], hs[t], cs[t])
            gates.append(cache)
        trunk = hs[1:]
    else:
        trunk = h2
    a3 = trunk @ p["W3"] + p["b3"]
    h3 = np.maximum(a3, 0.0)
    logits = h3 @ p["Wp"] + p["bp"]
    probs = _softmax(logits, mask)
    values = (h3 @ p["Wv"] + p["bv"])[:, 0]

    adv = R - values
    with np.errstate(divide="ignore"):
        logp = np.where(probs > 0, np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    entropy = -(probs * logp).sum(axis=1)
    chosen = probs[np.arange(T), acts]
    if np.any(chosen <= 0):
        raise TrainingFault("trajectory contains an action with zero probability")
    policy_loss = -np.sum(np.log(chosen) * adv)
    value_loss = value_coef * np.sum(adv ** 2)
    total = policy_loss + value_loss - entropy_coef * entropy.sum()

    # backward
    onehot = np.zeros_like(probs)
    onehot[np.arange(T), acts] = 1.0
    dlogits = (probs - onehot) * adv[:, None]
    dlogits += entropy_coef * probs * (logp + entropy[:, None])
    dvalues = -2.0 * value_coef * adv
    g = {}
    g["Wp"] = h3.T @ dlogits
    g["bp"] = dlogits.sum(axis=0)
    g["Wv"] = h3.T @ dvalues[:, None]
    g["bv"] = np.array([dvalues.sum()])
    dh3 = dlogits @ p["Wp"].T + dvalues[:, None] @ p["Wv"].T
    da3 = dh3 * (a3 > 0)
    g["W3"] = trunk.T @ da3
    g["b3"] = da3.sum(axis=0)
    dtrunk = da3 @ p["W3"].T
    if params.use_lstm:
        H = params.lstm_size
        dh2 = np.zeros_like(h2)
        dWl = np.zeros_like(p["Wl"])
        dbl = np.zeros_like(p["bl"])
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        n_in = h2.shape[1]
        for t in range(T - 1, -1, -1):
            i, f, o, gg, tc = gates[t]
            dh = dtrunk[t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc ** 2) + dc_next
            dz = np.concatenate([
                dc * gg * i * (1.0 - i),
                dc * cs[t] * f * (1.0 - f),
                do * o * (1.0 - o),
                dc * i * (1.0 - gg ** 2),
            ])
            xin = np.concatenate([h2[t], hs[t]])
            dWl += np.outer(xin, dz)
            dbl += dz
            dxin = p["Wl"] @ dz
            dh2[t] = dxin[:n_in]
            dh_next = dxin[n_in:]
            dc_next = dc * f
        g["Wl"], g["bl"] = dWl, dbl
    else:
        dh2 = dtrunk
    da2 = dh2 * (a2 > 0)
    g["W2"] = h1.T @ da2
    g["b2"] = da2.sum(axis=0)
    da1 = (da2 @ p["W2"].T) * (a1 > 0)
    g["W1"] = X.T @ da1
    g["b1"] = da1.sum(axis=0)

    for k, v in g.items():
        if not np.all(np.isfinite(v)):
            raise TrainingFault(f"non-finite gradient in {k}")
    diagnostics = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy.mean()),
        "loss": float(total),
        "returns": R,
    }
    return g, diagnostics


# -- optimisation ------------------------------------------------------------

RMS_DECAY = 0.99
RMS_EPS = 1e-5
CLIP_NORM = 40.0


@dataclass
class RMSPropState:
    square_avg: dict

    @classmethod
    def for_params(cls, params: NetworkParams) -> "RMSPropState":
        return cls(params.zeros_like())


def clip_by_global_norm(grads, max_norm=CLIP_NORM):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: v * scale for k, v in grads.items()}, norm
    return grads, norm


def _rms_tensor(theta, sq, grad, lr, decay, eps):
    sq *= decay
    sq += (1.0 - decay) * grad * grad
    theta -= lr * grad / np.sqrt(sq + eps)


def apply_update(shared: NetworkParams, grads, optimizer_state: RMSPropState, lr,
                 decay=RMS_DECAY, eps=RMS_EPS, clip=CLIP_NORM):
    """RMSProp step in place, after clipping the global gradient norm."""
    grads, _ = clip_by_global_norm(grads, clip)
    for k, theta in shared.tensors.items():
        _rms_tensor(theta, optimizer_state.square_avg[k], grads[k], lr, decay, eps)


class SharedModel:
    """Parameter store shared by asynchronous workers.

    Each tensor is read and updated under its own lock, so a snapshot can mix
    tensors from different updates but never sees a half-written tensor.
    """

    def __init__(self, params: NetworkParams, lr, decay=RMS_DECAY, eps=RMS_EPS, clip=CLIP_NORM):
        self.params = params
        self.optimizer = RMSPropState.for_params(params)
        self.lr, self.decay, self.eps, self.clip = lr, decay, eps, clip
        self._locks = {k: threading.Lock() for k in params.tensors}
        self.updates = 0
        self._count_lock = threading.Lock()

    def snapshot(self) -> NetworkParams:
        tensors = {}
        for k, v in self.params.tensors.items():
            with self._locks[k]:
                tensors[k] = v.copy()
        return NetworkParams(self.params.input_dim, self.params.n_actions, tensors, self.params.use_lstm)

    def apply(self, grads):
        grads, norm = clip_by_global_norm(grads, self.clip)
        for k, theta in self.params.tensors.items():
            with self._locks[k]:
                _rms_tensor(theta, self.optimizer.square_avg[k], grads[k], self.lr, self.decay, self.eps)
        with self._count_lock:
            self.updates += 1
        return norm


# -- checkpoints --------------------------------------------------------------

def checkpoint_bytes(params: NetworkParams, hyper=None) -> bytes:
    header = {
        "input_dim": params.input_dim,
        "n_actions": params.n_actions,
        "use_lstm": params.use_lstm,
        "tensors": [[k, list(params.tensors[k].shape)] for k in params.names],
        "hyper": hyper or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(blob)))
    buf.write(blob)
    for k in params.names:
        buf.write(np.ascontiguousarray(params.tensors[k], dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, params: NetworkParams, hyper=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, hyper))


def parse_checkpoint(data: bytes):
    if data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ReplayError("not a checkpoint file", "byte 0")
    off = len(CKPT_MAGIC)
    if len(data) < off + 6:
        raise ReplayError("truncated checkpoint header", f"byte {off}")
    version, n = struct.unpack_from("<HI", data, off)
    if version != CKPT_VERSION:
        raise ReplayError(f"unsupported checkpoint version {version}", f"byte {off}")
    off += 6
    try:
        header = json.loads(data[off:off + n])
    except ValueError:
        raise ReplayError("corrupt checkpoint header", f"byte {off}") from None
    off += n
    tensors = {}
    for name, shape in header["tensors"]:
        size = int(np.prod(shape)) * 8
        if len(data) < off + size:
            raise ReplayError(f"truncated tensor {name}", f"byte {off}")
        tensors[name] = np.frombuffer(data[off:off + size], dtype="<f8").reshape(shape).astype(np.float64)
        off += size
    if off != len(data):
        raise ReplayError("trailing bytes after tensors", f"byte {off}")
    params = NetworkParams(header["input_dim"], header["n_actions"], tensors, header["use_lstm"])
    params.check_finite()
    return params, header["hyper"]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
