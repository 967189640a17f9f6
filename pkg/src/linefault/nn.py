"""Small 1-D convolutional classifier with hand-written backpropagation and RMSProp.

Layout: input ``[Re psi; Im psi]`` is viewed as 2 channels x n buses, then
conv1d -> tanh -> conv1d -> tanh -> flatten -> dense -> tanh -> dense -> softmax.
Convolutions use stride 1 and "same" zero padding (cross-correlation convention).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._util import read_records, write_records

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-30
CHECKPOINT_MAGIC = b"LFCK"
CHECKPOINT_FORMAT = "linefault-checkpoint/1"
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "dense1_w", "dense1_b", "dense2_w", "dense2_b")


@dataclass(frozen=True)
class NetConfig:
    n: int
    m: int
    channels1: int = 8
    channels2: int = 8
    kernel: int = 5
    hidden: int = 128

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd for same padding")

    @property
    def n_classes(self) -> int:
        return self.m + 1

    def shapes(self) -> dict[str, tuple[int, ...]]:
        c1, c2, k = self.channels1, self.channels2, self.kernel
        return {
            "conv1_w": (c1, 2, k), "conv1_b": (c1,),
            "conv2_w": (c2, c1, k), "conv2_b": (c2,),
            "dense1_w": (c2 * self.n, self.hidden), "dense1_b": (self.hidden,),
            "dense2_w": (self.hidden, self.n_classes), "dense2_b": (self.n_classes,),
        }


class ModelParams:
    """Named weight tensors bound to a :class:`NetConfig`."""

    def __init__(self, config: NetConfig, arrays: dict[str, np.ndarray]):
        shapes = config.shapes()
        for name in PARAM_NAMES:
            if arrays[name].shape != shapes[name]:
                raise ValueError(f"{name}: shape {arrays[name].shape}, expected {shapes[name]}")
        self.config = config
        self.arrays = {name: np.asarray(arrays[name], dtype=float) for name in PARAM_NAMES}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_NAMES])

    @classmethod
    def zeros(cls, config: NetConfig) -> ModelParams:
        return cls(config, {k: np.zeros(s) for k, s in config.shapes().items()})

    @classmethod
    def init(cls, config: NetConfig, rng: np.random.Generator) -> ModelParams:
        """Glorot-uniform weights, zero biases."""
        arrays = {}
        for name, shape in config.shapes().items():
            if name.endswith("_b"):
                arrays[name] = np.zeros(shape)
                continue
            if name.startswith("conv"):
                fan_in, fan_out = shape[1] * shape[2], shape[0] * shape[2]
            else:
                fan_in, fan_out = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
        return cls(config, arrays)


def _conv_forward(x, w, b):
    pad = w.shape[2] // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, w.shape[2], axis=2)  # (B, Cin, n, K)
    return np.einsum("bcnk,ock->bon", win, w, optimize=True) + b[None, :, None], win


def _conv_backward(dout, win, w):
    K = w.shape[2]
    pad = K // 2
    n = dout.shape[2]
    dw = np.einsum("bon,bcnk->ock", dout, win, optimize=True)
    db = dout.sum(axis=(0, 2))
    dwin = np.einsum("bon,ock->bcnk", dout, w, optimize=True)
    dxp = np.zeros((dout.shape[0], w.shape[1], n + 2 * pad))
    for k in range(K):
        dxp[:, :, k:k + n] += dwin[..., k]
    return dxp[:, :, pad:pad + n], dw, db


def _as_batch(features: np.ndarray, n: int) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != 2 * n:
        raise ValueError(f"feature length {X.shape[1]} does not match 2n = {2 * n}")
    return X


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _forward(params: ModelParams, X: np.ndarray):
    n = params.config.n
    x = X.reshape(len(X), 2, n)
    z1, win1 = _conv_forward(x, params["conv1_w"], params["conv1_b"])
    a1 = np.tanh(z1)
    z2, win2 = _conv_forward(a1, params["conv2_w"], params["conv2_b"])
    a2 = np.tanh(z2)
    flat = a2.reshape(len(X), -1)
    h = np.tanh(flat @ params["dense1_w"] + params["dense1_b"])
    logits = h @ params["dense2_w"] + params["dense2_b"]
    return logits, (win1, a1, win2, a2, flat, h)


def forward(params: ModelParams, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits and softmax probabilities; a 1-D input gives 1-D outputs."""
    X = _as_batch(features, params.config.n)
    logits, _ = _forward(params, X)
    probs = softmax(logits)
    if np.ndim(features) == 1:
        return logits[0], probs[0]
    return logits, probs


def cross_entropy(target: np.ndarray, probabilities: np.ndarray) -> float:
    """``-sum t_i log p_i``; zero for an all-zero target."""
    target = np.asarray(target, dtype=float)
    p = np.asarray(probabilities, dtype=float)
    support = target > 0
    if not support.any():
        return 0.0
    ps = p[support]
    if np.any(ps < LOG_FLOOR):
        log.warning("probability below %g at a supported target index; log clamped", LOG_FLOOR)
    return float(-np.sum(target[support] * np.log(np.maximum(ps, LOG_FLOOR))))


def blended_loss(y, y_hat, probabilities, epsilon_mix: float) -> float:
    """``(1 - eps) * CE(y, p) + eps * CE(y_hat, p)``."""
    if not 0.0 <= epsilon_mix <= 1.0:
        raise ValueError("epsilon_mix must lie in [0, 1]")
    return (1.0 - epsilon_mix) * cross_entropy(y, probabilities) + epsilon_mix * cross_entropy(y_hat, probabilities)


def batch_loss(logits: np.ndarray, Y: np.ndarray, Y_hat: np.ndarray, epsilon_mix: float) -> float:
    """Mean blended loss computed from logits via log-softmax."""
    lp = log_softmax(logits)
    per = -(1.0 - epsilon_mix) * np.sum(Y * lp, axis=1) - epsilon_mix * np.sum(Y_hat * lp, axis=1)
    return float(np.mean(per))


def loss_and_gradients(params: ModelParams, features, Y, Y_hat, epsilon_mix: float):
    """Mean blended loss over the batch and its exact gradient for every parameter."""
    cfg = params.config
    X = _as_batch(features, cfg.n)
    Y = np.atleast_2d(Y)
    Y_hat = np.atleast_2d(Y_hat)
    B = len(X)
    logits, (win1, a1, win2, a2, flat, h) = _forward(params, X)
    loss = batch_loss(logits, Y, Y_hat, epsilon_mix)
    p = softmax(logits)
    mass = Y_hat.sum(axis=1, keepdims=True)
    dlogits = ((1.0 - epsilon_mix) * (p - Y) + epsilon_mix * (p * mass - Y_hat)) / B

    g = {}
    g["dense2_w"] = h.T @ dlogits
    g["dense2_b"] = dlogits.sum(axis=0)
    dz3 = (dlogits @ params["dense2_w"].T) * (1.0 - h * h)
    g["dense1_w"] = flat.T @ dz3
    g["dense1_b"] = dz3.sum(axis=0)
    da2 = (dz3 @ params["dense1_w"].T).reshape(a2.shape)
    dz2 = da2 * (1.0 - a2 * a2)
    da1, g["conv2_w"], g["conv2_b"] = _conv_backward(dz2, win2, params["conv2_w"])
    dz1 = da1 * (1.0 - a1 * a1)
    _, g["conv1_w"], g["conv1_b"] = _conv_backward(dz1, win1, params["conv1_w"])
    return loss, ModelParams(cfg, g)


def backward(params: ModelParams, features, y, y_hat, epsilon_mix: float) -> ModelParams:
    return loss_and_gradients(params, features, y, y_hat, epsilon_mix)[1]


@dataclass
class OptimizerState:
    accumulators: dict[str, np.ndarray]
    rho: float = 0.9
    learning_rate: float = 1e-3
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams, learning_rate: float = 1e-3, rho: float = 0.9,
                   eps: float = 1e-8) -> OptimizerState:
        return cls({k: np.zeros_like(v) for k, v in params.arrays.items()}, rho, learning_rate, eps)


def rmsprop_step(params: ModelParams, gradients: ModelParams, state: OptimizerState):
    """One RMSProp update. Returns new ``(params, state)``; inputs are not modified."""
    new_params = {}
    new_acc = {}
    for name in PARAM_NAMES:
        g = gradients[name]
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in layer {name}")
        acc = state.rho * state.accumulators[name] + (1.0 - state.rho) * g * g
        new_acc[name] = acc
        new_params[name] = params[name] - state.learning_rate * g / np.sqrt(acc + state.eps)
    return (ModelParams(params.config, new_params),
            OptimizerState(new_acc, state.rho, state.learning_rate, state.eps, state.step + 1))


def predict(params: ModelParams, X: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Class probabilities for a feature matrix, evaluated in fixed-order chunks."""
    out = [forward(params, X[i:i + batch_size])[1] for i in range(0, len(X), batch_size)]
    return np.vstack(out) if out else np.zeros((0, params.config.n_classes))


def save_checkpoint(path, params: ModelParams, state: OptimizerState | None = None, *,
                    config_digest: str = "", rng_state: dict | None = None, extra: dict | None = None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "net": asdict(params.config),
        "config_digest": config_digest,
        "rng_state": rng_state,
        "extra": extra or {},
        "optimizer": None if state is None else
        {"rho": state.rho, "learning_rate": state.learning_rate, "eps": state.eps, "step": state.step},
    }
    arrays = {f"param/{k}": params[k] for k in PARAM_NAMES}
    if state is not None:
        arrays.update({f"acc/{k}": state.accumulators[k] for k in PARAM_NAMES})
    write_records(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path) -> tuple[ModelParams, OptimizerState | None, dict]:
    header, arrays = read_records(path, CHECKPOINT_MAGIC)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    cfg = NetConfig(**header["net"])
    params = ModelParams(cfg, {k: arrays[f"param/{k}"] for k in PARAM_NAMES})
    state = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        state = OptimizerState({k: arrays[f"acc/{k}"] for k in PARAM_NAMES},
                               o["rho"], o["learning_rate"], o["eps"], o["step"])
    return params, state, header
