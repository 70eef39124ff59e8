"""A small 1-D convolutional regressor with hand-written backpropagation.

Layout: conv(1->C, k) -> ReLU -> conv(C->C, k) -> ReLU -> global average pool ->
concat static features -> dense -> scalar, added to the last observed value (the
network learns the change from the most recent eGFR). Convolutions are "valid" (no padding),
so a sequence of length L needs L >= 2k - 1. Histories are left-padded with their
earliest value before they reach the network, never with zeros.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from egfrlmm.errors import ConfigError, ShapeError, TrainingError, ValidationError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    length: int
    n_static: int
    channels: int = 8
    kernel: int = 3

    def __post_init__(self):
        if self.kernel < 1 or self.channels < 1:
            raise ConfigError("kernel and channels must be >= 1")
        if self.length < 2 * self.kernel - 1:
            raise ShapeError(
                f"sequence length {self.length} too short for two valid convolutions of width {self.kernel}"
            )


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 300

    def __post_init__(self):
        if not self.learning_rate > 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need learning_rate > 0 and 0 <= momentum < 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "dense_w", "dense_b")


def init_params(arch: ArchConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    c, k = arch.channels, arch.kernel
    return {
        "conv1_w": rng.normal(0.0, np.sqrt(2.0 / k), size=(c, 1, k)),
        "conv1_b": np.zeros(c),
        "conv2_w": rng.normal(0.0, np.sqrt(2.0 / (c * k)), size=(c, c, k)),
        "conv2_b": np.zeros(c),
        "dense_w": rng.normal(0.0, np.sqrt(1.0 / (c + arch.n_static)), size=c + arch.n_static),
        "dense_b": np.zeros(()),
    }


def forward(params: dict[str, np.ndarray], seq: np.ndarray, static: np.ndarray):
    """Batch forward pass; returns (outputs of shape (B,), cache for ``backward``)."""
    w1, b1 = params["conv1_w"], params["conv1_b"]
    w2, b2 = params["conv2_w"], params["conv2_b"]
    k = w1.shape[2]
    win1 = sliding_window_view(seq, k, axis=1)  # (B, L1, k)
    z1 = np.einsum("btk,ck->bct", win1, w1[:, 0, :]) + b1[None, :, None]
    a1 = np.maximum(z1, 0.0)
    win2 = sliding_window_view(a1, k, axis=2)  # (B, C, L2, k)
    z2 = np.einsum("bitk,oik->bot", win2, w2) + b2[None, :, None]
    a2 = np.maximum(z2, 0.0)
    pooled = a2.mean(axis=2)
    h = np.concatenate([pooled, static], axis=1)
    out = h @ params["dense_w"] + params["dense_b"]
    cache = {"win1": win1, "z1": z1, "win2": win2, "z2": z2, "pooled": pooled, "h": h}
    return out, cache


def backward(params: dict[str, np.ndarray], cache: dict, dout: np.ndarray) -> dict[str, np.ndarray]:
    w2 = params["conv2_w"]
    c, _, k = w2.shape
    z1, z2 = cache["z1"], cache["z2"]
    l2 = z2.shape[2]

    grads = {"dense_w": cache["h"].T @ dout, "dense_b": np.asarray(dout.sum())}
    dpooled = np.outer(dout, params["dense_w"])[:, :c]
    dz2 = np.repeat(dpooled[:, :, None] / l2, l2, axis=2) * (z2 > 0)
    grads["conv2_w"] = np.einsum("bot,bitk->oik", dz2, cache["win2"])
    grads["conv2_b"] = dz2.sum(axis=(0, 2))

    da1 = np.zeros_like(z1)
    for j in range(k):
        da1[:, :, j : j + l2] += np.einsum("bot,oi->bit", dz2, w2[:, :, j])
    dz1 = da1 * (z1 > 0)
    grads["conv1_w"] = np.einsum("bct,btk->ck", dz1, cache["win1"])[:, None, :]
    grads["conv1_b"] = dz1.sum(axis=(0, 2))
    return grads


def loss_and_grads(params, seq, static, y):
    """Mean squared error and its gradient with respect to every parameter."""
    out, cache = forward(params, seq, static)
    diff = out - y
    loss = float(np.mean(diff**2))
    grads = backward(params, cache, 2.0 * diff / len(y))
    return loss, grads


@dataclass
class Scaler:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, axis=0) -> "Scaler":
        mean = np.mean(x, axis=axis)
        scale = np.std(x, axis=axis)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(np.asarray(mean, dtype=np.float64), np.asarray(scale, dtype=np.float64))

    def transform(self, x):
        return (x - self.mean) / self.scale

    def inverse(self, x):
        return x * self.scale + self.mean


@dataclass
class CNNModel:
    arch: ArchConfig
    params: dict[str, np.ndarray]
    seq_scaler: Scaler
    static_scaler: Scaler
    target_scaler: Scaler
    history: list[float] = field(default_factory=list)

    def predict(self, seq: np.ndarray, static: np.ndarray) -> np.ndarray:
        seq = np.asarray(seq, dtype=np.float64)
        static = np.asarray(static, dtype=np.float64)
        if seq.ndim == 1:
            seq, static = seq[None, :], static[None, :]
        if seq.shape[1] != self.arch.length:
            raise ShapeError(f"expected sequences of length {self.arch.length}, got {seq.shape[1]}")
        if static.shape[1] != self.arch.n_static:
            raise ShapeError(f"expected {self.arch.n_static} static features, got {static.shape[1]}")
        out, _ = forward(self.params, self.seq_scaler.transform(seq), self.static_scaler.transform(static))
        return seq[:, -1] + self.target_scaler.inverse(out)

    def to_dict(self) -> dict:
        def enc(s: Scaler):
            return {"mean": np.asarray(s.mean).tolist(), "scale": np.asarray(s.scale).tolist()}

        return {
            "format_version": FORMAT_VERSION,
            "kind": "cnn1d",
            "arch": asdict(self.arch),
            "params": {k: v.tolist() for k, v in self.params.items()},
            "seq_scaler": enc(self.seq_scaler),
            "static_scaler": enc(self.static_scaler),
            "target_scaler": enc(self.target_scaler),
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CNNModel":
        if d.get("format_version") != FORMAT_VERSION or d.get("kind") != "cnn1d":
            raise ValidationError("not a cnn1d artifact of a supported version")

        def dec(s):
            return Scaler(np.asarray(s["mean"], dtype=np.float64), np.asarray(s["scale"], dtype=np.float64))

        return cls(
            arch=ArchConfig(**d["arch"]),
            params={k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()},
            seq_scaler=dec(d["seq_scaler"]),
            static_scaler=dec(d["static_scaler"]),
            target_scaler=dec(d["target_scaler"]),
            history=list(d["history"]),
        )


def cnn_train(
    seq: np.ndarray,
    static: np.ndarray,
    y: np.ndarray,
    arch: ArchConfig | None = None,
    optim: OptimizerConfig | None = None,
    seed: int = 0,
    *,
    channels: int = 8,
    kernel: int = 3,
) -> CNNModel:
    """Mini-batch SGD with momentum on standardized inputs and change-from-last targets.

    ``history`` records the full-training-set loss (standardized units) after each epoch.
    """
    seq = np.asarray(seq, dtype=np.float64)
    static = np.asarray(static, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 1:
        raise ValidationError("cnn needs at least one training window")
    if seq.ndim != 2 or static.ndim != 2 or not len(seq) == len(static) == len(y):
        raise ShapeError("seq, static and y must have matching first dimensions")
    arch = arch or ArchConfig(length=seq.shape[1], n_static=static.shape[1], channels=channels, kernel=kernel)
    if seq.shape[1] != arch.length or static.shape[1] != arch.n_static:
        raise ShapeError("input shapes do not match the architecture")
    optim = optim or OptimizerConfig()

    rng = np.random.default_rng(seed)
    params = init_params(arch, rng)
    seq_scaler = Scaler.fit(seq.ravel())
    static_scaler = Scaler.fit(static, axis=0)
    delta = y - seq[:, -1]
    target_scaler = Scaler.fit(delta)
    xs, xt, yt = seq_scaler.transform(seq), static_scaler.transform(static), target_scaler.transform(delta)

    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    history = []
    n = len(yt)
    for epoch in range(optim.epochs):
        order = rng.permutation(n)
        for start in range(0, n, optim.batch_size):
            b = order[start : start + optim.batch_size]
            loss, grads = loss_and_grads(params, xs[b], xt[b], yt[b])
            if not np.isfinite(loss):
                gmax = max(float(np.max(np.abs(g))) for g in grads.values())
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: loss={loss}, "
                    f"learning_rate={optim.learning_rate}, max|grad|={gmax}"
                )
            for name in PARAM_NAMES:
                velocity[name] = optim.momentum * velocity[name] - optim.learning_rate * grads[name]
                params[name] = params[name] + velocity[name]
        full, _ = forward(params, xs, xt)
        epoch_loss = float(np.mean((full - yt) ** 2))
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"non-finite loss after epoch {epoch}: {epoch_loss}")
        history.append(epoch_loss)

    return CNNModel(arch, params, seq_scaler, static_scaler, target_scaler, history)


def cnn_predict(model: CNNModel, seq: np.ndarray, static: np.ndarray) -> np.ndarray | float:
    out = model.predict(seq, static)
    return float(out[0]) if np.asarray(seq).ndim == 1 else out
