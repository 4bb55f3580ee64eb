"""Capsule network over 1 x W fingerprint images, and its training loop.

Pipeline: conv1d + ReLU -> primary capsules (linear projection of all conv
features, squashed) -> outer capsules via dynamic routing -> softmax over
scaled capsule lengths -> argmax.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from sentinel import numerics as nx

if TYPE_CHECKING:
    from sentinel.adversarial import AttackConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    width: int  # number of APs (image width)
    n_classes: int
    conv_filters: int = 32
    conv_kernel: int = 9
    pc_capsules: int = 8
    pc_dim: int = 32
    oc_dim: int = 32
    routing_iters: int = 3
    # softmax temperature applied to capsule lengths (which live in [0, 1))
    score_scale: float = 20.0
    epochs: int = 300
    lr: float = 0.001
    batch_size: int = 32
    init_seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.n_classes < 1:
            raise ConfigError("width and n_classes must be positive")
        if self.conv_kernel < 1 or self.conv_kernel > self.width:
            raise ConfigError(f"conv_kernel {self.conv_kernel} must be in [1, width={self.width}]")
        for name in ("conv_filters", "pc_capsules", "pc_dim", "oc_dim", "routing_iters", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.score_scale <= 0:
            raise ConfigError("score_scale must be positive")

    @property
    def conv_out(self) -> int:
        return self.width - self.conv_kernel + 1

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "F": (self.conv_filters, self.conv_kernel),
            "V": (self.pc_capsules, self.pc_dim, self.conv_out * self.conv_filters),
            "Wt": (self.pc_capsules, self.n_classes, self.oc_dim, self.pc_dim),
        }

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def count_params(config: ModelConfig) -> int:
    F = config.conv_filters * config.conv_kernel
    V = config.pc_capsules * config.pc_dim * config.conv_out * config.conv_filters
    Wt = config.pc_capsules * config.n_classes * config.oc_dim * config.pc_dim
    return F + V + Wt


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform init, seeded by ``config.init_seed``."""
    rng = np.random.default_rng(config.init_seed)
    params = {}
    for name, shape in config.param_shapes().items():
        fan_in = shape[-1]
        bound = 1.0 / math.sqrt(fan_in)
        if name == "V":
            # keeps primary capsules out of the squash's flat region at init
            bound *= 3.0
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


@dataclass
class ForwardTrace:
    con: np.ndarray  # (B, W - k + 1, filters), post-ReLU
    u: np.ndarray  # (B, pc_capsules, pc_dim)
    couplings: list[np.ndarray]  # per routing iteration, (B, pc_capsules, n)
    scores: np.ndarray  # (B, n) capsule lengths
    probs: np.ndarray  # (B, n)


def primary_capsules(con: nx.Tensor, V: nx.Tensor) -> nx.Tensor:
    """u_i = squash(V_i . flatten(con)) for a batch; returns (B, pc, pc_dim)."""
    flat = nx.reshape(con, (con.shape[0], -1))
    return nx.squash(nx.einsum("bf,idf->bid", flat, V))


def route(u: nx.Tensor, Wt: nx.Tensor, iters: int, trace: list | None = None) -> nx.Tensor:
    """Dynamic routing by agreement; returns outer capsule outputs (B, n, oc_dim)."""
    if iters < 1:
        raise ConfigError("routing needs at least one iteration")
    u_hat = nx.capsule_transform(u, Wt)
    batch, n_in, n_out, _ = u_hat.shape
    logits = nx.Tensor(np.zeros((batch, n_in, n_out)))
    v = None
    for it in range(iters):
        c = nx.softmax(logits, axis=2)
        if trace is not None:
            trace.append(c.data)
        v = nx.squash(nx.weighted_vote(c, u_hat))
        if it < iters - 1:
            logits = nx.add(logits, nx.agreement(u_hat, v))
    return v


def predict_from_probs(probs: np.ndarray) -> np.ndarray:
    """Argmax per row; np.argmax already returns the lowest index on ties."""
    return np.argmax(np.atleast_2d(probs), axis=1)


class CapsNet:
    """Parameters plus config; forward passes are pure given both."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        shapes = config.param_shapes()
        if set(self.params) != set(shapes):
            raise ConfigError(f"expected parameters {sorted(shapes)}, got {sorted(self.params)}")
        for k, shape in shapes.items():
            if self.params[k].shape != shape:
                raise ConfigError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")

    def copy(self) -> "CapsNet":
        return CapsNet(self.config, {k: v.copy() for k, v in self.params.items()})

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:  # (1, W, 1) image
            x = x.reshape(1, -1)
        x = np.atleast_2d(x)
        if x.shape[1] != self.config.width:
            raise nx.ShapeError(f"input width {x.shape[1]} != model width {self.config.width}")
        return x

    def build(self, x: nx.Tensor, params: dict[str, nx.Tensor], trace: list | None = None):
        """Recordable forward graph; returns (con, u, scores, probs) tensors."""
        cfg = self.config
        con = nx.relu(nx.conv1d(x, params["F"]))
        u = primary_capsules(con, params["V"])
        v = route(u, params["Wt"], cfg.routing_iters, trace)
        scores = nx.vector_norm(v, axis=-1)
        probs = nx.softmax(nx.mul(scores, cfg.score_scale), axis=-1)
        return con, u, scores, probs

    def forward(self, x) -> ForwardTrace:
        xb = self._check_input(x)
        couplings: list[np.ndarray] = []
        tensors = {k: nx.Tensor(v) for k, v in self.params.items()}
        con, u, scores, probs = self.build(nx.Tensor(xb), tensors, couplings)
        return ForwardTrace(con.data, u.data, couplings, scores.data, probs.data)

    def predict_proba(self, x, batch_size: int = 256) -> np.ndarray:
        xb = self._check_input(x)
        tensors = {k: nx.Tensor(v) for k, v in self.params.items()}
        out = [self.build(nx.Tensor(xb[i : i + batch_size]), tensors)[3].data for i in range(0, len(xb), batch_size)]
        return np.concatenate(out, axis=0)

    def predict(self, x) -> np.ndarray:
        return predict_from_probs(self.predict_proba(x))

    def loss(self, x, labels) -> np.ndarray:
        """Per-sample cross-entropy, no gradients."""
        probs = self.predict_proba(x)
        return nx.sparse_ce(nx.Tensor(probs), labels).data

    def loss_and_grads(self, x, labels, wrt_input: bool = False):
        """Summed CE over the batch with gradients for every parameter.

        Returns (loss, param_grads, input_grad); ``input_grad`` is None unless
        ``wrt_input`` is set.
        """
        xb = nx.Tensor(self._check_input(x))
        tensors = {k: nx.Tensor(v) for k, v in self.params.items()}
        with nx.GradTape() as tape:
            probs = self.build(xb, tensors)[3]
            loss = nx.reduce_sum(nx.sparse_ce(probs, labels))
        names = list(tensors)
        sources = [tensors[k] for k in names] + ([xb] if wrt_input else [])
        grads = tape.gradient(loss, sources)
        param_grads = dict(zip(names, grads[: len(names)]))
        return float(loss.data), param_grads, (grads[-1] if wrt_input else None)

    def input_gradient(self, x, labels) -> np.ndarray:
        """d(sum of CE)/d(input); rows are independent, so each row is that sample's gradient."""
        xb = nx.Tensor(self._check_input(x))
        tensors = {k: nx.Tensor(v) for k, v in self.params.items()}
        with nx.GradTape() as tape:
            loss = nx.reduce_sum(nx.sparse_ce(self.build(xb, tensors)[3], labels))
        return tape.gradient(loss, [xb])[0]


@dataclass
class TrainResult:
    model: CapsNet
    loss_curve: list[float] = field(default_factory=list)


def train(
    model: CapsNet,
    images: np.ndarray,
    labels: Sequence[int],
    adv: "AttackConfig | None" = None,
    seed: int = 0,
    epochs: int | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam on mean CE; with ``adv`` the batch objective is
    clean CE + CE on adversarial examples regenerated from current params."""
    from sentinel.adversarial import Method, generate, make_mask

    if len(images) == 0:
        raise TrainingError("empty training set")
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[1] != model.config.width:
        raise nx.ShapeError(f"training images have width {x.shape[1]}, model expects {model.config.width}")
    if adv is not None and adv.method is Method.NONE:
        adv = None
    model = model.copy()
    cfg = model.config
    opt = nx.Adam(lr=cfg.lr)
    rng = np.random.default_rng(seed)
    mask = None if adv is None else make_mask(cfg.width, adv.phi, adv.mask_seed)
    n_epochs = cfg.epochs if epochs is None else epochs
    curve = []
    for epoch in range(n_epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            loss, grads, _ = model.loss_and_grads(xb, yb)
            if adv is not None:
                x_adv = generate(model, xb, yb, adv, mask)
                adv_loss, adv_grads, _ = model.loss_and_grads(x_adv, yb)
                loss += adv_loss
                grads = {k: grads[k] + adv_grads[k] for k in grads}
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            total += loss
            opt.step(model.params, {k: g / len(idx) for k, g in grads.items()})
        mean = total / len(x)
        curve.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    log.debug("trained %d epochs, final loss %.4f", n_epochs, curve[-1] if curve else float("nan"))
    return TrainResult(model, curve)


def with_overrides(config: ModelConfig, **kwargs) -> ModelConfig:
    return replace(config, **{k: v for k, v in kwargs.items() if v is not None})


# ------------------------------------------------------------ checkpoints
#
# Layout (all integers little-endian):
#   bytes 0..7    magic b"SNTLCKPT"
#   bytes 8..11   uint32 format version (1)
#   bytes 12..15  uint32 header length H
#   bytes 16..16+H  UTF-8 JSON header, keys sorted:
#       {"config": {...ModelConfig fields...}, "config_hash": sha256 hex of the
#        sorted-key JSON of config, "meta": {...}, "tensors": [{"name", "shape"}]}
#   then float64 little-endian tensor data, row-major, in header order.

MAGIC = b"SNTLCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: CapsNet, path, meta: dict | None = None) -> None:
    names = ["F", "V", "Wt"]
    header = {
        "config": model.config.to_dict(),
        "config_hash": model.config.digest(),
        "meta": meta or {},
        "tensors": [{"name": k, "shape": list(model.params[k].shape)} for k in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(FORMAT_VERSION.to_bytes(4, "little"))
        f.write(len(blob).to_bytes(4, "little"))
        f.write(blob)
        for k in names:
            f.write(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[CapsNet, dict]:
    """Read a checkpoint; refuses a config hash that does not match its config
    (or ``expected``, when given)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int.from_bytes(raw[8:12], "little")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    hlen = int.from_bytes(raw[12:16], "little")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
        config = ModelConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    if config.digest() != header.get("config_hash"):
        raise CheckpointError(f"{path}: config hash mismatch")
    if expected is not None and expected.digest() != header["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint was trained with a different config")
    params, pos = {}, 16 + hlen
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data")
        params[t["name"]] = np.frombuffer(raw[pos : pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return CapsNet(config, params), header["meta"]
