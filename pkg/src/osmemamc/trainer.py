"""SGD training of the OSME network under the MAMC objective."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .errors import CorruptFile, EmptyDataset, NonFiniteLoss, NumericOverflow, VersionMismatch
from .mamc import BatchFeatures, LossParts, mamc_loss
from .osme import OsmeConfig, OsmeParams, init_params, osme_forward
from .synth import Dataset, PairBatch, fnv1a64, sample_batch
from .tensor import Tensor


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"          # "sgd" or "sgd_momentum"
    momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    N: int = 5
    lam: float = 0.5
    lr: float = 0.001
    decay_factor: float = 0.96
    decay_interval_epochs: float = 0.6
    epochs: int = 30
    seed: int = 0
    normalize_features: bool = False
    grad_clip: float = 0.0     # global L2 norm cap on the gradient; 0 disables
    osme: OsmeConfig = field(default_factory=OsmeConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_interval_epochs <= 0:
            raise ValueError("decay_interval_epochs must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        if self.N < 1 or self.epochs < 0:
            raise ValueError("N must be >= 1 and epochs >= 0")

    @property
    def P(self) -> int:
        return self.osme.P

    def to_dict(self) -> dict:
        d = asdict(self)
        d["osme"] = self.osme.to_dict()
        return d


def batches_per_epoch(n_images: int, N: int) -> int:
    return max(1, math.ceil(n_images / (2 * N)))


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Step-decayed learning rate: ``lr * decay ** floor(step / interval)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    interval = max(1, math.ceil(cfg.decay_interval_epochs * steps_per_epoch))
    return cfg.lr * cfg.decay_factor ** (step // interval)


def zero_grads(params: OsmeParams) -> None:
    for t in params.values():
        t.zero_grad()


def forward_loss(params: OsmeParams, batch: PairBatch, cfg: TrainConfig) -> tuple[Tensor, LossParts]:
    out = osme_forward(params, Tensor(batch.images), cfg.osme)
    feats = BatchFeatures.from_forward(out.features, batch.labels)
    return mamc_loss(feats, out.logits, batch.labels, cfg.lam, cfg.normalize_features)


def clip_gradients(params: OsmeParams, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the prior norm."""
    norm = math.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in params.values() if t.grad is not None))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


def sgd_update(params: OsmeParams, lr: float, opt: OptimizerConfig,
               velocity: dict[str, np.ndarray]) -> None:
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if opt.kind == "sgd_momentum":
            v = opt.momentum * velocity[name] + g if name in velocity else g.copy()
            velocity[name] = v
            g = v
        t.data = t.data - lr * g


def train_step(params: OsmeParams, batch: PairBatch, cfg: TrainConfig, lr: float,
               velocity: dict[str, np.ndarray] | None = None) -> LossParts:
    """One forward pass, one backward pass, one in-place parameter update."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    zero_grads(params)
    try:
        total, parts = forward_loss(params, batch, cfg)
    except NumericOverflow as exc:
        raise NonFiniteLoss(f"non-finite value in forward pass: {exc}") from exc
    if not math.isfinite(parts.total):
        raise NonFiniteLoss(f"loss is {parts.total}", parts.as_dict())
    T.backward(total)
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NonFiniteLoss(f"non-finite gradient for {name}", parts.as_dict())
    if cfg.grad_clip > 0:
        clip_gradients(params, cfg.grad_clip)
    sgd_update(params, lr, cfg.optimizer, {} if velocity is None else velocity)
    return parts


def predict_logits(params: OsmeParams, images: np.ndarray, cfg: OsmeConfig,
                   chunk: int = 256) -> np.ndarray:
    detached = {k: v.detach() for k, v in params.items()}
    out = [osme_forward(detached, Tensor(images[i: i + chunk]), cfg).logits.data
           for i in range(0, len(images), chunk)]
    return np.concatenate(out, axis=0)


def top1(logits: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptyDataset("no samples to score")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(params: OsmeParams, ds: Dataset, cfg: OsmeConfig) -> float:
    if len(ds) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    return top1(predict_logits(params, ds.images, cfg), ds.labels)


# --- checkpoints -----------------------------------------------------------

MAGIC = b"OSMECKPT"
VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    step: int
    epoch: int
    rng_state: dict
    version: int = VERSION


def _tensor_block(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps({"config": ckpt.config.to_dict(), "step": ckpt.step, "epoch": ckpt.epoch,
                       "rng_state": ckpt.rng_state}, sort_keys=True).encode("utf-8")
    named = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    named += [(f"velocity/{k}", v) for k, v in ckpt.velocity.items()]
    body = MAGIC + struct.pack("<I", ckpt.version) + struct.pack("<I", len(meta)) + meta
    body += struct.pack("<I", len(named)) + b"".join(_tensor_block(n, a) for n, a in named)
    return body + struct.pack("<Q", fnv1a64(body))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    from .config import train_config_from_dict

    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 or raw[: len(MAGIC)] != MAGIC:
        raise CorruptFile(f"{path}: missing checkpoint header")
    body, (stored,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {VERSION}")
    if fnv1a64(body) != stored:
        raise CorruptFile(f"{path}: checksum mismatch")
    pos = len(MAGIC) + 4
    (meta_len,) = struct.unpack_from("<I", body, pos)
    pos += 4
    meta = json.loads(body[pos: pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params, velocity = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos: pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        kind, key = name.split("/", 1)
        (params if kind == "param" else velocity)[key] = arr
    return Checkpoint(train_config_from_dict(meta["config"]), params, velocity,
                      meta["step"], meta["epoch"], meta["rng_state"], version)


# --- the loop --------------------------------------------------------------

class Trainer:
    """Holds parameters, optimizer state and the sampler RNG for one run."""

    def __init__(self, cfg: TrainConfig, train_ds: Dataset, eval_ds: Dataset | None = None):
        self.cfg = cfg
        self.train_ds = train_ds
        self.eval_ds = eval_ds
        self.params = init_params(cfg.osme, np.random.default_rng([cfg.seed, 0]))
        self.velocity: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0
        self.steps_per_epoch = batches_per_epoch(len(train_ds), cfg.N)

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.cfg, {k: v.data.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.velocity.items()},
                          self.step, self.epoch, self.rng.bit_generator.state)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, train_ds: Dataset,
                        eval_ds: Dataset | None = None) -> "Trainer":
        tr = cls(ckpt.config, train_ds, eval_ds)
        for k, v in ckpt.params.items():
            tr.params[k].data = v.copy()
        tr.velocity = {k: v.copy() for k, v in ckpt.velocity.items()}
        tr.rng.bit_generator.state = ckpt.rng_state
        tr.step = ckpt.step
        return tr

    def run_step(self) -> dict:
        lr = lr_at(self.step, self.cfg, self.steps_per_epoch)
        batch = sample_batch(self.train_ds, self.cfg.N, self.rng)
        parts = train_step(self.params, batch, self.cfg, lr, self.velocity)
        record = {"step": self.step, "epoch": self.epoch, "lr": lr,
                  "loss_total": parts.total, "loss_softmax": parts.softmax,
                  "loss_sasc": parts.sasc, "loss_sadc": parts.sadc, "loss_dasc": parts.dasc}
        self.step += 1
        if self.eval_ds is not None and self.step % self.steps_per_epoch == 0:
            record["top1_eval"] = evaluate(self.params, self.eval_ds, self.cfg.osme)
        return record

    def steps(self, until: int | None = None) -> Iterator[dict]:
        stop = self.total_steps if until is None else until
        while self.step < stop:
            yield self.run_step()

    def fit(self, until: int | None = None, on_record: Callable[[dict], None] | None = None) -> list[dict]:
        records = []
        for rec in self.steps(until):
            records.append(rec)
            if on_record is not None:
                on_record(rec)
        return records


def metrics_line(record: dict) -> str:
    return json.dumps(record, sort_keys=False) + "\n"
