"""One-squeeze multi-excitation attention on top of a small conv backbone.

Layout conventions: feature maps are ``(B, H, W, C)`` (a single map may be
passed as ``(H, W, C)``); branches are indexed ``0 .. P-1``; parameters live
in a flat ``OsmeParams`` mapping with stable names so they can be
checkpointed and perturbed one at a time.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import BranchOutOfRange, ShapeMismatch
from .tensor import Tensor

OsmeParams = dict[str, Tensor]


@dataclass(frozen=True)
class Stage:
    channels: int
    kernel: int = 3
    pool: int = 2


@dataclass(frozen=True)
class OsmeConfig:
    P: int = 2
    C: int = 32
    r: int = 4
    D: int = 16
    K: int = 8
    input_hw: tuple[int, int] = (16, 16)
    input_channels: int = 1
    pool_before_fc: bool = False
    backbone: tuple[Stage, ...] = field(default_factory=lambda: (Stage(16), Stage(32)))

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(self.input_hw))
        object.__setattr__(self, "backbone", tuple(
            s if isinstance(s, Stage) else Stage(**s) if isinstance(s, dict) else Stage(*s)
            for s in self.backbone))
        for name in ("P", "C", "r", "D", "K", "input_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.C % self.r:
            raise ValueError(f"C={self.C} is not divisible by r={self.r}")
        if not self.backbone:
            raise ValueError("backbone needs at least one stage")
        if self.backbone[-1].channels != self.C:
            raise ValueError(f"last backbone stage has {self.backbone[-1].channels} channels, C={self.C}")
        h, w = self.input_hw
        for s in self.backbone:
            if s.kernel % 2 == 0 or s.kernel > min(h, w):
                raise ValueError(f"bad kernel size {s.kernel}")
            if h % s.pool or w % s.pool:
                raise ValueError(f"spatial size {h}x{w} not divisible by pool {s.pool}")
            h, w = h // s.pool, w // s.pool

    @property
    def feature_hw(self) -> tuple[int, int]:
        h, w = self.input_hw
        for s in self.backbone:
            h, w = h // s.pool, w // s.pool
        return h, w

    @property
    def fc_in(self) -> int:
        h, w = self.feature_hw
        return self.C if self.pool_before_fc else h * w * self.C

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        d["backbone"] = [asdict(s) for s in self.backbone]
        return d


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_params(cfg: OsmeConfig, rng: np.random.Generator) -> OsmeParams:
    """Uniform ``±1/sqrt(fan_in)`` weights, zero biases, in a fixed draw order."""
    params: OsmeParams = {}
    cin = cfg.input_channels
    for k, stage in enumerate(cfg.backbone):
        params[f"backbone.{k}.weight"] = _uniform(
            rng, (stage.kernel, stage.kernel, cin, stage.channels), stage.kernel * stage.kernel * cin)
        params[f"backbone.{k}.bias"] = Tensor(np.zeros(stage.channels), requires_grad=True)
        cin = stage.channels
    hidden = cfg.C // cfg.r
    for p in range(cfg.P):
        params[f"branch.{p}.W1"] = _uniform(rng, (hidden, cfg.C), cfg.C)
        params[f"branch.{p}.W2"] = _uniform(rng, (cfg.C, hidden), hidden)
        params[f"branch.{p}.W3"] = _uniform(rng, (cfg.D, cfg.fc_in), cfg.fc_in)
    params["classifier.weight"] = _uniform(rng, (cfg.K, cfg.P * cfg.D), cfg.P * cfg.D)
    params["classifier.bias"] = Tensor(np.zeros(cfg.K), requires_grad=True)
    return params


def zero_params(cfg: OsmeConfig) -> OsmeParams:
    params = init_params(cfg, np.random.default_rng(0))
    return {k: Tensor(np.zeros_like(v.data), requires_grad=True) for k, v in params.items()}


def _check_branch(cfg: OsmeConfig, p: int) -> None:
    if not 0 <= p < cfg.P:
        raise BranchOutOfRange(f"branch {p} outside 0..{cfg.P - 1}")


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatch(f"expected (H, W, C) or (B, H, W, C), got {x.shape}")


def backbone_forward(params: OsmeParams, images: Tensor, cfg: OsmeConfig) -> Tensor:
    """Stand-in for the last residual block: conv/relu/max-pool stages."""
    x, single = _batched(images)
    if x.shape[1:] != (*cfg.input_hw, cfg.input_channels):
        raise ShapeMismatch(f"image shape {x.shape[1:]} does not match config "
                            f"{(*cfg.input_hw, cfg.input_channels)}")
    for k, stage in enumerate(cfg.backbone):
        x = T.relu(T.conv2d(x, params[f"backbone.{k}.weight"], params[f"backbone.{k}.bias"]))
        if stage.pool > 1:
            x = T.max_pool(x, stage.pool)
    return T.reshape(x, x.shape[1:]) if single else x


def squeeze(U: Tensor) -> Tensor:
    """Per-channel spatial mean of the feature map."""
    return T.global_average_pool(U)


def excite(z: Tensor, params: OsmeParams, p: int, cfg: OsmeConfig) -> Tensor:
    """Channel gate of branch ``p``: ``sigmoid(W2 relu(W1 z))``; ``z`` is ``(C,)`` or ``(B, C)``."""
    _check_branch(cfg, p)
    if z.shape[-1] != cfg.C:
        raise ShapeMismatch(f"descriptor has {z.shape[-1]} channels, expected {cfg.C}")
    zb = T.reshape(z, (1, cfg.C)) if z.ndim == 1 else z
    hidden = T.relu(T.matmul(zb, T.transpose(params[f"branch.{p}.W1"])))
    m = T.sigmoid(T.matmul(hidden, T.transpose(params[f"branch.{p}.W2"])))
    return T.reshape(m, (cfg.C,)) if z.ndim == 1 else m


def reweight(U: Tensor, m: Tensor) -> Tensor:
    """Scale every channel of ``U`` by its gate value."""
    if U.shape[-1] != m.shape[-1]:
        raise ShapeMismatch(f"feature map has {U.shape[-1]} channels, mask has {m.shape[-1]}")
    if U.ndim == 4:
        if m.ndim != 2 or m.shape[0] != U.shape[0]:
            raise ShapeMismatch(f"batched map {U.shape} needs a (B, C) mask, got {m.shape}")
        m = T.reshape(m, (m.shape[0], 1, 1, m.shape[1]))
    elif m.ndim != 1:
        raise ShapeMismatch(f"mask shape {m.shape} for map {U.shape}")
    return T.elementwise_multiply(U, m)


def attend(S: Tensor, params: OsmeParams, p: int, cfg: OsmeConfig) -> Tensor:
    """Branch feature ``W3 vec(S)`` (or ``W3 gap(S)`` with ``pool_before_fc``)."""
    _check_branch(cfg, p)
    Sb, single = _batched(S)
    v = T.global_average_pool(Sb) if cfg.pool_before_fc else T.flatten(Sb)
    if v.shape[1] != cfg.fc_in:
        raise ShapeMismatch(f"vectorized map has {v.shape[1]} entries, W3 expects {cfg.fc_in}")
    f = T.matmul(v, T.transpose(params[f"branch.{p}.W3"]))
    return T.reshape(f, (cfg.D,)) if single else f


@dataclass
class OsmeOutput:
    features: Tensor       # (B, P, D)
    logits: Tensor         # (B, K)
    feature_map: Tensor    # U, (B, H, W, C)
    masks: list[Tensor]    # per branch, (B, C)
    attention_maps: list[Tensor]  # per branch S^p, (B, H, W, C)


def osme_forward(params: OsmeParams, images: Tensor, cfg: OsmeConfig) -> OsmeOutput:
    """Full forward pass for a batch of images laid out ``x_1, x_1+, x_2, x_2+, ...``."""
    U = backbone_forward(params, images, cfg)
    if U.ndim == 3:
        raise ShapeMismatch("osme_forward expects a batch of images")
    z = squeeze(U)
    masks, maps, feats = [], [], []
    for p in range(cfg.P):
        m = excite(z, params, p, cfg)
        S = reweight(U, m)
        masks.append(m)
        maps.append(S)
        feats.append(attend(S, params, p, cfg))
    joint = T.concat(feats, axis=1)
    logits = T.add(T.matmul(joint, T.transpose(params["classifier.weight"])), params["classifier.bias"])
    features = T.reshape(joint, (joint.shape[0], cfg.P, cfg.D))
    return OsmeOutput(features, logits, U, masks, maps)


def heatmap(S) -> np.ndarray:
    """Channel-mean of an attention map, min-max scaled to [0, 1].

    A constant map has no contrast and comes back as all zeros.
    """
    data = S.data if isinstance(S, Tensor) else np.asarray(S, dtype=np.float64)
    if data.ndim != 3:
        raise ShapeMismatch(f"heatmap expects (H, W, C), got {data.shape}")
    raw = data.mean(axis=-1)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def heatmap_peak(hm: np.ndarray) -> tuple[int, int]:
    """(row, col) of the maximum; ties resolve to the first in row-major order."""
    r, c = np.unravel_index(int(np.argmax(hm)), hm.shape)
    return int(r), int(c)


def write_pgm(path, hm: np.ndarray) -> None:
    """Binary 8-bit PGM (P5) of a map with values in [0, 1]."""
    pixels = np.clip(np.rint(np.asarray(hm) * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    header = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if header is None:
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = (int(g) for g in header.groups())
    data = raw[header.end(): header.end() + w * h]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval
