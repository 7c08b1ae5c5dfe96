"""Convolutional embedding encoder: bottleneck residual stages with IBN, GeM pooling and a linear head."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

NORM_EPS = 1e-5
BN_MOMENTUM = 0.1  # torch convention: running = 0.9 * running + 0.1 * batch
GEM_EPS = 1e-6

CHECKPOINT_MAGIC = b"SIDCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    stages: tuple = ((32, 2), (64, 2), (128, 2), (256, 2))
    ibn_stages: tuple = (0, 1, 2)
    embedding_dim: int = 128
    gem_p_init: float = 3.0
    stem_channels: int = 16
    bottleneck_ratio: int = 4

    def __post_init__(self):
        stages = tuple(tuple(int(v) for v in s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "ibn_stages", tuple(sorted(int(i) for i in self.ibn_stages)))
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")
        if self.gem_p_init <= 0:
            raise ValueError("gem_p_init must be positive")
        if not stages:
            raise ValueError("at least one stage is required")
        if len(stages) - 1 in self.ibn_stages:
            raise ValueError("the last stage must use plain batch normalisation")

    def to_dict(self) -> dict:
        return {k: (list(map(list, v)) if k == "stages" else list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["stages"] = tuple(tuple(s) for s in d["stages"])
        d["ibn_stages"] = tuple(d["ibn_stages"])
        return cls(**d)


DESK_CONFIG = EncoderConfig()


class IBN(nn.Module):
    """Half the channels instance-normalised, the rest batch-normalised."""

    def __init__(self, channels: int):
        super().__init__()
        self.half = channels // 2
        self.inorm = nn.InstanceNorm2d(self.half, eps=NORM_EPS, affine=True)
        self.bnorm = nn.BatchNorm2d(channels - self.half, eps=NORM_EPS, momentum=BN_MOMENTUM)

    def forward(self, x):
        a, b = torch.split(x, [self.half, x.shape[1] - self.half], dim=1)
        return torch.cat([self.inorm(a), self.bnorm(b)], dim=1)


class Bottleneck(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, ibn: bool, ratio: int):
        super().__init__()
        mid = max(c_out // ratio, 2)
        self.conv1 = nn.Conv2d(c_in, mid, 1, bias=False)
        self.norm1 = IBN(mid) if ibn else nn.BatchNorm2d(mid, eps=NORM_EPS, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.norm2 = nn.BatchNorm2d(mid, eps=NORM_EPS, momentum=BN_MOMENTUM)
        self.conv3 = nn.Conv2d(mid, c_out, 1, bias=False)
        self.norm3 = nn.BatchNorm2d(c_out, eps=NORM_EPS, momentum=BN_MOMENTUM)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(c_out, eps=NORM_EPS, momentum=BN_MOMENTUM),
            )

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = F.relu(self.norm2(self.conv2(y)))
        y = self.norm3(self.conv3(y))
        s = x if self.shortcut is None else self.shortcut(x)
        return F.relu(y + s)


def gem_pool(x: torch.Tensor, p: torch.Tensor | float) -> torch.Tensor:
    """Generalised mean over the two trailing axes: (mean v**p) ** (1/p)."""
    p = torch.as_tensor(p, dtype=x.dtype)
    if bool((p <= 0).any()):
        raise ValueError("GeM exponent must be positive")
    return x.clamp(min=GEM_EPS).pow(p).mean(dim=(-2, -1)).pow(1.0 / p)


class Encoder(nn.Module):
    """Maps a (B, T, F) batch of normalised CQT frames to (B, d) unnormalised embeddings."""

    def __init__(self, config: EncoderConfig = DESK_CONFIG):
        super().__init__()
        self.config = config
        c0 = config.stem_channels
        self.stem = nn.Sequential(
            nn.Conv2d(1, c0, 5, stride=2, padding=2, bias=False),
            nn.BatchNorm2d(c0, eps=NORM_EPS, momentum=BN_MOMENTUM),
            nn.ReLU(),
        )
        blocks = []
        c_in = c0
        for i, (c_out, n_blocks) in enumerate(config.stages):
            for b in range(n_blocks):
                # every stage, the first included, opens with a stride-2 block
                stride = 2 if b == 0 else 1
                blocks.append(Bottleneck(c_in, c_out, stride, i in config.ibn_stages, config.bottleneck_ratio))
                c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        # p = exp(log_p) stays positive whatever the optimiser does
        self.log_p = nn.Parameter(torch.tensor(float(np.log(config.gem_p_init))))
        self.head = nn.Linear(c_in, config.embedding_dim)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    @property
    def p(self) -> torch.Tensor:
        return self.log_p.exp()

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        if spec.dim() == 2:
            spec = spec.unsqueeze(0)
        if spec.dim() != 3:
            raise ValueError(f"expected (B, T, F) input, got shape {tuple(spec.shape)}")
        x = self.blocks(self.stem(spec.unsqueeze(1)))
        p = self.p
        if not bool(torch.isfinite(p)) or float(p.detach()) <= 0.0:
            raise FloatingPointError(f"learned GeM exponent left the representable range (log p = {float(self.log_p.detach()):.3g})")
        return self.head(gem_pool(x, p))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: Encoder, spec) -> torch.Tensor:
    """Functional forward on a numpy or torch (T, F) / (B, T, F) input."""
    x = torch.as_tensor(np.asarray(spec) if not torch.is_tensor(spec) else spec)
    return model(x.to(next(model.parameters()).dtype))


def backward(model: Encoder, spec, upstream) -> dict:
    """Parameter gradients of <forward(spec), upstream>; does not touch ``.grad`` of the model."""
    out = forward(model, spec)
    up = torch.as_tensor(upstream, dtype=out.dtype).reshape(out.shape)
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(out, params, grad_outputs=up, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


def embed_batch(model: Encoder, feats: np.ndarray, batch: int = 64) -> np.ndarray:
    """Eval-mode L2-normalised embeddings for a stack of (T, F) feature maps."""
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(feats), batch):
            e = forward(model, feats[i : i + batch])
            out.append(F.normalize(e, dim=1).cpu().numpy())
    model.train(was_training)
    d = model.config.embedding_dim
    return np.concatenate(out).astype(np.float32) if out else np.zeros((0, d), np.float32)


class Towers(nn.Module):
    """Query and candidate encoders.  ``shared=True`` aliases one parameter set for both."""

    def __init__(self, config: EncoderConfig = DESK_CONFIG, shared: bool = False):
        super().__init__()
        self.shared = shared
        self.query = Encoder(config)
        self.candidate = self.query if shared else Encoder(config)


# ----------------------------------------------------------------------------
# checkpoints

_DTYPES = {torch.float32: 0, torch.int64: 1}
_DTYPE_NP = {0: "<f4", 1: "<i8"}
_DTYPE_TORCH = {0: torch.float32, 1: torch.int64}


def _state_bytes(state: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        t = t.detach().cpu()
        if t.dtype not in _DTYPES:
            t = t.to(torch.float32)
        code = _DTYPES[t.dtype]
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(np.ascontiguousarray(t.numpy(), dtype=_DTYPE_NP[code]).tobytes())
    return buf.getvalue()


def model_checksum(model: nn.Module) -> str:
    return hashlib.sha256(_state_bytes(model.state_dict())).hexdigest()


def save_checkpoint(path, model: Encoder, meta: dict | None = None) -> None:
    """Container: magic, version, JSON header (config + meta), tensor table, trailing sha256."""
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header
    body += _state_bytes(model.state_dict())
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())


def load_checkpoint(path, expected: EncoderConfig | None = None):
    """Returns ``(model, meta)``.  Integrity is checked before anything is built."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CHECKPOINT_MAGIC) + 8 + 32 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", body, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    header = json.loads(body[pos : pos + hlen])
    pos += hlen
    config = EncoderConfig.from_dict(header["config"])
    if expected is not None and expected != config:
        raise ConfigMismatchError(f"{path}: checkpoint config {config} differs from expected {expected}")
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    state = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + ln].decode()
        pos += ln
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        width = np.dtype(_DTYPE_NP[code]).itemsize
        arr = np.frombuffer(body, dtype=_DTYPE_NP[code], count=count, offset=pos).reshape(shape)
        pos += count * width
        state[name] = torch.from_numpy(arr.copy()).to(_DTYPE_TORCH[code])
    model = Encoder(config)
    expected_shapes = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    got_shapes = {k: tuple(v.shape) for k, v in state.items()}
    if expected_shapes != got_shapes:
        raise ConfigMismatchError(f"{path}: tensor table does not match the recorded config")
    model.load_state_dict(state)
    model.eval()
    return model, header["meta"]
