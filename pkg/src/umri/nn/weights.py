"""Named-tensor weight container, reverse-mode gradients, Adam and the UMRIW1 file format.

File layout (all integers little-endian)::

    b"UMRIW1"
    u32 record count
    per record:
        u32 path length, path bytes (UTF-8)
        u32 rank, rank x u64 dims
        u8  frozen flag (0/1)
        u8  dtype (0 = float32, 1 = float64)
        raw little-endian sample data, C order

Optimizer state is stored as ordinary records under the reserved ``__adam__/``
prefix so a checkpoint round-trips through the same reader.
"""
from __future__ import annotations

import io
import math
import os
import struct
from typing import Iterable, Mapping

import numpy as np
import torch
from torch import nn

from ..errors import ContractError, FormatError

MAGIC = b"UMRIW1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
OPTIM_PREFIX = "__adam__/"


class ModelWeights:
    """Mapping of hierarchical path -> tensor with per-tensor frozen flags.

    When built with :meth:`from_module` the tensors are the module's own
    parameters, so optimizer updates are visible to the module immediately.
    Adam moments live in ``moments`` (path -> (m, v)) with the step count in
    ``step``.
    """

    def __init__(self, tensors: Mapping[str, torch.Tensor] | None = None,
                 frozen: Iterable[str] = ()):
        self.tensors: dict[str, torch.Tensor] = dict(tensors or {})
        self.frozen: set[str] = set(frozen)
        unknown = self.frozen - self.tensors.keys()
        if unknown:
            raise ContractError(f"frozen paths not in container: {sorted(unknown)}")
        self.moments: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        self.step = 0

    @classmethod
    def from_module(cls, module: nn.Module) -> "ModelWeights":
        params = dict(module.named_parameters())
        return cls(params, frozen=[k for k, p in params.items() if not p.requires_grad])

    def __len__(self):
        return len(self.tensors)

    def __contains__(self, path):
        return path in self.tensors

    def __getitem__(self, path):
        return self.tensors[path]

    def trainable(self) -> dict[str, torch.Tensor]:
        return {k: t for k, t in self.tensors.items() if k not in self.frozen}

    def is_frozen(self, path: str) -> bool:
        return path in self.frozen

    def num_parameters(self, trainable_only: bool = False) -> int:
        items = self.trainable() if trainable_only else self.tensors
        return sum(t.numel() for t in items.values())

    @torch.no_grad()
    def assign_to(self, module: nn.Module, strict: bool = True) -> None:
        """Copy tensors into ``module``'s parameters and apply frozen flags."""
        params = dict(module.named_parameters())
        if strict:
            missing = params.keys() - self.tensors.keys()
            extra = self.tensors.keys() - params.keys()
            if missing or extra:
                raise FormatError(f"weights do not match module: missing={sorted(missing)[:5]} "
                                  f"unexpected={sorted(extra)[:5]}")
        for path, t in self.tensors.items():
            if path not in params:
                continue
            p = params[path]
            if p.shape != t.shape:
                raise FormatError(f"{path}: file shape {tuple(t.shape)} != "
                                  f"model shape {tuple(p.shape)}")
            p.copy_(t.to(p.dtype))
            p.requires_grad_(path not in self.frozen)

    def snapshot(self) -> "ModelWeights":
        """Deep copy, detached from any module."""
        out = ModelWeights({k: t.detach().clone() for k, t in self.tensors.items()}, self.frozen)
        out.moments = {k: (m.clone(), v.clone()) for k, (m, v) in self.moments.items()}
        out.step = self.step
        return out


def backward(loss: torch.Tensor, weights: ModelWeights) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every reachable trainable tensor."""
    if loss.dim() != 0 and loss.numel() != 1:
        raise ContractError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    paths = [k for k, t in weights.trainable().items() if t.requires_grad]
    grads = torch.autograd.grad(loss.reshape(()), [weights.tensors[k] for k in paths],
                                allow_unused=True)
    return {k: g for k, g in zip(paths, grads) if g is not None}


@torch.no_grad()
def adam_step(weights: ModelWeights, grads: Mapping[str, torch.Tensor], lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              step: int | None = None) -> ModelWeights:
    """One bias-corrected Adam update, in place, without weight decay.

    Frozen tensors are skipped even if a gradient is supplied for them.
    """
    b1, b2 = betas
    weights.step = weights.step + 1 if step is None else int(step)
    t = weights.step
    for path, g in grads.items():
        if path in weights.frozen:
            continue
        p = weights.tensors[path]
        m, v = weights.moments.get(path, (torch.zeros_like(p), torch.zeros_like(p)))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        weights.moments[path] = (m, v)
        step_size = lr / (1 - b1 ** t)
        denom = (v / (1 - b2 ** t)).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-step_size)
    return weights


sgd_adam_step = adam_step


def _records(weights: ModelWeights):
    for path, t in weights.tensors.items():
        yield path, t, path in weights.frozen
    for path, (m, v) in weights.moments.items():
        yield f"{OPTIM_PREFIX}m/{path}", m, False
        yield f"{OPTIM_PREFIX}v/{path}", v, False
    if weights.step:
        yield f"{OPTIM_PREFIX}step", torch.tensor([float(weights.step)], dtype=torch.float64), False


def dumps_weights(weights: ModelWeights) -> bytes:
    buf = io.BytesIO()
    records = list(_records(weights))
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(records)))
    for path, t, frozen in records:
        t = t.detach().cpu()
        if t.dtype not in _DTYPE_CODES:
            raise FormatError(f"{path}: unsupported dtype {t.dtype}")
        name = path.encode("utf-8")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", t.dim()))
        buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        code = _DTYPE_CODES[t.dtype]
        buf.write(struct.pack("<BB", int(frozen), code))
        buf.write(np.ascontiguousarray(t.numpy(), dtype=DTYPES[code]).tobytes())
    return buf.getvalue()


def loads_weights(data: bytes) -> ModelWeights:
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated weight file: need {n} bytes for {what} at offset {pos}, "
                              f"file has {len(view)}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(MAGIC), "magic")) != MAGIC:
        raise FormatError("not a UMRIW1 weight file (bad magic)")
    (count,) = struct.unpack("<I", take(4, "record count"))
    tensors, frozen, moments = {}, set(), {}
    step = 0
    for _ in range(count):
        (plen,) = struct.unpack("<I", take(4, "path length"))
        try:
            path = bytes(take(plen, "path")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"path at offset {pos - plen} is not UTF-8") from exc
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        flag, code = struct.unpack("<BB", take(2, "flags"))
        if code not in DTYPES or flag not in (0, 1):
            raise FormatError(f"{path}: bad frozen flag {flag} or dtype code {code}")
        dtype = DTYPES[code]
        nbytes = math.prod(dims) * dtype.itemsize
        arr = np.frombuffer(take(nbytes, f"data of {path}"), dtype=dtype).reshape(dims)
        t = torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))
        if path in tensors:
            raise FormatError(f"duplicate path {path!r}")
        tensors[path] = t
        if flag:
            frozen.add(path)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last record at offset {pos}")

    for path in [p for p in tensors if p.startswith(OPTIM_PREFIX)]:
        t = tensors.pop(path)
        rest = path[len(OPTIM_PREFIX):]
        if rest == "step":
            step = int(t.reshape(-1)[0])
        elif rest[:2] in ("m/", "v/"):
            slot = 0 if rest[0] == "m" else 1
            entry = moments.setdefault(rest[2:], [None, None])
            entry[slot] = t
    weights = ModelWeights(tensors, frozen)
    for path, (m, v) in moments.items():
        if m is None or v is None or path not in tensors:
            raise FormatError(f"incomplete optimizer state for {path!r}")
        if m.shape != tensors[path].shape or v.shape != tensors[path].shape:
            raise FormatError(f"optimizer state shape mismatch for {path!r}")
        weights.moments[path] = (m, v)
    weights.step = step
    return weights


def save_weights(weights: ModelWeights, path: str | os.PathLike) -> None:
    data = dumps_weights(weights)
    tmp = f"{os.fspath(path)}.incomplete"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_weights(path: str | os.PathLike) -> ModelWeights:
    with open(path, "rb") as fh:
        return loads_weights(fh.read())


def import_encoder(path: str | os.PathLike, encoder: nn.Module, prefix: str = "") -> int:
    """Populate ``encoder`` from a converted weight file and freeze it.

    Records are matched by path after stripping ``prefix``; every encoder
    parameter must be present with the right shape. Returns the number of
    tensors loaded.
    """
    loaded = load_weights(path)
    params = dict(encoder.named_parameters())
    found = {}
    for key, t in loaded.tensors.items():
        if key.startswith(prefix) and key[len(prefix):] in params:
            found[key[len(prefix):]] = t
    missing = params.keys() - found.keys()
    if missing:
        raise FormatError(f"converted encoder file lacks {len(missing)} tensors, "
                          f"e.g. {sorted(missing)[:3]}")
    ModelWeights(found, frozen=found.keys()).assign_to(encoder)
    return len(found)
