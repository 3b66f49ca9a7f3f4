"""Network building blocks: named parameter store, conv/residual layers,
deterministic initialization, and the weights file format.

Weights persist as a flat little-endian float32 binary plus a JSON
manifest listing parameter names and shapes in load order. A 64-bit
FNV-1a hash of the binary identifies the weights in bitstream headers.
Computation always runs in float64; parameters are "snapped" through
float32 before hashing or coding so that the values used for coding are
exactly the values a decoder will load from the file.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ShapeError, UsageError
from .tensor import Tensor, conv2d, leaky_relu

__all__ = ["ParamStore", "Conv", "ResBlock", "fnv1a64"]

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64
    return h


class ParamStore:
    """Insertion-ordered named float64 parameters.

    Loading writes into the existing arrays in place, so layer objects
    holding references to these tensors see updated values without
    rebinding.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._hash_cache: int | None = None

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), name=name)
        self._params[name] = t
        self._hash_cache = None
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self._params.values():
            t.requires_grad = flag

    def mark_dirty(self) -> None:
        self._hash_cache = None

    def snap_to_f32(self) -> None:
        """Round every parameter through float32 in place."""
        for t in self._params.values():
            t.data[...] = t.data.astype(np.float32).astype(np.float64)
        self._hash_cache = None

    def to_f32_bytes(self) -> bytes:
        return b"".join(t.data.astype("<f4").tobytes() for t in self._params.values())

    def weights_hash(self) -> int:
        """FNV-1a 64 of the float32 serialization (cached until dirtied)."""
        if self._hash_cache is None:
            self._hash_cache = fnv1a64(self.to_f32_bytes())
        return self._hash_cache

    def manifest_params(self) -> list[dict]:
        return [{"name": n, "shape": list(t.data.shape)} for n, t in self._params.items()]

    def save(self, bin_path: Path) -> None:
        Path(bin_path).write_bytes(self.to_f32_bytes())

    def load(self, bin_path: Path, manifest_params: list[dict]) -> None:
        """Load float32 values in manifest order; shapes must match."""
        names = [p["name"] for p in manifest_params]
        if names != self.names():
            raise UsageError("weights manifest parameter list does not match this model")
        raw = np.frombuffer(Path(bin_path).read_bytes(), dtype="<f4")
        if raw.size != self.n_values():
            raise UsageError(f"weights binary holds {raw.size} values, model needs {self.n_values()}")
        pos = 0
        for entry, t in zip(manifest_params, self._params.values()):
            if tuple(entry["shape"]) != t.data.shape:
                raise ShapeError(f"parameter {entry['name']}: manifest shape {entry['shape']} != {t.data.shape}")
            n = t.data.size
            t.data[...] = raw[pos : pos + n].astype(np.float64).reshape(t.data.shape)
            pos += n
        self._hash_cache = None


class Conv:
    """3x3 (by default) convolution layer with He-normal initialization."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        c_in: int,
        c_out: int,
        k: int = 3,
        stride: int = 1,
        pad: int | None = None,
        rng: np.random.Generator | None = None,
        init_scale: float = 1.0,
        bias_fill: float = 0.0,
    ):
        if rng is None:
            raise UsageError("Conv needs an rng for deterministic init")
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        std = init_scale * np.sqrt(2.0 / (c_in * k * k))
        self.w = store.add(f"{name}.w", rng.normal(0.0, std, size=(c_out, c_in, k, k)))
        self.b = store.add(f"{name}.b", np.full(c_out, bias_fill))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class ResBlock:
    """conv-lrelu-conv plus identity skip, width-preserving."""

    def __init__(self, store: ParamStore, name: str, channels: int, rng: np.random.Generator):
        self.conv1 = Conv(store, f"{name}.conv1", channels, channels, rng=rng)
        self.conv2 = Conv(store, f"{name}.conv2", channels, channels, rng=rng, init_scale=0.5)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(leaky_relu(self.conv1(x)))


def save_weights(store: ParamStore, manifest_path: Path, extra: dict) -> None:
    """Write <stem>.bin plus the JSON manifest at manifest_path."""
    manifest_path = Path(manifest_path)
    bin_path = manifest_path.with_suffix(".bin")
    store.snap_to_f32()
    store.save(bin_path)
    manifest = {
        "format": "bnvc-weights",
        "version": 1,
        "data_file": bin_path.name,
        "params": store.manifest_params(),
        "hash_fnv1a64": f"{store.weights_hash():016x}",
    }
    manifest.update(extra)
    manifest_path.write_text(json.dumps(manifest, indent=1))


def read_manifest(manifest_path: Path) -> dict:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot read weights manifest {manifest_path}: {err}") from err
    if manifest.get("format") != "bnvc-weights":
        raise UsageError(f"{manifest_path} is not a weights manifest")
    return manifest
