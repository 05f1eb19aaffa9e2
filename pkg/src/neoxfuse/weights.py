"""Block weights, the KV cache, seeded synthesis and manifest-file I/O.

The QKV projection weight uses the interleaved per-head layout: head ``h``
owns the contiguous rows ``[h * 3 * d_head, (h + 1) * 3 * d_head)``, in the
order Q rows, then K rows, then V rows for that head.

The on-disk format is a JSON manifest listing (name, shape, byte offset)
per tensor plus a raw little-endian float32 blob.  Synthetic weights are
generated from a 64-bit seed with the documented counter PRNG
(``halfnum.counter_rand_u64``), so any implementation of the same recipe
reproduces them exactly.
"""

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .halfnum import counter_rand_u64_array


@dataclass
class BlockWeights:
    ln1_gain: np.ndarray   # [hidden]
    ln1_bias: np.ndarray   # [hidden]
    qkv_weight: np.ndarray  # [3 * hidden, hidden], interleaved per head
    qkv_bias: np.ndarray   # [3 * hidden]
    out_weight: np.ndarray  # [hidden, hidden]
    out_bias: np.ndarray   # [hidden]
    ln2_gain: np.ndarray   # [hidden]
    ln2_bias: np.ndarray   # [hidden]
    up_weight: np.ndarray  # [d_mlp, hidden]
    up_bias: np.ndarray    # [d_mlp]
    down_weight: np.ndarray  # [hidden, d_mlp]
    down_bias: np.ndarray  # [hidden]

    def validate(self, cfg: ModelConfig) -> None:
        h, m = cfg.hidden, cfg.d_mlp
        expect = {
            "ln1_gain": (h,), "ln1_bias": (h,),
            "qkv_weight": (3 * h, h), "qkv_bias": (3 * h,),
            "out_weight": (h, h), "out_bias": (h,),
            "ln2_gain": (h,), "ln2_bias": (h,),
            "up_weight": (m, h), "up_bias": (m,),
            "down_weight": (h, m), "down_bias": (h,),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {got}")


TENSOR_NAMES = [f.name for f in fields(BlockWeights)]


def _uniform_stream(seed: int, stream: int, n: int) -> np.ndarray:
    """n doubles in [-1, 1) from the counter PRNG; stream separates tensors."""
    counters = (stream << 32) + np.arange(n, dtype=np.uint64)
    u = counter_rand_u64_array(seed, counters)
    return (u >> np.uint64(11)).astype(np.float64) * 2.0**-52 - 1.0


def synth_weights(cfg: ModelConfig, seed: int) -> BlockWeights:
    """Deterministic synthetic weights for a 64-bit seed.

    Projection matrices are uniform(-1, 1) scaled by 1/sqrt(fan_in), biases
    uniform scaled by 0.02, layernorm gains 1 + 0.1 * uniform and biases
    0.1 * uniform.  Tensor streams are indexed in ``TENSOR_NAMES`` order.
    """
    h, m = cfg.hidden, cfg.d_mlp
    shapes = {
        "ln1_gain": (h,), "ln1_bias": (h,),
        "qkv_weight": (3 * h, h), "qkv_bias": (3 * h,),
        "out_weight": (h, h), "out_bias": (h,),
        "ln2_gain": (h,), "ln2_bias": (h,),
        "up_weight": (m, h), "up_bias": (m,),
        "down_weight": (h, m), "down_bias": (h,),
    }
    out = {}
    for stream, name in enumerate(TENSOR_NAMES):
        shape = shapes[name]
        u = _uniform_stream(seed, stream, int(np.prod(shape))).reshape(shape)
        if name.endswith("_weight"):
            fan_in = shape[1]
            out[name] = u / np.sqrt(fan_in)
        elif name.endswith("gain"):
            out[name] = 1.0 + 0.1 * u
        elif name.endswith("ln1_bias") or name.endswith("ln2_bias"):
            out[name] = 0.1 * u
        else:
            out[name] = 0.02 * u
    return BlockWeights(**out)


def save_weights(w: BlockWeights, manifest_path, blob_path) -> None:
    """Write a JSON manifest plus a raw little-endian float32 blob."""
    manifest_path, blob_path = Path(manifest_path), Path(blob_path)
    tensors = []
    offset = 0
    with open(blob_path, "wb") as blob:
        for name in TENSOR_NAMES:
            arr = np.ascontiguousarray(getattr(w, name), dtype="<f4")
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blob.write(arr.tobytes())
            offset += arr.nbytes
    manifest = {"dtype": "float32", "byte_order": "little", "tensors": tensors}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_weights(manifest_path, blob_path) -> BlockWeights:
    """Read weights written by ``save_weights``; values come back as float64."""
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("dtype") != "float32" or manifest.get("byte_order") != "little":
        raise ValueError("unsupported weight blob encoding")
    raw = Path(blob_path).read_bytes()
    out = {}
    for t in manifest["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(
            raw, dtype="<f4", count=count, offset=t["offset"]
        ).reshape(shape)
        out[t["name"]] = arr.astype(np.float64)
    missing = [n for n in TENSOR_NAMES if n not in out]
    if missing:
        raise ValueError(f"weight manifest missing tensors: {missing}")
    return BlockWeights(**out)


class KVCache:
    """Append-only per-head key/value history.  Keys are stored post-rotation."""

    def __init__(self, n_heads: int, d_head: int):
        self.n_heads = n_heads
        self.d_head = d_head
        self._len = 0
        self._cap = 16
        self._k = np.zeros((n_heads, self._cap, d_head))
        self._v = np.zeros((n_heads, self._cap, d_head))

    @classmethod
    def from_arrays(cls, keys: np.ndarray, values: np.ndarray) -> "KVCache":
        """Build a cache from [n_heads, seq, d_head] arrays."""
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if keys.shape != values.shape or keys.ndim != 3:
            raise ValueError("keys/values must share shape [n_heads, seq, d_head]")
        cache = cls(keys.shape[0], keys.shape[2])
        for t in range(keys.shape[1]):
            cache.append(keys[:, t, :], values[:, t, :])
        return cache

    def __len__(self) -> int:
        return self._len

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        """Append one position; k and v are [n_heads, d_head]."""
        k = np.asarray(k, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if k.shape != (self.n_heads, self.d_head) or v.shape != k.shape:
            raise ValueError("append expects [n_heads, d_head] slices")
        if self._len == self._cap:
            self._cap *= 2
            for name in ("_k", "_v"):
                old = getattr(self, name)
                grown = np.zeros((self.n_heads, self._cap, self.d_head))
                grown[:, : self._len] = old[:, : self._len]
                setattr(self, name, grown)
        self._k[:, self._len] = k
        self._v[:, self._len] = v
        self._len += 1

    def head(self, h: int):
        """Views of (keys, values) for head h: each [len, d_head]."""
        return self._k[h, : self._len], self._v[h, : self._len]

    def keys(self) -> np.ndarray:
        return self._k[:, : self._len].copy()

    def values(self) -> np.ndarray:
        return self._v[:, : self._len].copy()
