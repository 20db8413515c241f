"""Versioned binary checkpoints.

Layout (little endian)::

    b"SVSC"  u16 version  u32 header_bytes  header (UTF-8 JSON)
    float32 payload: parameters in header order, then normalization
    statistics (min, max per set), then tied covariance variances.

The header carries the model config, its layer specs, parameter shapes and
byte counts, the context layout and acoustic channel names.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import _atomic_bytes
from .model import AcousticModel, BaselineConfig, BaselineFFNN, ModelConfig
from .nn import ParameterStore
from .score import ContextConfig, NormalizationStats
from .trajloss import TiedCovariance
from .vocoder import AcousticLayout

MAGIC = b"SVSC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Bundle:
    """Everything needed to synthesize: model, context layout, statistics, covariance."""

    kind: str  # "proposed" | "baseline"
    model: AcousticModel | BaselineFFNN
    context: ContextConfig
    layout: AcousticLayout
    input_stats: NormalizationStats
    output_stats: NormalizationStats
    cov: TiedCovariance
    dyn_stats: NormalizationStats | None = None
    frame_shift: float = 0.005

    @property
    def config(self):
        return self.model.config

    def stat_sets(self):
        sets = [("input", self.input_stats), ("output", self.output_stats)]
        if self.dyn_stats is not None:
            sets.append(("dyn", self.dyn_stats))
        return sets


def _layer_specs(model):
    if isinstance(model, BaselineFFNN):
        return [s.to_dict() for s in model.net.specs]
    specs = {"ffnn": [s.to_dict() for s in model.ffnn.specs]}
    for stack, channels in model.stacks:
        specs[stack.prefix] = [s.to_dict() for s in stack.specs]
    return specs


def encode_checkpoint(bundle: Bundle) -> bytes:
    params = bundle.model.store.params
    names = sorted(params)
    header = {
        "kind": bundle.kind,
        "config": bundle.config.to_dict(),
        "layer_specs": _layer_specs(bundle.model),
        "context": {"phonemes": list(bundle.context.phonemes), "n_states": bundle.context.n_states,
                    "n_binary": bundle.context.n_binary, "n_numerical": bundle.context.n_numerical},
        "channels": list(bundle.layout.names),
        "frame_shift": bundle.frame_shift,
        "params": [{"name": n, "shape": list(params[n].shape), "nbytes": 4 * params[n].size} for n in names],
        "stats": [{"name": k, "size": int(s.minimum.size), "lo": s.lo, "hi": s.hi} for k, s in bundle.stat_sets()],
        "cov": {"size": int(bundle.cov.variances.size), "floor": bundle.cov.floor},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(raw)), raw]
    chunks += [np.asarray(params[n], dtype="<f4").tobytes() for n in names]
    for _, s in bundle.stat_sets():
        chunks += [s.minimum.astype("<f4").tobytes(), s.maximum.astype("<f4").tobytes()]
    chunks.append(bundle.cov.variances.astype("<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(bundle: Bundle, path) -> None:
    _atomic_bytes(Path(path), encode_checkpoint(bundle))


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Bundle:
    """Parse checkpoint bytes; any malformed content raises CheckpointError."""
    try:
        return _decode(data, source)
    except CheckpointError:
        raise
    except (struct.error, ValueError, KeyError, TypeError, IndexError) as exc:
        raise CheckpointError(f"{source}: malformed checkpoint ({type(exc).__name__}: {exc})") from None


def _decode(data: bytes, source: str) -> Bundle:
    if data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    pos = 10
    header = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n

    def take(count):
        nonlocal pos
        end = pos + 4 * count
        if end > len(data):
            raise CheckpointError(f"{source}: truncated payload")
        out = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(float)
        pos = end
        return out

    store = ParameterStore()
    for p in header["params"]:
        store.add(p["name"], take(int(np.prod(p["shape"]))).reshape(p["shape"]))
    stats = {}
    for s in header["stats"]:
        mn, mx = take(s["size"]), take(s["size"])
        stats[s["name"]] = NormalizationStats(mn, np.maximum(mx, mn), s["lo"], s["hi"])
    cov = TiedCovariance(np.maximum(take(header["cov"]["size"]), header["cov"]["floor"]), header["cov"]["floor"])
    if pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - pos} trailing bytes")
    ctx = header["context"]
    context = ContextConfig(tuple(ctx["phonemes"]), ctx["n_states"], ctx["n_binary"], ctx["n_numerical"])
    if header["kind"] == "proposed":
        model = AcousticModel(ModelConfig.from_dict(header["config"]), store)
    elif header["kind"] == "baseline":
        model = BaselineFFNN(BaselineConfig.from_dict(header["config"]), store)
    else:
        raise CheckpointError(f"{source}: unknown model kind {header['kind']!r}")
    stacks = [model.net] if isinstance(model, BaselineFFNN) else [model.ffnn] + [s for s, _ in model.stacks]
    expected = {k: v for stack in stacks for k, v in stack.param_shapes().items()}
    got = {k: tuple(v.shape) for k, v in store.params.items()}
    if expected != got:
        raise CheckpointError(f"{source}: parameters do not match the model config")
    return Bundle(header["kind"], model, context, AcousticLayout.from_names(header["channels"]),
                  stats["input"], stats["output"], cov, stats.get("dyn"), header["frame_shift"])


def load_checkpoint(path) -> Bundle:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return decode_checkpoint(path.read_bytes(), str(path))
