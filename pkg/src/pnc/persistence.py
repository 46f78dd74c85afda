"""Flat ``key = value`` configs and versioned binary checkpoints.

The checkpoint byte layout is described in docs/checkpoint_format.md.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ConfigError, FingerprintMismatch, FormatError, PNCError
from .model import LEAF_MODES, WEIGHT_INPUTS, Model
from .structure import LAYER_KINDS, CircuitStructure, build_1d_structure, build_2d_structure
from .training import OBJECTIVES, AdamState, TrainConfig

MAGIC = b"PNC1"
VERSION = 1
_DIGEST = 32


# --------------------------------------------------------------------------
# config


@dataclass
class Config:
    layout: str = "2d"
    height: int = 28
    width: int = 28
    num_vars: int = 784
    components: int = 12
    leaf_components: int | None = None  # None resolves to `components`
    nu: int = 1
    layer_kind: str = "neural"
    weight_depth: int = 1
    weight_input: str = "normalized"
    num_classes: int = 1
    leaf_mode: str = "categorical"
    categories: int = 256
    learning_rate: float = 0.001
    batch_size: int = 50
    epochs: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    objective: str = "nll"
    seed: int = 0
    val_fraction: float = 0.1
    weight_decay: float = 0.0
    images: str = ""
    labels: str = ""

    def __post_init__(self):
        if self.leaf_components is None:
            self.leaf_components = 2 if self.leaf_mode == "two_input" else self.components

    @property
    def num_dims(self) -> int:
        return self.num_vars if self.layout == "1d" else self.height * self.width

    def build_structure(self) -> CircuitStructure:
        if self.layout == "1d":
            return build_1d_structure(self.num_vars, self.components, self.leaf_components,
                                      self.nu, self.layer_kind)
        return build_2d_structure(self.height, self.width, self.components,
                                  self.leaf_components, self.layer_kind, self.nu)

    def build_model(self, seed: int | None = None) -> Model:
        return Model(self.build_structure(), leaf_mode=self.leaf_mode,
                     num_categories=self.categories, num_classes=self.num_classes,
                     weight_depth=self.weight_depth, weight_input=self.weight_input,
                     seed=self.seed if seed is None else seed)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names})


_CHOICES = {
    "layout": ("1d", "2d"),
    "layer_kind": LAYER_KINDS,
    "weight_input": WEIGHT_INPUTS,
    "leaf_mode": LEAF_MODES,
    "objective": OBJECTIVES,
}
_TYPES = {f.name: f.type for f in fields(Config)}
_ORDER = [f.name for f in fields(Config)]


def _coerce(key: str, raw: str, line: int):
    kind = _TYPES[key]
    if key == "leaf_components" and raw == "auto":
        return None
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        expected = "an integer" if kind.startswith("int") else "a number"
        raise ConfigError(f"{key} must be {expected}, got {raw!r}", line) from None
    return raw


def _check(cfg: Config, where: dict[str, int]):
    def fail(key, msg):
        raise ConfigError(f"{key}: {msg}", where.get(key))

    for key, options in _CHOICES.items():
        if getattr(cfg, key) not in options:
            fail(key, f"must be one of {', '.join(options)}, got {getattr(cfg, key)!r}")
    for key in ("height", "width", "num_vars", "components", "leaf_components", "num_classes",
                "categories", "batch_size"):
        if getattr(cfg, key) < 1:
            fail(key, f"must be >= 1, got {getattr(cfg, key)}")
    if cfg.nu < 0:
        fail("nu", f"must be >= 0, got {cfg.nu}")
    if cfg.layout == "2d" and cfg.nu > 1:
        fail("nu", f"grid layouts support nu of 0 or 1, got {cfg.nu}")
    if cfg.weight_depth not in (1, 2):
        fail("weight_depth", f"must be 1 or 2, got {cfg.weight_depth}")
    if cfg.leaf_mode == "two_input" and cfg.leaf_components != 2:
        fail("leaf_components", "two_input leaves need leaf_components = 2")
    if cfg.epochs < 0:
        fail("epochs", f"must be >= 0, got {cfg.epochs}")
    if not cfg.learning_rate > 0:
        fail("learning_rate", f"must be > 0, got {cfg.learning_rate}")
    if not 0 < cfg.val_fraction < 1:
        fail("val_fraction", f"must lie in (0, 1), got {cfg.val_fraction}")
    for key in ("adam_beta1", "adam_beta2"):
        if not 0 <= getattr(cfg, key) < 1:
            fail(key, f"must lie in [0, 1), got {getattr(cfg, key)}")
    if not cfg.adam_epsilon > 0:
        fail("adam_epsilon", f"must be > 0, got {cfg.adam_epsilon}")
    if cfg.weight_decay < 0:
        fail("weight_decay", f"must be >= 0, got {cfg.weight_decay}")


def parse_config(source: str | Path = "", overrides: dict | None = None) -> Config:
    """Parse config text (or a ``Path`` to a config file) into a validated Config.

    Missing keys take their defaults; ``overrides`` replace parsed values.
    """
    if isinstance(source, Path):
        try:
            source = source.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"cannot read config: {e}") from e
    values: dict = {}
    where: dict[str, int] = {}
    for lineno, line in enumerate(source.splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"expected 'key = value', got {line.strip()!r}", lineno)
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {where[key]})", lineno)
        values[key] = _coerce(key, raw, lineno)
        where[key] = lineno
    values.update(overrides or {})
    cfg = Config(**values)
    _check(cfg, where)
    return cfg


def load_config(path) -> Config:
    return parse_config(Path(path))


def render_config(cfg: Config) -> str:
    """Every key, resolved, one per line; parse_config(render_config(c)) == c."""
    out = []
    for key in _ORDER:
        v = getattr(cfg, key)
        out.append((f"{key} = {v!r}" if isinstance(v, float) else f"{key} = {v}").rstrip())
    return "\n".join(out) + "\n"


def config_for_model(model: Model, **train_fields) -> Config:
    """Reconstruct a Config describing ``model``'s architecture."""
    s = model.structure
    if len(set(s.nu)) > 1:
        raise ConfigError("per-layer nu windows cannot be expressed in a flat config")
    arch = dict(
        components=s.num_components, leaf_components=s.num_leaf_components,
        nu=s.nu[0] if s.nu else 1, layer_kind=s.layer_kind, weight_depth=model.weight_depth,
        weight_input=model.weight_input, num_classes=model.num_classes,
        leaf_mode=model.leaf_mode, categories=model.num_categories)
    if model.leaf_mode == "two_input":
        arch["categories"] = Config.categories
    if s.is_grid:
        arch.update(layout="2d", height=s.grid_shape[0], width=s.grid_shape[1])
    else:
        arch.update(layout="1d", num_vars=s.num_variables)
    cfg = Config(**arch, **train_fields)
    if cfg.build_structure().fingerprint() != s.fingerprint():
        raise ConfigError("model structure cannot be reproduced from a flat config")
    return cfg


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: Config
    model: Model
    optimizer: AdamState | None = None


def _put_tensor(buf: io.BytesIO, name: str, arr: np.ndarray):
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def encode_checkpoint(model: Model, config: Config | None = None,
                      optimizer: AdamState | None = None) -> bytes:
    if config is None:
        config = config_for_model(model)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = render_config(config).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(bytes.fromhex(model.structure.fingerprint()))
    buf.write(struct.pack("<I", len(model.params)))
    for name, arr in model.params.items():
        _put_tensor(buf, name, arr)
    if optimizer is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(struct.pack("<Q", optimizer.step))
        for name in model.params:
            _put_tensor(buf, f"m.{name}", optimizer.m[name])
            _put_tensor(buf, f"v.{name}", optimizer.v[name])
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: Model, path, config: Config | None = None,
                    optimizer: AdamState | None = None) -> None:
    """Write atomically: the target is either absent, the old file, or complete."""
    blob = encode_checkpoint(model, config, optimizer)
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise PNCError(f"cannot write checkpoint {path}: {e}") from e


class _Reader:
    def __init__(self, blob: bytes, path: str | None):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("unexpected end of checkpoint", self.pos, self.path)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<H")
        name = self.take(n).decode("utf-8")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}Q")
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)
        return name, data.reshape(shape)


def decode_checkpoint(blob: bytes, structure: CircuitStructure | None = None,
                      path: str | None = None) -> Checkpoint:
    if len(blob) < len(MAGIC) + _DIGEST or blob[:4] != MAGIC:
        if blob[:4] != MAGIC and len(blob) >= 4:
            raise FormatError(f"bad magic {blob[:4]!r}", 0, path)
        raise ChecksumError("file too short to be a checkpoint", len(blob), path)
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch (truncated or corrupted)", len(body), path)

    r = _Reader(body, path)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4, path)
    (n,) = r.unpack("<I")
    config = parse_config(r.take(n).decode("utf-8"))
    fingerprint = r.take(_DIGEST).hex()
    if structure is not None and structure.fingerprint() != fingerprint:
        raise FingerprintMismatch(
            f"{path or 'checkpoint'}: structure fingerprint {fingerprint[:12]} does not "
            f"match the target structure {structure.fingerprint()[:12]}")
    model = config.build_model()
    if model.structure.fingerprint() != fingerprint:
        raise FingerprintMismatch(
            f"{path or 'checkpoint'}: stored config does not reproduce the stored structure")

    (count,) = r.unpack("<I")
    tensors = dict(r.tensor() for _ in range(count))
    if list(tensors) != list(model.params):
        raise FormatError(f"parameter set {sorted(tensors)} does not match the model",
                          r.pos, path)
    for name, arr in tensors.items():
        if arr.shape != model.params[name].shape:
            raise FormatError(f"{name} has shape {arr.shape}, expected "
                              f"{model.params[name].shape}", r.pos, path)
    model.params = tensors

    optimizer = None
    (flag,) = r.unpack("<B")
    if flag:
        (step,) = r.unpack("<Q")
        state = AdamState(step=step)
        for name in model.params:
            for acc in (state.m, state.v):
                key, arr = r.tensor()
                acc[key[2:]] = arr
        optimizer = state
    if r.pos != len(body):
        raise FormatError("trailing bytes after checkpoint payload", r.pos, path)
    return Checkpoint(config, model, optimizer)


def load_checkpoint(path, structure: CircuitStructure | None = None) -> Checkpoint:
    """Load a checkpoint; with ``structure`` given, refuse on a fingerprint mismatch."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint: {e}", path=str(path)) from e
    return decode_checkpoint(blob, structure, str(path))


def with_overrides(cfg: Config, **changes) -> Config:
    """A validated copy of ``cfg`` with some fields replaced."""
    out = dataclasses.replace(cfg, **changes)
    _check(out, {})
    return out
