"""On-disk formats: demonstration datasets, checkpoints, run configs and CSV logs.

Binary files are little-endian with a magic string and a format version.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bc import Dataset, TrainConfig
from .guided import GuidanceConfig
from .policy import ArchConfig, Normalizer, PolicyParams
from .sim import TRUNCATED, Phantom, SimConfig

DATASET_MAGIC = b"USDEMO"
CHECKPOINT_MAGIC = b"USCKPT"
FORMAT_VERSION = 1
OUT_ENV = "SONOSKILL_OUT"

_DS_HEADER = struct.Struct("<6sHIIQI")  # magic, version, H, W, records, episodes
_CK_HEADER = struct.Struct("<6sHI")  # magic, version, arch json length
_CK_TAIL = struct.Struct("<Q32sB")  # parameter count, sha256, quality_trained


class FormatError(ValueError):
    """File is truncated, has the wrong magic/version, or fails its checksum."""


class ChecksumMismatch(FormatError):
    pass


class ConfigMismatch(ValueError):
    pass


# -- datasets ------------------------------------------------------------------

def record_dtype(h: int, w: int) -> np.dtype:
    return np.dtype([
        ("episode_id", "<u4"), ("step", "<u4"), ("image", "<f4", (h, w)),
        ("P", "<f8", (3,)), ("O", "<f8", (4,)), ("F", "<f8", (6,)),
        ("action", "<f8", (7,)), ("label", "u1"),
    ])


def dataset_bytes(d: Dataset, hw: int | None = None) -> bytes:
    hw = d.image_hw if d.N else (hw or 0)
    rec = np.zeros(d.N, dtype=record_dtype(hw, hw))
    rec["episode_id"], rec["step"], rec["image"] = d.episode_ids, d.steps, d.images
    rec["P"], rec["O"], rec["F"] = d.positions, d.orientations, d.wrenches
    rec["action"], rec["label"] = d.actions, d.labels
    head = _DS_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, hw, hw, d.N, d.n_episodes)
    return head + rec.tobytes()


def write_dataset(path, d: Dataset, hw: int | None = None):
    Path(path).write_bytes(dataset_bytes(d, hw))


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _DS_HEADER.size:
        raise FormatError(f"{path}: too short for a dataset header")
    magic, version, h, w, n, n_ep = _DS_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    dt = record_dtype(h, w)
    body = raw[_DS_HEADER.size:]
    if len(body) != n * dt.itemsize:
        raise FormatError(f"{path}: header says {n} records, payload holds {len(body) / dt.itemsize:g}")
    rec = np.frombuffer(body, dtype=dt)
    d = Dataset(rec["episode_id"].copy(), rec["step"].copy(), rec["image"].copy(), rec["P"].copy(),
                rec["O"].copy(), rec["F"].copy(), rec["action"].copy(), rec["label"].copy())
    if d.n_episodes != n_ep:
        raise FormatError(f"{path}: header says {n_ep} episodes, records hold {d.n_episodes}")
    return d


# -- checkpoints ---------------------------------------------------------------

def _arch_json(cfg: ArchConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True).encode()


def checkpoint_bytes(params: PolicyParams) -> bytes:
    payload = np.ascontiguousarray(params.norm.vector(), dtype="<f8").tobytes()
    payload += b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in params.tensors())
    flag = int(params.quality_trained)
    digest = hashlib.sha256(bytes([flag]) + payload).digest()
    arch = _arch_json(params.cfg)
    return (_CK_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(arch)) + arch
            + _CK_TAIL.pack(params.n_params, digest, flag) + payload)


def write_checkpoint(path, params: PolicyParams):
    Path(path).write_bytes(checkpoint_bytes(params))


def read_checkpoint(path, expect: ArchConfig | None = None) -> PolicyParams:
    """Load and verify a checkpoint; ``expect`` must match the stored architecture when given."""
    raw = Path(path).read_bytes()
    if len(raw) < _CK_HEADER.size:
        raise FormatError(f"{path}: too short for a checkpoint header")
    magic, version, n_arch = _CK_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = _CK_HEADER.size
    try:
        arch = json.loads(raw[off:off + n_arch])
        cfg = ArchConfig(**arch)
    except (ValueError, TypeError) as e:
        raise FormatError(f"{path}: unreadable architecture block ({e})") from e
    if expect is not None and cfg != expect:
        raise ConfigMismatch(f"{path}: stored architecture {cfg} differs from configured {expect}")
    off += n_arch
    n_params, digest, flag = _CK_TAIL.unpack_from(raw, off)
    payload = raw[off + _CK_TAIL.size:]
    params = PolicyParams(cfg)
    if n_params != params.n_params:
        raise FormatError(f"{path}: header says {n_params} parameters, architecture has {params.n_params}")
    if len(payload) != 8 * (36 + n_params):
        raise FormatError(f"{path}: payload length {len(payload)} does not match {n_params} parameters")
    if hashlib.sha256(bytes([flag]) + payload).digest() != digest:
        raise ChecksumMismatch(f"{path}: content checksum does not match")
    values = np.frombuffer(payload, dtype="<f8")
    params.norm = Normalizer.from_vector(values[:36].copy())
    pos = 36
    for t in params.tensors():
        t[...] = values[pos:pos + t.size].reshape(t.shape)
        pos += t.size
    params.quality_trained = bool(flag)
    return params


# -- run configuration ---------------------------------------------------------

def default_out_dir() -> str:
    return os.environ.get(OUT_ENV, "runs")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = field(default_factory=default_out_dir)
    episodes: int = 100
    quality_episodes: int = 400
    truncation: str = TRUNCATED
    hold_steps: int = 10
    eval_episodes: int = 50
    eval_max_steps: int = 60
    eval_seed: int = 1000
    phantom: Phantom = field(default_factory=Phantom)
    sim: SimConfig = field(default_factory=SimConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    bc: TrainConfig = field(default_factory=TrainConfig)
    quality: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=100))
    guide: GuidanceConfig = field(default_factory=GuidanceConfig)

    def __post_init__(self):
        if self.episodes < 0 or self.quality_episodes < 0 or self.eval_episodes < 0:
            raise ValueError("episode counts must be non-negative")
        if self.eval_max_steps < 1:
            raise ValueError("eval_max_steps must be >= 1")


_NESTED = ("phantom", "sim", "arch", "bc", "quality", "guide")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if isinstance(like, tuple):
        kind = type(like[0]) if like else float
        return tuple(kind(x) for x in text.split(",") if x.strip())
    if isinstance(like, (int, float, str)):
        return type(like)(text)
    raise TypeError(f"cannot parse into {type(like).__name__}")


def config_items(cfg: RunConfig) -> list[tuple[str, str]]:
    items = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _NESTED:
            items += [(f"{f.name}.{g.name}", _fmt(getattr(v, g.name))) for g in dataclasses.fields(v)]
        else:
            items.append((f.name, _fmt(v)))
    return items


def dump_config(cfg: RunConfig, exclude=()) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_items(cfg) if k not in exclude)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Overlay ``key = value`` lines onto ``base`` (defaults when omitted)."""
    base = base or RunConfig()
    top, nested = {}, {n: {} for n in _NESTED}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.rpartition(".")
        target = nested.get(section) if section else top
        holder = getattr(base, section) if section else base
        if target is None or name not in {f.name for f in dataclasses.fields(holder)}:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        like = getattr(holder, name)
        if isinstance(like, float) and not isinstance(like, bool):
            target[name] = float(value)
        else:
            target[name] = _parse(value, like)
    subs = {n: dataclasses.replace(getattr(base, n), **kv) for n, kv in nested.items()}
    return dataclasses.replace(base, **top, **subs)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def save_config(path, cfg: RunConfig, exclude=()):
    Path(path).write_text(dump_config(cfg, exclude))


# -- CSV -----------------------------------------------------------------------

def write_rows(path, rows: list[dict], columns: list[str] | None = None):
    """Header row plus one line per dict; floats are written with repr for exactness."""
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (r[c] for c in columns)])


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
