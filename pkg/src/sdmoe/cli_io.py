"""Binary checkpoints, flat key-value run configs and CSV/JSON report writers.

Checkpoint layout (all integers little-endian)::

    b"SDMK" | u32 version | u64 header_len | header (UTF-8 JSON) | payload

The header lists tensor records ``{name, shape, role}`` in payload order; the
payload is every tensor as row-major little-endian float64.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    ShapeMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .moe_layer import PROJECTIONS, MoeConfig, MoeParams
from .sd_expert import DecoupledLinear
from .spectral_metrics import AnalysisConfig
from .train_harness import SyntheticTaskSpec, TrainConfig

MAGIC = b"SDMK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


# ---------------------------------------------------------------- tensors


def save_tensors(path, tensors, meta: dict | None = None) -> None:
    """Write ``[(name, array, role), ...]`` plus a free-form ``meta`` dict."""
    records, blobs = [], []
    for name, arr, role in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        records.append({"name": name, "shape": list(arr.shape), "role": role})
        blobs.append(arr.tobytes(order="C"))
    header = json.dumps({"meta": meta or {}, "tensors": records}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str], dict]:
    """Return ``(tensors, roles, meta)``; tensors keep header order."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _PREFIX.size:
        raise TruncatedPayloadError(f"{path}: truncated payload (file ends inside the prefix)")
    _, version, hlen = _PREFIX.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise TruncatedPayloadError(f"{path}: truncated payload (file ends inside the header)")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
        records = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    offset = start + hlen
    tensors, roles = {}, {}
    for rec in records:
        shape = tuple(int(s) for s in rec["shape"])
        if any(s < 0 for s in shape):
            raise ShapeMismatchError(f"{path}: negative dimension in tensor {rec['name']}")
        nbytes = 8 * math.prod(shape)
        if offset + nbytes > len(data):
            raise TruncatedPayloadError(
                f"{path}: truncated payload (tensor {rec['name']} needs {nbytes} bytes, "
                f"{len(data) - offset} remain)"
            )
        arr = np.frombuffer(data, dtype="<f8", count=math.prod(shape), offset=offset)
        tensors[rec["name"]] = arr.reshape(shape).astype(np.float64)
        roles[rec["name"]] = rec.get("role", "")
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes after the payload")
    return tensors, roles, header.get("meta", {})


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: MoeParams, path, extra: dict | None = None) -> None:
    tensors = [("w_gate", params.w_gate, "gate")]
    layout: dict = {}
    if params.config.variant == "sd":
        for p in PROJECTIONS:
            dl = params.decoupled[p]
            tensors += [
                (f"{p}.w_c", dl.w_c, "common"),
                (f"{p}.u_k", dl.u_k, "basis"),
                (f"{p}.v_k", dl.v_k, "basis"),
                (f"{p}.sigma_k", dl.sigma_k, "sigma"),
            ]
            tensors += [(f"{p}.unique.{i}", w, "unique") for i, w in enumerate(dl.uniques)]
            layout[p] = {
                "refresh_interval": dl.refresh_interval,
                "steps_since_refresh": dl.steps_since_refresh,
            }
    else:
        for p in PROJECTIONS:
            tensors.append((f"{p}.experts", params.experts[p], "expert"))
        if params.shared is not None:
            for p in PROJECTIONS:
                tensors.append((f"{p}.shared", params.shared[p], "shared"))
    meta = {
        "kind": "moe_params",
        "config": dataclasses.asdict(params.config),
        "decoupled": layout,
        "version": params.version,
        "extra": extra or {},
    }
    save_tensors(path, tensors, meta)


def _take(tensors, name, shape, path):
    if name not in tensors:
        raise ShapeMismatchError(f"{path}: missing tensor {name}")
    arr = tensors[name]
    if arr.shape != tuple(shape):
        raise ShapeMismatchError(f"{path}: tensor {name} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def load_checkpoint(path) -> MoeParams:
    tensors, _, meta = load_tensors(path)
    if meta.get("kind") != "moe_params":
        raise CheckpointError(f"{path}: not a model checkpoint")
    try:
        cfg = MoeConfig(**meta["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid layer config ({exc})") from exc
    e = cfg.n_experts
    params = MoeParams(cfg, _take(tensors, "w_gate", (e, cfg.d_model), path), version=int(meta.get("version", 0)))
    if cfg.variant == "sd":
        for p in PROJECTIONS:
            m, n = cfg.proj_shape(p)
            info = meta["decoupled"][p]
            params.decoupled[p] = DecoupledLinear(
                _take(tensors, f"{p}.w_c", (m, n), path),
                _take(tensors, f"{p}.u_k", (m, cfg.k), path),
                _take(tensors, f"{p}.v_k", (n, cfg.k), path),
                _take(tensors, f"{p}.sigma_k", (cfg.k,), path),
                [_take(tensors, f"{p}.unique.{i}", (m, n), path) for i in range(e)],
                int(info["refresh_interval"]),
                int(info["steps_since_refresh"]),
            )
    else:
        for p in PROJECTIONS:
            params.experts[p] = _take(tensors, f"{p}.experts", (e,) + cfg.proj_shape(p), path)
        if cfg.include_shared_expert:
            params.shared = {p: _take(tensors, f"{p}.shared", cfg.proj_shape(p), path) for p in PROJECTIONS}
    return params


def checkpoint_extra(path) -> dict:
    return load_tensors(path)[2].get("extra", {})


# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    moe: MoeConfig = field(default_factory=MoeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    ks: tuple[int, ...] = (2, 4, 8)
    lrs: tuple[float, ...] = (1e-3, 3e-3, 1e-2, 3e-2)

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            train=dataclasses.replace(self.train, seed=seed),
            task=dataclasses.replace(self.task, seed=seed),
        )

    def to_flat(self) -> dict:
        flat = {}
        flat.update(dataclasses.asdict(self.moe))
        flat.update(dataclasses.asdict(self.train))
        task = dataclasses.asdict(self.task)
        task.pop("d")
        task.pop("seed")
        flat.update(task)
        analysis = dataclasses.asdict(self.analysis)
        analysis.pop("energy_mode")
        flat.update(analysis)
        flat["ks"] = ",".join(str(k) for k in self.ks)
        flat["lrs"] = ",".join(repr(v) for v in self.lrs)
        return flat


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _caster(type_name: str):
    base = type_name.split("|")[0].strip()
    return {"int": int, "float": float, "bool": _parse_bool, "str": str}[base]


_SECTIONS = {
    "moe": MoeConfig,
    "train": TrainConfig,
    "task": SyntheticTaskSpec,
    "analysis": AnalysisConfig,
}
# keys shared between sections, or renamed on the way in
_ALIASES = {"d_model": ("moe.d_model", "task.d"), "seed": ("train.seed", "task.seed"), "aux_coef": ("moe.aux_coef", "train.aux_coef")}
_HIDDEN = {"task.d", "task.seed", "analysis.energy_mode"}


def _key_table():
    table = {}
    for sec, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            full = f"{sec}.{f.name}"
            if full in _HIDDEN:
                continue
            table.setdefault(f.name, []).append((full, _caster(str(f.type))))
    for key, targets in _ALIASES.items():
        casters = {full: c for full, c in (t for v in table.values() for t in v)}
        cast = casters.get(targets[0], int)
        table[key] = [(t, cast if t != "task.d" else int) for t in targets]
    table["ks"] = [("ks", lambda s: tuple(int(v) for v in s.split(",") if v.strip()))]
    table["lrs"] = [("lrs", lambda s: tuple(float(v) for v in s.split(",") if v.strip()))]
    return table


def parse_run_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    table = _key_table()
    values: dict[str, dict] = {sec: {} for sec in _SECTIONS}
    top: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in table:
            raise ConfigError(f"line {lineno}: unknown key {key!r}", lineno)
        for full, cast in table[key]:
            try:
                parsed = cast(val)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}", lineno) from exc
            if "." in full:
                sec, name = full.split(".", 1)
                values[sec][name] = parsed
            else:
                top[full] = parsed
    try:
        return RunConfig(
            moe=MoeConfig(**values["moe"]),
            train=TrainConfig(**values["train"]),
            task=SyntheticTaskSpec(**values["task"]),
            analysis=AnalysisConfig(**values["analysis"]),
            **top,
        )
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text(encoding="utf-8"))


def dump_run_config(cfg: RunConfig) -> str:
    lines = [f"{k} = {_fmt_config_value(v)}" for k, v in cfg.to_flat().items()]
    return "\n".join(lines) + "\n"


def _fmt_config_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        raise ValueError("None values cannot be written to a flat config")
    return str(v)


# ---------------------------------------------------------------- reports


def format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def write_csv(path, header, rows) -> None:
    """UTF-8, LF line endings, floats with 9 significant digits."""
    header = list(header)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
            writer.writerow([format_cell(v) for v in row])


def write_dict_rows(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    header = list(rows[0])
    write_csv(path, header, [[r[h] for h in header] for r in rows])


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def dump_run_config_from_flat(flat: dict) -> str:
    return "\n".join(f"{k} = {_fmt_config_value(v)}" for k, v in flat.items()) + "\n"
