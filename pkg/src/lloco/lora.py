"""Low-rank adaptors: math, files, and the group-keyed registry."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptFileError, NotFoundError
from .fileformat import atomic_write, read_packed, write_packed
from .model import Decoder, ModelConfig

PROJECTIONS = {"query": "wq", "value": "wv"}


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class LoraAdaptor:
    adaptor_id: str
    group_id: str
    rank: int
    alpha: float
    pairs: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def targets(self) -> list[tuple[int, str]]:
        return sorted(self.pairs)

    def copy(self) -> "LoraAdaptor":
        return LoraAdaptor(self.adaptor_id, self.group_id, self.rank, self.alpha,
                           {k: (a.copy(), b.copy()) for k, (a, b) in self.pairs.items()}, dict(self.meta))

    def delta_matrix(self, target: tuple[int, str]) -> np.ndarray:
        a, b = self.pairs[target]
        return self.scale * (b.astype(np.float64) @ a.astype(np.float64))

    def n_params(self) -> int:
        return sum(a.size + b.size for a, b in self.pairs.values())


def default_targets(cfg: ModelConfig) -> list[tuple[int, str]]:
    return [(l, p) for l in range(cfg.n_layers) for p in PROJECTIONS]


def init_adaptor(group_id: str, targets: Sequence[tuple[int, str]] | None = None, r: int = 8,
                 alpha: float = 16.0, seed: int = 0, config: ModelConfig | None = None,
                 adaptor_id: str | None = None, dtype=np.float32) -> LoraAdaptor:
    """Fresh adaptor: A ~ N(0, 1/d_in), B = 0, so the applied delta is exactly zero."""
    cfg = config or ModelConfig()
    if r < 1:
        raise ValueError("rank must be >= 1")
    targets = list(targets) if targets is not None else default_targets(cfg)
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    pairs = {}
    for layer, proj in targets:
        if proj not in PROJECTIONS or not 0 <= layer < cfg.n_layers:
            raise ValueError(f"unknown adaptor target {(layer, proj)!r}")
        a = (rng.standard_normal((r, d)) / np.sqrt(d)).astype(dtype)
        pairs[(int(layer), proj)] = (a, np.zeros((d, r), dtype=dtype))
    aid = adaptor_id or f"{group_id}-r{r}-s{seed}"
    return LoraAdaptor(aid, group_id, r, float(alpha), pairs)


def apply_delta(adaptor: LoraAdaptor, target: tuple[int, str], x: np.ndarray) -> np.ndarray:
    """(alpha/r) * B (A x) for a vector ``x`` or each row of a matrix."""
    a, b = adaptor.pairs[target]
    x = np.asarray(x)
    if x.shape[-1] != a.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} != adaptor d_in {a.shape[1]}")
    return adaptor.scale * ((x @ a.T) @ b.T)


def _params_of(weights):
    return weights.params if isinstance(weights, Decoder) else weights


def _rewrap(weights, params):
    return Decoder(weights.config, params) if isinstance(weights, Decoder) else params


def merge(adaptor: LoraAdaptor, weights):
    """Fold the adaptor into copies of the projection weights: W' = W + (alpha/r) B A."""
    src = _params_of(weights)
    out = dict(src)
    for (layer, proj), _ in adaptor.pairs.items():
        name = f"h{layer}.{PROJECTIONS[proj]}"
        w = src[name]
        delta = adaptor.delta_matrix((layer, proj))
        if delta.shape != w.shape:
            raise ValueError(f"adaptor delta {delta.shape} does not match {name} {w.shape}")
        out[name] = (w.astype(np.float64) + delta).astype(w.dtype)
    return _rewrap(weights, out)


def unmerge(merged, adaptor: LoraAdaptor):
    src = _params_of(merged)
    out = dict(src)
    for (layer, proj), _ in adaptor.pairs.items():
        name = f"h{layer}.{PROJECTIONS[proj]}"
        w = src[name]
        delta = adaptor.delta_matrix((layer, proj))
        if delta.shape != w.shape:
            raise ValueError(f"adaptor delta {delta.shape} does not match {name} {w.shape}")
        out[name] = (w.astype(np.float64) - delta).astype(w.dtype)
    return _rewrap(merged, out)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def save_adaptor(adaptor: LoraAdaptor, path) -> Path:
    tensors = []
    for layer, proj in adaptor.targets:
        a, b = adaptor.pairs[(layer, proj)]
        tensors += [(f"{layer}.{proj}.A", a), (f"{layer}.{proj}.B", b)]
    meta = {
        "adaptor_id": adaptor.adaptor_id,
        "group_id": adaptor.group_id,
        "r": adaptor.rank,
        "alpha": adaptor.alpha,
        "targets": [[l, p] for l, p in adaptor.targets],
        "meta": adaptor.meta,
    }
    write_packed(path, "adaptor", meta, tensors)
    return Path(path)


def load_adaptor(path) -> LoraAdaptor:
    header, arrays = read_packed(path, "adaptor")
    try:
        pairs = {}
        for layer, proj in header["targets"]:
            pairs[(int(layer), proj)] = (arrays[f"{layer}.{proj}.A"], arrays[f"{layer}.{proj}.B"])
        ad = LoraAdaptor(header["adaptor_id"], header["group_id"], int(header["r"]), float(header["alpha"]),
                         pairs, header.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"{path}: adaptor header inconsistent with payload") from exc
    for (layer, proj), (a, b) in ad.pairs.items():
        if a.shape[0] != ad.rank or b.shape[1] != ad.rank:
            raise CorruptFileError(f"{path}: target {(layer, proj)} shapes do not match rank {ad.rank}")
    return ad


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


@dataclass
class AdaptorRecord:
    adaptor_id: str
    group_id: str
    path: str
    version: int
    created: str
    config_digest: str
    history: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class AdaptorRegistry:
    """One active adaptor per group, persisted as ``registry.json`` beside the files."""

    MANIFEST = "registry.json"

    def __init__(self, root):
        self.root = Path(root)
        self._records: dict[str, AdaptorRecord] = {}
        self._cache: dict[str, LoraAdaptor] = {}
        self._lock = threading.Lock()
        mf = self.root / self.MANIFEST
        if mf.exists():
            try:
                data = json.loads(mf.read_text())
                self._records = {g: AdaptorRecord(**r) for g, r in data["groups"].items()}
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorruptFileError(f"{mf}: unreadable registry") from exc

    def _write_manifest(self) -> None:
        body = {"format_version": 1, "groups": {g: r.to_dict() for g, r in sorted(self._records.items())}}
        atomic_write(self.root / self.MANIFEST, json.dumps(body, indent=1).encode())

    def register(self, adaptor: LoraAdaptor, train_config: dict | None = None) -> AdaptorRecord:
        with self._lock:
            g = adaptor.group_id
            fname = f"{_safe(g)}.lora"
            path = self.root / fname
            prev = self._records.get(g)
            history: list[str] = []
            version = 1
            if prev is not None:
                old = self.root / prev.path
                kept = f"{_safe(g)}.v{prev.version}.lora"
                if old.exists():
                    old.replace(self.root / kept)
                history = prev.history + [kept]
                version = prev.version + 1
            save_adaptor(adaptor, path)
            rec = AdaptorRecord(
                adaptor_id=adaptor.adaptor_id,
                group_id=g,
                path=fname,
                version=version,
                created=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
                config_digest=digest(train_config or {}),
                history=history,
            )
            self._records[g] = rec
            self._cache.pop(g, None)
            self._write_manifest()
            return rec

    def lookup(self, group_id: str) -> AdaptorRecord:
        try:
            return self._records[group_id]
        except KeyError:
            raise NotFoundError(f"no adaptor registered for group {group_id!r}") from None

    def load(self, group_id: str) -> LoraAdaptor:
        rec = self.lookup(group_id)
        with self._lock:
            ad = self._cache.get(group_id)
            if ad is None:
                ad = load_adaptor(self.root / rec.path)
                self._cache[group_id] = ad
        return ad

    def groups(self) -> list[str]:
        return sorted(self._records)

    def records(self) -> list[AdaptorRecord]:
        return [self._records[g] for g in self.groups()]

    def __contains__(self, group_id: str) -> bool:
        return group_id in self._records

    def __len__(self) -> int:
        return len(self._records)


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
