"""Ingestion: fetching, quality checking, pool construction, checkpoints.

Sources are described by manifest files (``source<TAB>keyword`` per line,
``#`` comments), plain directories, or a pluggable search-API provider.
Fetching runs with a bounded worker pool behind a shared token bucket;
results always come back in manifest order and per-entry failures never
abort the run.

Keywords are provenance only, never labels.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import threading
import time
import urllib.error
import urllib.request
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from soi.errors import CheckpointError, DataError
from soi.imgproc import bilinear_resize

CHECKPOINT_MAGIC = b"SOI1"
CHECKPOINT_VERSION = 1
_DTYPE_F32 = 0
_DTYPE_U8 = 1


# -- fetching ---------------------------------------------------------------------


@dataclass(frozen=True)
class FetchConfig:
    max_concurrency: int = 4
    requests_per_second: float = 8.0
    retries: int = 2
    timeout: float = 10.0
    min_dim: int = 32
    backoff_base: float = 0.25

    def __post_init__(self):
        if self.max_concurrency <= 0 or self.requests_per_second <= 0 or self.timeout <= 0:
            raise ValueError("max_concurrency, requests_per_second and timeout must be positive")
        if self.retries < 0:
            raise ValueError("retries must be non-negative")


@dataclass(frozen=True)
class ManifestEntry:
    source: str
    keyword: str | None = None


@dataclass
class FetchResult:
    source: str
    keyword: str | None
    status: str  # ok | http-error | timeout | io-error
    data: bytes | None
    reason: str
    ms: float

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def read_manifest(path) -> list[ManifestEntry]:
    """One entry per line: ``source<TAB>keyword`` (keyword optional)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"unreadable manifest {path}: {exc}") from exc
    entries = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        source, _, keyword = line.partition("\t")
        entries.append(ManifestEntry(source.strip(), keyword.strip() or None))
    return entries


def directory_entries(path) -> list[ManifestEntry]:
    """All regular files under ``path`` (sorted), keyword-less."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"not a directory: {path}")
    return [ManifestEntry(str(p)) for p in sorted(root.rglob("*")) if p.is_file()]


class SearchProvider:
    """Slot for keyword-driven source discovery (e.g. an image-search API).

    Subclasses implement ``search`` and the result feeds straight into
    ``fetch``.  Nothing in this package performs live search by itself.
    """

    def search(self, keyword: str, limit: int) -> list[str]:
        raise NotImplementedError

    def entries(self, keywords, limit_per_keyword: int) -> list[ManifestEntry]:
        out = []
        for kw in keywords:
            for url in self.search(kw, limit_per_keyword):
                out.append(ManifestEntry(url, kw))
        return out


class TokenBucket:
    """Blocking rate limiter: request starts are at least 1/rate apart."""

    def __init__(self, rate_per_second: float):
        self._interval = 1.0 / rate_per_second
        self._lock = threading.Lock()
        self._next_free = time.monotonic()

    def acquire(self) -> None:
        with self._lock:
            now = time.monotonic()
            wait = self._next_free - now
            self._next_free = max(self._next_free, now) + self._interval
        if wait > 0:
            time.sleep(wait)


def _read_source(source: str, timeout: float) -> bytes:
    if source.startswith(("http://", "https://")):
        with urllib.request.urlopen(source, timeout=timeout) as resp:
            return resp.read()
    if source.startswith("file://"):
        source = source[len("file://"):]
    return Path(source).read_bytes()


def _fetch_one(entry: ManifestEntry, config: FetchConfig, bucket: TokenBucket) -> FetchResult:
    start = time.monotonic()
    status, reason, payload = "io-error", "", None
    for attempt in range(config.retries + 1):
        bucket.acquire()
        try:
            payload = _read_source(entry.source, config.timeout)
            status, reason = "ok", ""
            break
        except urllib.error.HTTPError as exc:
            status, reason = "http-error", f"HTTP {exc.code}"
        except TimeoutError as exc:
            status, reason = "timeout", str(exc) or "timed out"
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, TimeoutError):
                status, reason = "timeout", "timed out"
            else:
                status, reason = "io-error", str(exc.reason)
        except OSError as exc:
            status, reason = "io-error", str(exc)
        if attempt < config.retries:
            time.sleep(config.backoff_base * (2 ** attempt))
    ms = (time.monotonic() - start) * 1000.0
    return FetchResult(entry.source, entry.keyword, status, payload, reason, ms)


def fetch(entries, config: FetchConfig) -> list[FetchResult]:
    """Fetch every entry; per-entry failures are recorded, never raised.

    At most ``max_concurrency`` requests are in flight and starts obey the
    shared token bucket.  Results keep the manifest order.
    """
    entries = list(entries)
    if not entries:
        return []
    bucket = TokenBucket(config.requests_per_second)
    with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
        return list(pool.map(lambda e: _fetch_one(e, config, bucket), entries))


def write_fetch_report(results, path) -> None:
    lines = ["source,status,reason,bytes,ms"]
    for r in results:
        nbytes = len(r.data) if r.data is not None else 0
        reason = r.reason.replace(",", ";")
        lines.append(f"{r.source},{r.status},{reason},{nbytes},{r.ms:.1f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- quality checking --------------------------------------------------------------


@dataclass(frozen=True)
class ImageRecord:
    id: str  # sha-256 hex of the encoded bytes
    source: str
    keyword: str | None
    data: bytes
    width: int
    height: int
    format: str  # PNG | JPEG


@dataclass(frozen=True)
class CheckOutcome:
    record: ImageRecord | None
    reason: str | None  # undecodable | too-small | duplicate

    @property
    def ok(self) -> bool:
        return self.record is not None


class QualityChecker:
    """Format/size gate plus exact-content dedup, scoped to one run."""

    def __init__(self, min_dim: int):
        self.min_dim = min_dim
        self._seen: set[str] = set()

    def check(self, source: str, data: bytes, keyword: str | None = None) -> CheckOutcome:
        try:
            img = Image.open(io.BytesIO(data))
            fmt = img.format
            img.load()
        except Exception:
            return CheckOutcome(None, "undecodable")
        if fmt not in ("PNG", "JPEG"):
            return CheckOutcome(None, "undecodable")
        width, height = img.size
        if min(width, height) < self.min_dim:
            return CheckOutcome(None, "too-small")
        digest = hashlib.sha256(data).hexdigest()
        if digest in self._seen:
            return CheckOutcome(None, "duplicate")
        self._seen.add(digest)
        return CheckOutcome(
            ImageRecord(digest, source, keyword, data, width, height, fmt), None
        )


# -- the pool ----------------------------------------------------------------------


def fisher_yates_order(n: int, seed: int) -> list[int]:
    """Deterministic shuffle order of range(n) under the given seed."""
    rng = np.random.default_rng(seed)
    idx = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    return idx


class DataPool:
    """Deterministically shuffled, deduplicated corpus of image records.

    The order is a pure function of (insertion order, shuffle_seed), so
    appending records (incremental re-ingestion) reshuffles reproducibly.
    """

    def __init__(self, records, shuffle_seed: int):
        self.shuffle_seed = shuffle_seed
        self._insertion: list[ImageRecord] = []
        self._ids: set[str] = set()
        self._order: list[int] = []
        self.extend(records)

    def extend(self, records) -> None:
        for rec in records:
            if rec.id in self._ids:
                raise DataError(f"duplicate record id {rec.id[:12]}")
            self._ids.add(rec.id)
            self._insertion.append(rec)
        self._order = fisher_yates_order(len(self._insertion), self.shuffle_seed)

    @property
    def records(self) -> list[ImageRecord]:
        return [self._insertion[i] for i in self._order]

    def __len__(self) -> int:
        return len(self._insertion)

    def __iter__(self):
        return iter(self.records)


def build_pool(records, shuffle_seed: int) -> DataPool:
    return DataPool(records, shuffle_seed)


_FORMAT_EXT = {"PNG": "png", "JPEG": "jpg"}


def save_pool_cache(pool: DataPool, directory) -> None:
    """Persist the pool as image files plus an insertion-ordered index."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    index = {"shuffle_seed": pool.shuffle_seed, "entries": []}
    for rec in pool._insertion:
        ext = _FORMAT_EXT[rec.format]
        (root / f"{rec.id}.{ext}").write_bytes(rec.data)
        index["entries"].append(
            {"id": rec.id, "source": rec.source, "keyword": rec.keyword,
             "format": rec.format, "width": rec.width, "height": rec.height}
        )
    (root / "pool_index.json").write_text(
        json.dumps(index, indent=1, sort_keys=True), encoding="utf-8"
    )


def load_pool_cache(directory) -> DataPool:
    root = Path(directory)
    try:
        index = json.loads((root / "pool_index.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable pool cache at {directory}: {exc}") from exc
    records = []
    for meta in index["entries"]:
        path = root / f"{meta['id']}.{_FORMAT_EXT[meta['format']]}"
        records.append(ImageRecord(
            meta["id"], meta["source"], meta.get("keyword"), path.read_bytes(),
            meta["width"], meta["height"], meta["format"],
        ))
    return DataPool(records, index["shuffle_seed"])


def decode_resize(record: ImageRecord, target_size) -> np.ndarray:
    """Decode to RGB (3,H,W) float32 in [0,1], bilinearly resized."""
    try:
        img = Image.open(io.BytesIO(record.data)).convert("RGB")
    except Exception as exc:
        raise DataError(f"decode regression for record {record.id[:12]}: {exc}") from exc
    arr = np.asarray(img, dtype=np.float32) / 255.0
    chw = np.ascontiguousarray(arr.transpose(2, 0, 1))
    h, w = target_size
    return bilinear_resize(chw, h, w).astype(np.float32)


# -- checkpoints -------------------------------------------------------------------


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    if arr.dtype == np.uint8:
        code, payload = _DTYPE_U8, arr.tobytes()
    else:
        code, payload = _DTYPE_F32, np.ascontiguousarray(arr, dtype="<f4").tobytes()
    head = struct.pack("<H", len(encoded)) + encoded
    head += struct.pack("<BB", code, arr.ndim)
    head += b"".join(struct.pack("<I", d) for d in arr.shape)
    return head + payload


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict) -> None:
    """Binary container: magic, version, named tensors, trailing CRC32.

    ``config`` is embedded as a JSON uint8 entry named ``__config__`` so a
    loaded checkpoint can be validated against the run that reads it.
    """
    buf = io.BytesIO()
    items = list(arrays.items())
    items.append(("__config__", np.frombuffer(
        json.dumps(config, sort_keys=True).encode("utf-8"), dtype=np.uint8)))
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        buf.write(_pack_entry(name, np.asarray(arr)))
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(payload + struct.pack("<I", crc))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of save_checkpoint; bitwise round-trip, integrity-checked."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 12 + 4:
        raise CheckpointError("truncated checkpoint header")
    body, crc_bytes = blob[:-4], blob[-4:]
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    r = _Reader(body)
    r.take(4, "magic")
    version = struct.unpack("<I", r.take(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    count = struct.unpack("<I", r.take(4, "entry count"))[0]
    arrays: dict[str, np.ndarray] = {}
    config: dict = {}
    for _ in range(count):
        name_len = struct.unpack("<H", r.take(2, "tensor name length"))[0]
        name = r.take(name_len, "tensor name").decode("utf-8")
        code, rank = struct.unpack("<BB", r.take(2, f"tensor {name} header"))
        dims = tuple(
            struct.unpack("<I", r.take(4, f"tensor {name} dims"))[0] for _ in range(rank)
        )
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        if code == _DTYPE_F32:
            raw = r.take(4 * n, f"tensor {name}")
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
        elif code == _DTYPE_U8:
            arr = np.frombuffer(r.take(n, f"tensor {name}"), dtype=np.uint8).reshape(dims)
        else:
            raise CheckpointError(f"unknown dtype code {code} for tensor {name}")
        if name == "__config__":
            config = json.loads(arr.tobytes().decode("utf-8"))
        else:
            arrays[name] = arr
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes in checkpoint")
    if struct.unpack("<I", crc_bytes)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
        raise CheckpointError("checkpoint checksum mismatch")
    return arrays, config
