"""File-backed image and configuration stores.

Layout under a shared root::

    <root>/images/<sha256 digest>
    <root>/configs/<function>.json

Writes go to a temporary file in the same directory and are renamed into
place, so concurrent readers never observe partial records.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from pathlib import Path

from faastree.errors import IntegrityError, NotFound, StoreError
from faastree.protocol import FunctionConfig, validate_digest, validate_function_id

MAX_IMAGE = 512 * 1024 * 1024
CONFIG_TTL_S = 10.0


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


class ImageStore:
    """Content-addressed blob store keyed by SHA-256."""

    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)
        self.dir = self.root / "images"

    def put_image(self, data: bytes) -> str:
        if not data:
            raise ValueError("image must be non-empty")
        if len(data) > MAX_IMAGE:
            raise ValueError(f"image of {len(data)} bytes exceeds 512 MiB")
        digest = hashlib.sha256(data).hexdigest()
        path = self.dir / digest
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
            if not path.exists():
                _atomic_write(path, data)
        except OSError as exc:
            raise StoreError(f"cannot store image {digest}: {exc}") from exc
        return digest

    def get_image(self, digest: str) -> bytes:
        validate_digest(digest)
        try:
            data = (self.dir / digest).read_bytes()
        except FileNotFoundError:
            raise NotFound(f"image {digest} not in store") from None
        except OSError as exc:
            raise StoreError(f"cannot read image {digest}: {exc}") from exc
        if hashlib.sha256(data).hexdigest() != digest:
            raise IntegrityError(f"image {digest} failed digest check")
        return data


class ConfigStore:
    """One JSON record per function; last write wins."""

    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)
        self.dir = self.root / "configs"

    def _path(self, function: str) -> Path:
        return self.dir / f"{validate_function_id(function)}.json"

    def put_config(self, cfg: FunctionConfig) -> None:
        data = json.dumps(cfg.to_dict(), indent=2).encode()
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
            _atomic_write(self._path(cfg.function), data)
        except OSError as exc:
            raise StoreError(f"cannot store config for {cfg.function}: {exc}") from exc

    def get_config(self, function: str) -> FunctionConfig:
        try:
            raw = self._path(function).read_text()
        except FileNotFoundError:
            raise NotFound(f"no config for function {function!r}") from None
        try:
            return FunctionConfig.from_dict(json.loads(raw))
        except (ValueError, KeyError, TypeError) as exc:
            raise StoreError(f"corrupt config for {function!r}: {exc}") from None

    def functions(self) -> list[str]:
        if not self.dir.exists():
            return []
        return sorted(p.stem for p in self.dir.glob("*.json"))


class StaticConfigs:
    """In-memory stand-in for ConfigStore."""

    def __init__(self, configs: list[FunctionConfig] | None = None) -> None:
        self._configs = {c.function: c for c in configs or []}

    def put_config(self, cfg: FunctionConfig) -> None:
        self._configs[cfg.function] = cfg

    def get_config(self, function: str) -> FunctionConfig:
        try:
            return self._configs[function]
        except KeyError:
            raise NotFound(f"no config for function {function!r}") from None

    def functions(self) -> list[str]:
        return sorted(self._configs)


class CachedConfigs:
    """Cache-aside wrapper; hits expire after ``ttl_s``, misses are not cached."""

    def __init__(self, store, ttl_s: float = CONFIG_TTL_S, clock=time.monotonic) -> None:
        self.store = store
        self.ttl_s = ttl_s
        self.clock = clock
        self._cache: dict[str, tuple[float, FunctionConfig]] = {}

    def get_config(self, function: str) -> FunctionConfig:
        now = self.clock()
        hit = self._cache.get(function)
        if hit is not None and now - hit[0] <= self.ttl_s:
            return hit[1]
        cfg = self.store.get_config(function)
        self._cache[function] = (now, cfg)
        return cfg

    def invalidate(self, function: str | None = None) -> None:
        if function is None:
            self._cache.clear()
        else:
            self._cache.pop(function, None)


class CachedImages:
    """Images are immutable by digest, so they are cached forever."""

    def __init__(self, store: ImageStore) -> None:
        self.store = store
        self._cache: dict[str, bytes] = {}

    def get_image(self, digest: str) -> bytes:
        data = self._cache.get(digest)
        if data is None:
            data = self.store.get_image(digest)
            self._cache[digest] = data
        return data
