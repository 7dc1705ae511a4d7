"""Frozen joint-space embedding providers and the binary embedding cache.

Providers return raw ``(N, D)`` float arrays; normalization happens where
cosine similarity is used.  Four backends are available:

* ``mock-hash``  keyed hash of the item bytes -> Gaussian draw -> unit vector
* ``table``      explicit key -> vector mapping (synthetic ground truth)
* ``cache``      rows read from a cache file written by :func:`write_cache`
* ``external``   a plugin factory ``"package.module:callable"`` loaded on demand

Cache file layout (little-endian)::

    0   8s  magic  b"XMDEMBED"
    8   u32 version
    12  u32 D
    16  u64 count
    24  u64 space-id hash (first 8 bytes of blake2b(space_id))
    32  f32[count * D] row matrix
    ..  UTF-8 JSON footer {"space_id": ..., "keys": [...]}
"""
from __future__ import annotations

import hashlib
import importlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

CACHE_MAGIC = b"XMDEMBED"
CACHE_VERSION = 1
_HEADER = struct.Struct("<8sIIQQ")
assert _HEADER.size == 32


class EmbeddingError(RuntimeError):
    pass


class CacheMiss(EmbeddingError, KeyError):
    pass


def normalize(e, axis: int = -1) -> np.ndarray:
    """L2-normalize ``e`` along ``axis``; zero vectors are an error."""
    e = np.asarray(e, dtype=np.float64)
    n = np.linalg.norm(e, axis=axis, keepdims=True)
    if np.any(n == 0):
        raise EmbeddingError("cannot normalize a zero vector")
    return e / n


def cosine_matrix(a, b) -> np.ndarray:
    return normalize(np.atleast_2d(a)) @ normalize(np.atleast_2d(b)).T


def space_hash(space_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(space_id.encode(), digest_size=8).digest(), "little")


# --------------------------------------------------------------------------
# Cache
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingCache:
    keys: tuple[str, ...]
    matrix: np.ndarray
    space_id: str
    index: Mapping[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        keys = tuple(self.keys)
        matrix = np.asarray(self.matrix, dtype="<f4")
        if matrix.ndim != 2 or matrix.shape[0] != len(keys):
            raise EmbeddingError(f"matrix shape {matrix.shape} does not match {len(keys)} keys")
        index = {k: i for i, k in enumerate(keys)}
        if len(index) != len(keys):
            raise EmbeddingError("duplicate keys in embedding cache")
        matrix = matrix.copy()
        matrix.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "index", index)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[1]

    @property
    def count(self) -> int:
        return len(self.keys)

    def lookup(self, keys: Iterable[str]) -> np.ndarray:
        rows = []
        for k in keys:
            try:
                rows.append(self.index[k])
            except KeyError:
                raise CacheMiss(f"key {k!r} not in cache (space {self.space_id!r})") from None
        return self.matrix[rows]


def save_cache(path: str | os.PathLike, cache: EmbeddingCache) -> EmbeddingCache:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    footer = json.dumps({"space_id": cache.space_id, "keys": list(cache.keys)}).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, cache.dimension, cache.count, space_hash(cache.space_id)))
        fh.write(np.ascontiguousarray(cache.matrix, dtype="<f4").tobytes())
        fh.write(footer)
    os.replace(tmp, path)
    return cache


def write_cache(items: Sequence[str], provider, path, modality: str = "image") -> EmbeddingCache:
    """Embed ``items`` with ``provider`` and write them to ``path``."""
    items = list(dict.fromkeys(items))
    if items:
        embed = provider.embed_images if modality == "image" else provider.embed_texts
        matrix = embed(items)
    else:
        matrix = np.zeros((0, provider.dimension))
    return save_cache(path, EmbeddingCache(tuple(items), matrix, provider.space_id))


def read_cache(path: str | os.PathLike, expected_dimension: int | None = None) -> EmbeddingCache:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise EmbeddingError(f"{path}: truncated header")
    magic, version, dim, count, shash = _HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise EmbeddingError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise EmbeddingError(f"{path}: unsupported cache version {version}")
    body_end = _HEADER.size + 4 * dim * count
    if len(data) < body_end:
        raise EmbeddingError(f"{path}: truncated matrix")
    try:
        footer = json.loads(data[body_end:].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EmbeddingError(f"{path}: corrupt key footer") from exc
    if len(footer["keys"]) != count or space_hash(footer["space_id"]) != shash:
        raise EmbeddingError(f"{path}: header and footer disagree")
    if expected_dimension is not None and dim != expected_dimension:
        raise EmbeddingError(f"{path}: cache dimension {dim}, expected {expected_dimension}")
    matrix = np.frombuffer(data, dtype="<f4", count=dim * count, offset=_HEADER.size).reshape(count, dim)
    return EmbeddingCache(tuple(footer["keys"]), matrix, footer["space_id"])


# --------------------------------------------------------------------------
# Providers
# --------------------------------------------------------------------------


class EmbeddingProvider(Protocol):
    space_id: str
    dimension: int

    def embed_images(self, items: Sequence[str]) -> np.ndarray: ...

    def embed_texts(self, items: Sequence[str]) -> np.ndarray: ...


@dataclass(frozen=True)
class ProviderConfig:
    kind: str
    dimension: int
    seed: int = 0
    cache_path: str | None = None
    text_cache_path: str | None = None
    plugin: str | None = None
    options: Mapping = field(default_factory=dict)
    space_id: str | None = None

    def __post_init__(self):
        if self.dimension <= 0:
            raise ValueError("dimension must be positive")
        if self.kind not in ("mock-hash", "table", "cache", "external"):
            raise ValueError(f"unknown provider kind {self.kind!r}")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ProviderConfig":
        return cls(**{k: v for k, v in doc.items()})

    @classmethod
    def from_file(cls, path) -> "ProviderConfig":
        doc = json.loads(Path(path).read_text())
        base = Path(path).parent
        for key in ("cache_path", "text_cache_path"):
            if doc.get(key):
                doc[key] = str((base / os.path.expandvars(doc[key])).resolve())
        return cls.from_dict(doc)


class MockHashProvider:
    """Deterministic pseudo-embeddings keyed on ``(seed, item bytes)``."""

    def __init__(self, dimension: int, seed: int = 0, space_id: str | None = None):
        self.dimension = dimension
        self.seed = seed
        self.space_id = space_id or f"mock-hash/d{dimension}/s{seed}"
        self._key = seed.to_bytes(8, "little", signed=True)

    def _one(self, modality: str, item: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{modality}\0{item}".encode(), key=self._key, digest_size=16).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return normalize(rng.standard_normal(self.dimension))

    def embed_images(self, items):
        return np.stack([self._one("image", str(i)) for i in items]) if len(items) else np.zeros((0, self.dimension))

    def embed_texts(self, items):
        return np.stack([self._one("text", str(i)) for i in items]) if len(items) else np.zeros((0, self.dimension))


class TableProvider:
    """Explicit lookup tables for image refs and texts."""

    def __init__(
        self,
        images: Mapping[str, Sequence[float]] | None = None,
        texts: Mapping[str, Sequence[float]] | None = None,
        space_id: str = "table",
        dimension: int | None = None,
    ):
        self.space_id = space_id
        self._images = {k: np.asarray(v, dtype=np.float64) for k, v in (images or {}).items()}
        self._texts = {k: np.asarray(v, dtype=np.float64) for k, v in (texts or {}).items()}
        dims = {v.shape[0] for v in (*self._images.values(), *self._texts.values())}
        if dimension is not None:
            dims.add(dimension)
        if len(dims) != 1:
            raise EmbeddingError(f"table vectors have inconsistent dimensions {sorted(dims)}")
        self.dimension = dims.pop()

    @staticmethod
    def _get(table, items, what):
        try:
            return np.stack([table[i] for i in items]) if len(items) else np.zeros((0, 0))
        except KeyError as exc:
            raise CacheMiss(f"{what} {exc.args[0]!r} not in table") from None

    def embed_images(self, items):
        return self._get(self._images, items, "image")

    def embed_texts(self, items):
        return self._get(self._texts, items, "text")


class CacheProvider:
    """Serves embeddings from one image cache and/or one text cache."""

    def __init__(self, image_cache: EmbeddingCache | None = None, text_cache: EmbeddingCache | None = None):
        caches = [c for c in (image_cache, text_cache) if c is not None]
        if not caches:
            raise EmbeddingError("CacheProvider needs at least one cache")
        if len({c.dimension for c in caches}) != 1:
            raise EmbeddingError("image and text caches differ in dimension")
        self.image_cache = image_cache
        self.text_cache = text_cache
        self.dimension = caches[0].dimension
        self.space_id = caches[0].space_id

    def embed_images(self, items):
        if self.image_cache is None:
            raise EmbeddingError("no image cache configured")
        return self.image_cache.lookup(items).astype(np.float64)

    def embed_texts(self, items):
        if self.text_cache is None:
            raise EmbeddingError("no text cache configured")
        return self.text_cache.lookup(items).astype(np.float64)


def load_plugin(spec: str) -> Callable:
    module_name, _, attr = spec.partition(":")
    if not attr:
        raise EmbeddingError(f"plugin spec {spec!r} must look like 'module:callable'")
    try:
        module = importlib.import_module(module_name)
    except ImportError as exc:
        raise EmbeddingError(f"external backend unavailable: {exc}") from exc
    try:
        return getattr(module, attr)
    except AttributeError:
        raise EmbeddingError(f"external backend unavailable: {spec!r} has no {attr!r}") from None


def make_provider(config: ProviderConfig | Mapping) -> EmbeddingProvider:
    if not isinstance(config, ProviderConfig):
        config = ProviderConfig.from_dict(config)
    if config.kind == "mock-hash":
        return MockHashProvider(config.dimension, config.seed, config.space_id)
    if config.kind in ("cache", "table"):
        # a table on disk is just a cache file; in-memory tables use TableProvider directly
        image = read_cache(config.cache_path, config.dimension) if config.cache_path else None
        text = read_cache(config.text_cache_path, config.dimension) if config.text_cache_path else None
        return CacheProvider(image, text)
    provider = load_plugin(config.plugin or "")(dimension=config.dimension, **dict(config.options))
    if provider.dimension != config.dimension:
        raise EmbeddingError(f"external backend reports D={provider.dimension}, config says {config.dimension}")
    return provider
