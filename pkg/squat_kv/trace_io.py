"""On-disk formats: Q/K/V traces, query subspaces and quantized caches.

A trace directory holds `manifest.json` plus one little-endian float32 blob per
(layer, tensor kind), `q_layer{i}.bin`, `k_layer{i}.bin` and `v_layer{i}.bin`, each
row-major [token, head, dim]. A cache directory holds `cache.json` and six blobs that
concatenate every (layer, head) section in (layer, head) order.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .cache import HeadCache, KVCache
from .config import CacheConfig
from .models import CacheManifest, HeadLayout, SubspaceManifest, SyntheticSpec, TraceManifest
from .quant import PARAM_BYTES, GroupedCodes, packed_size
from .subspace import QuerySubspace, normalize_rows

log = logging.getLogger(__name__)

PathLike = Union[str, Path]

TRACE_MANIFEST = "manifest.json"
SUBSPACE_MANIFEST = "subspace.json"
CACHE_MANIFEST = "cache.json"
TRACE_KINDS = ("q", "k", "v")
CACHE_BLOBS = (
    "key_codes.bin",
    "key_params.bin",
    "key_residual.bin",
    "value_codes.bin",
    "value_params.bin",
    "value_residual.bin",
)


class TraceFormatError(ValueError):
    """A blob on disk does not match what its manifest describes."""


def _blob_name(kind: str, layer: int) -> str:
    return f"{kind}_layer{layer}.bin"


def _read_blob(path: Path, expected: int) -> bytes:
    if not path.is_file():
        raise TraceFormatError(f"{path.name}: blob missing (expected {expected} bytes)")
    data = path.read_bytes()
    if len(data) != expected:
        what = "truncated" if len(data) < expected else "oversized"
        raise TraceFormatError(
            f"{path.name}: {what} blob, expected {expected} bytes, got {len(data)} "
            f"(first mismatching byte offset {min(len(data), expected)})"
        )
    return data


# -- Traces --


@dataclass
class Trace:
    """Q/K/V tensors of a recorded or synthetic run, each (layers, tokens, heads, d)."""
    manifest: TraceManifest
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        m = self.manifest
        for kind, tensor in zip(TRACE_KINDS, (self.queries, self.keys, self.values)):
            expected = (m.layers, *m.blob_shape(kind))
            if tensor.shape != expected:
                raise ValueError(f"{kind} tensor has shape {tensor.shape}, manifest says {expected}")

    @property
    def prompt(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        p = self.manifest.prompt_len
        return self.keys[:, :p], self.values[:, :p], self.queries[:, :p]


def write_trace(trace: Trace, path: PathLike) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    (out / TRACE_MANIFEST).write_text(trace.manifest.model_dump_json(indent=2))
    for kind, tensor in zip(TRACE_KINDS, (trace.queries, trace.keys, trace.values)):
        for layer in range(trace.manifest.layers):
            (out / _blob_name(kind, layer)).write_bytes(
                np.ascontiguousarray(tensor[layer], dtype="<f4").tobytes()
            )
    log.info("Wrote trace (%d tokens, %d layers) to %s", trace.manifest.tokens, trace.manifest.layers, out)
    return out


def read_trace(path: PathLike) -> Trace:
    src = Path(path)
    manifest_path = src / TRACE_MANIFEST
    if not manifest_path.is_file():
        raise TraceFormatError(f"{manifest_path}: trace manifest not found")
    manifest = TraceManifest.model_validate_json(manifest_path.read_text())

    tensors = []
    for kind in TRACE_KINDS:
        shape = manifest.blob_shape(kind)
        layers = []
        for layer in range(manifest.layers):
            data = _read_blob(src / _blob_name(kind, layer), int(np.prod(shape)) * 4)
            layers.append(np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32))
        tensors.append(np.stack(layers) if layers else np.zeros((0, *shape), dtype=np.float32))
    log.debug("Read trace %s: %s", src, manifest)
    return Trace(manifest=manifest, queries=tensors[0], keys=tensors[1], values=tensors[2])


# -- Synthetic traces --


def low_rank_queries(
    rng: np.random.Generator, tokens: int, dim: int, rank: int, noise_level: float
) -> np.ndarray:
    """Rank-`rank` unit-RMS signal plus noise_level·N(0, 1), in float64."""
    left = rng.standard_normal((tokens, rank))
    right = rng.standard_normal((rank, dim))
    signal = left @ right / np.sqrt(rank)
    return signal + noise_level * rng.standard_normal((tokens, dim))


def _unit_rms(x: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x ** 2)) if x.size else 0.0
    return x / rms if rms > 0 else x


def gen_synthetic(spec: SyntheticSpec) -> Trace:
    """Low-rank queries with i.i.d. Gaussian keys and values, deterministic in the seed."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    shape_q = (spec.layers, spec.tokens, spec.query_heads, spec.dim)
    shape_kv = (spec.layers, spec.tokens, spec.kv_heads, spec.dim)

    queries = np.zeros(shape_q)
    for layer in range(spec.layers):
        for head in range(spec.query_heads):
            q = low_rank_queries(rng, spec.tokens, spec.dim, spec.true_rank, spec.noise_level)
            queries[layer, :, head] = normalize_rows(q) if spec.normalize_queries else q
    keys = _unit_rms(rng.standard_normal(shape_kv))
    values = _unit_rms(rng.standard_normal(shape_kv))

    prompt_len = spec.tokens // 2 if spec.prompt_len is None else spec.prompt_len
    manifest = TraceManifest(
        layers=spec.layers,
        kv_heads=spec.kv_heads,
        query_heads=spec.query_heads,
        head_dim=spec.dim,
        tokens=spec.tokens,
        prompt_len=prompt_len,
    )
    return Trace(
        manifest=manifest,
        queries=queries.astype(np.float32),
        keys=keys.astype(np.float32),
        values=values.astype(np.float32),
    )


# -- Subspaces --


def write_subspace(sub: QuerySubspace, path: PathLike) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = SubspaceManifest(dim=sub.dim, rank=sub.rank, requested_rank=sub.requested_rank)
    (out / SUBSPACE_MANIFEST).write_text(manifest.model_dump_json(indent=2))
    (out / "basis.bin").write_bytes(np.ascontiguousarray(sub.orthonormal_basis, dtype="<f8").tobytes())
    (out / "singular_values.bin").write_bytes(np.ascontiguousarray(sub.singular_values, dtype="<f8").tobytes())
    return out


def read_subspace(path: PathLike) -> QuerySubspace:
    src = Path(path)
    manifest = SubspaceManifest.model_validate_json((src / SUBSPACE_MANIFEST).read_text())
    basis = _read_blob(src / "basis.bin", manifest.rank * manifest.dim * 8)
    sigma = _read_blob(src / "singular_values.bin", manifest.requested_rank * 8)
    return QuerySubspace(
        orthonormal_basis=np.frombuffer(basis, dtype="<f8").reshape(manifest.rank, manifest.dim).copy(),
        singular_values=np.frombuffer(sigma, dtype="<f8").copy(),
        dim=manifest.dim,
    )


# -- Caches --


def _head_sections(head: HeadCache) -> dict[str, bytes]:
    key_codes = head.key_codes()
    value_codes = head.value_codes()

    def residual(rows) -> bytes:
        return np.asarray(list(rows), dtype="<f4").reshape(-1, head.dim).tobytes()

    return {
        "key_codes.bin": key_codes.packed(),
        "key_params.bin": key_codes.params_bytes(),
        "key_residual.bin": residual(head.key_residual),
        "value_codes.bin": value_codes.packed(),
        "value_params.bin": value_codes.params_bytes(),
        "value_residual.bin": residual(head.value_residual),
    }


def write_cache(cache: KVCache, path: PathLike) -> CacheManifest:
    """Serialize deterministically; returns the manifest, whose `blobs` hold the byte sizes."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    chunks: dict[str, list[bytes]] = {name: [] for name in CACHE_BLOBS}
    layouts = []
    for layer, head in sorted(cache.heads):
        head_cache = cache.head(layer, head)
        for name, data in _head_sections(head_cache).items():
            chunks[name].append(data)
        layouts.append(HeadLayout(
            layer=layer,
            head=head,
            token_count=head_cache.token_count,
            key_groups=len(head_cache.key_groups),
            key_residual=len(head_cache.key_residual),
            value_tokens=head_cache.quantized_value_tokens,
            value_residual=len(head_cache.value_residual),
        ))

    blobs = {}
    for name in CACHE_BLOBS:
        data = b"".join(chunks[name])
        (out / name).write_bytes(data)
        blobs[name] = len(data)

    manifest = CacheManifest(
        config=cache.config.to_dict(),
        layers=cache.layers,
        kv_heads=cache.kv_heads,
        head_dim=cache.dim,
        heads=layouts,
        blobs=blobs,
        use_rope=cache.use_rope,
    )
    (out / CACHE_MANIFEST).write_text(manifest.model_dump_json(indent=2))
    log.info("Wrote cache (%d bytes of blobs) to %s", sum(blobs.values()), out)
    return manifest


def read_cache(path: PathLike) -> KVCache:
    src = Path(path)
    manifest_path = src / CACHE_MANIFEST
    if not manifest_path.is_file():
        raise TraceFormatError(f"{manifest_path}: cache manifest not found")
    manifest = CacheManifest.model_validate_json(manifest_path.read_text())
    config = CacheConfig.from_dict(manifest.config)
    d = manifest.head_dim
    g_size = config.group_size
    code_bytes = packed_size(g_size, config.bits)

    blobs = {name: _read_blob(src / name, manifest.blobs.get(name, 0)) for name in CACHE_BLOBS}
    offsets = dict.fromkeys(CACHE_BLOBS, 0)

    def take(name: str, size: int) -> bytes:
        start = offsets[name]
        if start + size > len(blobs[name]):
            raise TraceFormatError(
                f"{name}: section at byte offset {start} needs {size} bytes, blob has {len(blobs[name])}"
            )
        offsets[name] = start + size
        return blobs[name][start:start + size]

    def residual(name: str, rows: int) -> np.ndarray:
        return np.frombuffer(take(name, rows * d * 4), dtype="<f4").reshape(rows, d)

    cache = KVCache(
        config=config, layers=manifest.layers, kv_heads=manifest.kv_heads, dim=d, use_rope=manifest.use_rope,
    )
    for layout in manifest.heads:
        key_rows = layout.key_groups * d
        value_rows = layout.value_tokens * (d // g_size)
        key_codes = GroupedCodes.from_bytes(
            take("key_codes.bin", key_rows * code_bytes),
            take("key_params.bin", key_rows * PARAM_BYTES),
            config.bits, key_rows, g_size,
        )
        value_codes = GroupedCodes.from_bytes(
            take("value_codes.bin", value_rows * code_bytes),
            take("value_params.bin", value_rows * PARAM_BYTES),
            config.bits, value_rows, g_size,
        )
        cache.heads[(layout.layer, layout.head)] = HeadCache.from_parts(
            dim=d,
            config=config,
            key_codes=key_codes,
            key_residual=residual("key_residual.bin", layout.key_residual),
            value_codes=value_codes,
            value_residual=residual("value_residual.bin", layout.value_residual),
            token_count=layout.token_count,
        )

    for name in CACHE_BLOBS:
        if offsets[name] != len(blobs[name]):
            raise TraceFormatError(f"{name}: {len(blobs[name]) - offsets[name]} trailing bytes after the last section")
    return cache
