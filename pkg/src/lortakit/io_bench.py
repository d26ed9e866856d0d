"""
Adapter checkpoints and a load-latency benchmark for many concurrent adapters.

File layout (all little-endian)::

    offset  size  field
    0       8     magic b"LRTAPAK1"
    8       4     u32 format version (1)
    12      4     u32 method id (see METHOD_IDS)
    16      20    u32 d, H, L, M, r
    36      4     f32 alpha
    40      8     u64 seed of the frozen factors
    48      4     u32 number of extra dims n
    52      4n    u32 extra dims (NOLA: k; LoReTTA-rep: k_1..k_D)
    52+4n   ...   payload: trainable factors as f32, in factor order, each C-ordered

Only trainable factors are stored; frozen projections are regenerated from the
seed on load. Factors are kept as float64 in memory, so saving rounds them to
float32 once; loading an already-rounded state and saving it again gives the
same bytes.
"""
from __future__ import annotations

import csv
import gc
import math
import os
import statistics
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import (
    AdapterSpec,
    AdapterState,
    Method,
    ModelConfig,
    count_params,
    frozen_factors,
    random_adapter,
    resolve_spec,
    trainable_shapes,
)
from .errors import CheckpointError, ConfigError, ShapeError

MAGIC = b"LRTAPAK1"
VERSION = 1
HEADER = struct.Struct("<8sII5IfQI")
METHOD_IDS = {
    Method.LORA: 1,
    Method.LORTA: 2,
    Method.LOTR: 3,
    Method.VERA: 4,
    Method.NOLA: 5,
    Method.LORETTA: 6,
    Method.FACT_TT: 7,
    Method.FACT_TK: 8,
}
_METHODS_BY_ID = {v: k for k, v in METHOD_IDS.items()}
MAX_EXTRA_DIMS = 64

#: load-benchmark dims: large enough that payload size, not per-file overhead, drives latency
BENCH_CONFIG = ModelConfig(d=2048, H=16, L=2, M=4)


def _extra_dims(spec: AdapterSpec) -> tuple[int, ...]:
    if spec.method is Method.NOLA:
        return (spec.nola_k,)
    if spec.method is Method.LORETTA:
        return tuple(spec.loretta_dims)
    return ()


def header_size(spec: AdapterSpec, cfg: ModelConfig | None = None) -> int:
    """Header bytes for ``spec``; LoReTTA-rep needs ``cfg`` unless its dims are explicit."""
    if cfg is not None:
        spec = resolve_spec(spec, cfg)
    elif spec.method is Method.LORETTA and spec.loretta_dims is None:
        raise ConfigError("header size of LoReTTA-rep with default dims depends on the model config")
    return HEADER.size + 4 * len(_extra_dims(spec))


def dumps(st: AdapterState) -> bytes:
    spec, cfg = st.spec, st.config
    extra = _extra_dims(spec)
    head = HEADER.pack(MAGIC, VERSION, METHOD_IDS[spec.method], cfg.d, cfg.H, cfg.L, cfg.M,
                       spec.rank, spec.alpha, spec.seed, len(extra))
    head += struct.pack(f"<{len(extra)}I", *extra)
    payload = np.concatenate([a.ravel() for a in st.trainable.values()]).astype("<f4")
    return head + payload.tobytes()


def save(st: AdapterState, path) -> int:
    """Write ``st`` to ``path``; returns the number of bytes written."""
    data = dumps(st)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def loads(data: bytes) -> AdapterState:
    if len(data) < HEADER.size:
        raise CheckpointError(f"truncated header: {len(data)} bytes")
    magic, version, method_id, d, H, L, M, r, alpha, seed, n_extra = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    if method_id not in _METHODS_BY_ID:
        raise CheckpointError(f"unknown method id {method_id}")
    if n_extra > MAX_EXTRA_DIMS:
        raise CheckpointError(f"implausible extra-dim count {n_extra}")
    offset = HEADER.size + 4 * n_extra
    if len(data) < offset:
        raise CheckpointError("truncated header (extra dims)")
    extra = struct.unpack_from(f"<{n_extra}I", data, HEADER.size)
    method = _METHODS_BY_ID[method_id]
    try:
        cfg = ModelConfig(d=d, H=H, L=L, M=M)
        kwargs = {}
        if method is Method.NOLA:
            (kwargs["nola_k"],) = extra
        elif method is Method.LORETTA:
            kwargs["loretta_dims"] = extra
        elif extra:
            raise CheckpointError(f"{method.value} checkpoints carry no extra dims")
        spec = AdapterSpec(method, r, alpha=float(alpha), seed=seed, **kwargs)
        shapes = trainable_shapes(spec, cfg)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"invalid header: {exc}") from exc

    n = sum(math.prod(s) for s in shapes.values())
    if len(data) - offset != 4 * n:
        raise CheckpointError(f"payload has {len(data) - offset} bytes, expected {4 * n}")
    flat = np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float64)
    flat.setflags(write=False)  # factors below are views; AdapterState keeps them without copying
    factors, pos = {}, 0
    for name, shape in shapes.items():
        size = math.prod(shape)
        factors[name] = flat[pos:pos + size].reshape(shape)
        pos += size
    try:
        return AdapterState(spec, cfg, factors, frozen_factors(spec, cfg))
    except ShapeError as exc:
        raise CheckpointError(str(exc)) from exc


def load(path) -> AdapterState:
    with open(path, "rb") as fh:
        return loads(fh.read())


@dataclass
class BenchRow:
    method: Method
    r: int
    n: int
    mean_ms: float
    std_ms: float
    bytes: int  # size of one serialized adapter
    samples_ms: list[float] = field(default_factory=list, repr=False)

    def csv_row(self) -> list:
        return [self.method.value, self.r, self.n, f"{self.mean_ms:.6f}", f"{self.std_ms:.6f}", self.bytes]


CSV_HEADER = ["method", "r", "n", "mean_ms", "std_ms", "bytes"]


def write_adapters(method, r: int, n: int, directory, cfg: ModelConfig = BENCH_CONFIG, seed: int = 0) -> list[Path]:
    """Write ``n`` random adapters of one method/rank; returns their paths."""
    spec = AdapterSpec(Method.parse(method), r, seed=seed)
    directory = Path(directory)
    paths = []
    for i in range(n):
        path = directory / f"{spec.method.value}_r{r}_{i:04d}.lrta"
        save(random_adapter(spec, cfg, seed=seed + i), path)
        paths.append(path)
    return paths


def _timed_pass(paths) -> float:
    t0 = time.perf_counter()
    for p in paths:
        load(p)
    return 1e3 * (time.perf_counter() - t0)


def time_loads(groups, reps: int) -> list[list[float]]:
    """Milliseconds to load each group of files, once per repetition.

    Groups are interleaved within a repetition so slow drifts of the machine
    hit all of them alike; garbage collection is paused while timing.
    """
    for paths in groups:  # warm-up pass, not timed
        for p in paths:
            load(p)
    samples = [[] for _ in groups]
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(reps):
            for i, paths in enumerate(groups):
                samples[i].append(_timed_pass(paths))
    finally:
        if was_enabled:
            gc.enable()
    return samples


def bench_methods(
    methods,
    r: int,
    n: int,
    reps: int = 20,
    cfg: ModelConfig = BENCH_CONFIG,
    directory=None,
    seed: int = 0,
) -> list[BenchRow]:
    """Benchmark several methods at the same ``(r, n)`` with interleaved repetitions.

    Each repetition loads ``n`` adapter files sequentially from disk, parsing
    the header and instantiating the state. Writing the files is not timed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if reps < 20:
        raise ValueError("reps must be >= 20")
    methods = [Method.parse(m) for m in methods]
    with tempfile.TemporaryDirectory(dir=directory) as tmp:
        groups = [write_adapters(m, r, n, tmp, cfg, seed) for m in methods]
        sizes = [os.path.getsize(paths[0]) for paths in groups]
        samples = time_loads(groups, reps)
    return [
        BenchRow(m, r, n, statistics.fmean(s), statistics.pstdev(s), size, s)
        for m, s, size in zip(methods, samples, sizes)
    ]


def bench_concurrent(
    method,
    r: int,
    n: int,
    reps: int = 20,
    cfg: ModelConfig = BENCH_CONFIG,
    directory=None,
    seed: int = 0,
) -> BenchRow:
    """Mean/std latency (ms) of loading ``n`` adapters of one method from disk."""
    return bench_methods([method], r, n, reps, cfg, directory, seed)[0]


def write_csv(rows, fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.csv_row())


def payload_bytes(spec: AdapterSpec, cfg: ModelConfig) -> int:
    return 4 * count_params(spec, cfg).trainable_count
