"""CPU inference throughput: single-image latency and fps over worker lanes."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels, tensor
from .model import INPUT_SIZE, ModelConfig, count_params, predict

REFERENCE_FPS = 40.0  # published figure for an Intel i7, mirrored inference


@dataclass
class BenchReport:
    latency_ms: dict
    fps_single_lane: float
    lanes: int
    fps_per_lane: list
    fps_aggregate: float
    iterations: int
    warmup: int
    mirror: bool
    param_count: dict
    config: dict
    backend: str
    conv_algorithm: str
    reference_fps_i7: float = REFERENCE_FPS

    def to_dict(self) -> dict:
        return asdict(self)


def bench_input(seed: int = 0) -> np.ndarray:
    """The fixed, seeded ``[1, 128, 128]`` frame every benchmark run uses."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(1, INPUT_SIZE, INPUT_SIZE)).astype(np.float32)


def _lane(params, config, frame, iterations, mirror) -> tuple[float, list]:
    latencies = []
    start = time.perf_counter()
    for _ in range(iterations):
        t = time.perf_counter()
        predict(params, config, frame, mirror=mirror)
        latencies.append(time.perf_counter() - t)
    return time.perf_counter() - start, latencies


def run_bench(params, config: ModelConfig, iterations: int = 50, lanes: int = 1,
              warmup: int = 5, mirror: bool = True, seed: int = 0) -> BenchReport:
    """Time ``iterations`` single-frame predictions, then the same per lane across ``lanes`` threads.

    A mirrored frame (image plus its flip) counts as one frame.  Lanes share
    the frozen parameters; every call allocates its own scratch arrays.
    """
    if iterations < 1 or lanes < 1 or warmup < 0:
        raise ValueError("iterations and lanes must be >= 1, warmup >= 0")
    frame = bench_input(seed)
    for _ in range(warmup):
        predict(params, config, frame, mirror=mirror)

    wall, lat = _lane(params, config, frame, iterations, mirror)
    lat_ms = np.asarray(lat) * 1e3
    fps_single = iterations / wall

    if lanes == 1:
        per_lane, aggregate = [fps_single], fps_single
    else:
        with ThreadPoolExecutor(max_workers=lanes) as pool:
            start = time.perf_counter()
            futures = [pool.submit(_lane, params, config, frame, iterations, mirror) for _ in range(lanes)]
            results = [f.result() for f in futures]
            total = time.perf_counter() - start
        per_lane = [iterations / w for w, _ in results]
        aggregate = lanes * iterations / total

    pc = count_params(params)
    return BenchReport(
        latency_ms={"mean": float(lat_ms.mean()), "p50": float(np.percentile(lat_ms, 50)),
                    "p95": float(np.percentile(lat_ms, 95))},
        fps_single_lane=float(fps_single),
        lanes=lanes,
        fps_per_lane=[float(v) for v in per_lane],
        fps_aggregate=float(aggregate),
        iterations=iterations,
        warmup=warmup,
        mirror=mirror,
        param_count={"total": pc.total, "base": pc.base, "eca": pc.eca, "heads": pc.heads},
        config=config.to_dict(),
        backend=kernels.BACKEND,
        conv_algorithm=tensor._conv_algorithm,
    )
