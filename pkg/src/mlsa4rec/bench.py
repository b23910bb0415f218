"""Empirical complexity harness.

Times component forward passes across sequence lengths and fits a
log-log slope: linear-time components should stay near 1, quadratic
attention near 2.  Also compares the two scan backends and measures
peak forward memory.
"""

from __future__ import annotations

import csv
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .attention import init_lsa, lsa_attention, vanilla_attention
from .mamba import init_mamba, mamba_block
from .model import MlsaModel, ModelConfig
from .tensor import ParameterStore, Tensor

COMPONENTS = ("mamba_block", "lsa", "vanilla_attention", "full_model")

_MAX_REP_DOUBLINGS = 6


@dataclass
class BenchResult:
    rows: list[dict]                 # component, L, mean_ms, std_ms, reps
    slopes: dict[str, float]         # component -> fitted log-log slope


def fit_slope(lengths, means) -> float:
    """Least-squares slope of log(mean) vs log(L)."""
    return float(np.polyfit(np.log(np.asarray(lengths, dtype=np.float64)),
                            np.log(np.asarray(means, dtype=np.float64)), 1)[0])


def _median_of_means(samples: list[float], groups: int = 5) -> float:
    arr = np.asarray(samples, dtype=np.float64)
    chunks = np.array_split(arr, min(groups, len(arr)))
    return float(np.median([c.mean() for c in chunks]))


def _time_callable(fn, reps: int, warmup: int = 3) -> tuple[float, float, int]:
    """(median-of-means ms, std ms, reps actually used)."""
    tick = time.get_clock_info("perf_counter").resolution
    for _ in range(warmup):
        fn()
    for attempt in range(_MAX_REP_DOUBLINGS + 1):
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - t0) * 1e3)
        mean_ms = _median_of_means(samples)
        if mean_ms >= 10.0 * tick * 1e3:
            return mean_ms, float(np.std(samples)), reps
        if attempt == _MAX_REP_DOUBLINGS:
            raise RuntimeError(
                f"timer resolution {tick:g}s too coarse for mean {mean_ms:g}ms")
        reps *= 2
    raise AssertionError("unreachable")


def _component_fn(component: str, seq_len: int, seed: int, batch_size: int,
                  d_model: int, d_state: int, n_interests: int, n_heads: int):
    rng = np.random.default_rng(seed)
    if component == "full_model":
        cfg = ModelConfig(vocab_size=1000, max_len=seq_len, d_model=d_model,
                          d_state=d_state, n_interests=n_interests,
                          n_heads=n_heads)
        model = MlsaModel(cfg, seed=seed)
        ids = rng.integers(1, cfg.vocab_size, size=(batch_size, seq_len))
        return lambda: model.score(ids)
    store = ParameterStore(seed)
    x = Tensor((rng.standard_normal((batch_size, seq_len, d_model)) * 0.1)
               .astype(np.float32))
    if component == "mamba_block":
        params = init_mamba(store, "m", d_model, d_state, 4, 2)
        return lambda: mamba_block(x, params)
    if component == "lsa":
        params = init_lsa(store, "a", d_model, n_interests, n_heads)
        return lambda: lsa_attention(x, params)
    if component == "vanilla_attention":
        params = init_lsa(store, "a", d_model, n_interests, n_heads,
                          with_theta=False)
        return lambda: vanilla_attention(x, params)
    raise ValueError(f"unknown component {component!r}; choose from {COMPONENTS}")


def bench_scaling(components, lengths, reps: int = 5, seed: int = 0,
                  batch_size: int = 2, d_model: int = 64, d_state: int = 32,
                  n_interests: int = 8, n_heads: int = 2, log=None
                  ) -> BenchResult:
    """Forward-only wall-clock per component per sequence length.

    Repetitions are interleaved across all (component, length) points so
    transient machine-load bursts spread evenly instead of biasing one
    point; each point reports a median-of-means over its samples.
    """
    lengths = list(lengths)
    if len(lengths) < 4 or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("need >= 4 strictly increasing sequence lengths")
    if reps < 5:
        raise ValueError("reps must be >= 5")
    tick = time.get_clock_info("perf_counter").resolution
    points = []
    with T.no_grad():
        for component in components:
            for seq_len in lengths:
                fn = _component_fn(component, seq_len, seed, batch_size,
                                   d_model, d_state, n_interests, n_heads)
                for _ in range(3):
                    fn()
                points.append((component, seq_len, fn))
        samples: dict[tuple[str, int], list[float]] = \
            {(c, sl): [] for c, sl, _ in points}
        for _ in range(reps):
            for component, seq_len, fn in points:
                t0 = time.perf_counter()
                fn()
                samples[(component, seq_len)].append(
                    (time.perf_counter() - t0) * 1e3)
        rows = []
        slopes = {}
        for component in components:
            means = []
            for seq_len in lengths:
                s = samples[(component, seq_len)]
                mean_ms, std_ms, used = _median_of_means(s), float(np.std(s)), reps
                if mean_ms < 10.0 * tick * 1e3:  # timer-resolution fallback
                    fn = next(f for c, sl, f in points
                              if c == component and sl == seq_len)
                    mean_ms, std_ms, used = _time_callable(fn, 2 * reps)
                rows.append({"component": component, "L": seq_len,
                             "mean_ms": mean_ms, "std_ms": std_ms, "reps": used})
                means.append(mean_ms)
                if log:
                    log(f"{component} L={seq_len}: {mean_ms:.3f} ms")
            slopes[component] = fit_slope(lengths, means)
            if log:
                log(f"{component} slope: {slopes[component]:.3f}")
    return BenchResult(rows, slopes)


def compare_backends(lengths=(256, 512, 1024, 2048), reps: int = 5,
                     seed: int = 0, d_inner: int = 128, d_state: int = 32,
                     log=None) -> list[dict]:
    """Time the raw scan kernel under each backend on identical inputs."""
    rng = np.random.default_rng(seed)
    rows = []
    prev = kernels.get_backend()
    try:
        for seq_len in lengths:
            u = rng.standard_normal((1, seq_len, d_inner)).astype(np.float32)
            delta = rng.uniform(0.01, 0.1, size=u.shape).astype(np.float32)
            a = -np.exp(rng.standard_normal((d_inner, d_state))).astype(np.float32)
            bm = rng.standard_normal((1, seq_len, d_state)).astype(np.float32)
            cm = rng.standard_normal((1, seq_len, d_state)).astype(np.float32)
            for backend in ("numba", "numpy") if kernels.HAVE_NUMBA else ("numpy",):
                kernels.set_backend(backend)
                fn = lambda: kernels.scan_forward(u, delta, a, bm, cm, False)
                mean_ms, std_ms, used = _time_callable(fn, reps)
                rows.append({"backend": backend, "L": seq_len,
                             "mean_ms": mean_ms, "std_ms": std_ms, "reps": used})
                if log:
                    log(f"scan[{backend}] L={seq_len}: {mean_ms:.3f} ms")
    finally:
        kernels.set_backend(prev)
    return rows


def peak_forward_memory(model: MlsaModel, ids: np.ndarray) -> int:
    """Peak bytes allocated during one gradient-enabled forward pass."""
    tracemalloc.start()
    try:
        model.forward(ids, training=False)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return peak


def write_bench_csv(path: str, rows: list[dict]) -> None:
    cols = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])


def read_bench_csv(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for key in ("L", "reps"):
            if key in r:
                r[key] = int(r[key])
        for key in ("mean_ms", "std_ms"):
            if key in r:
                r[key] = float(r[key])
    return rows


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def write_scaling_svg(path: str, rows: list[dict], width: int = 640,
                      height: int = 480) -> None:
    """Log-log line chart of mean_ms vs L, one polyline per component/backend."""
    key = "component" if "component" in rows[0] else "backend"
    series: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        series.setdefault(r[key], []).append((r["L"], r["mean_ms"]))
    xs = [np.log(x) for pts in series.values() for x, _ in pts]
    ys = [np.log(y) for pts in series.values() for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    pad = 50

    def px(v):
        return pad + (np.log(v) - x0) / max(x1 - x0, 1e-9) * (width - 2 * pad)

    def py(v):
        return height - pad - (np.log(v) - y0) / max(y1 - y0, 1e-9) \
            * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
             f'y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" '
             f'stroke="black"/>',
             f'<text x="{width // 2}" y="{height - 12}" font-size="12" '
             f'text-anchor="middle">sequence length (log)</text>',
             f'<text x="14" y="{height // 2}" font-size="12" text-anchor="middle" '
             f'transform="rotate(-90 14 {height // 2})">mean ms (log)</text>']
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts = sorted(pts)
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" '
                         f'fill="{color}"/>')
        parts.append(f'<text x="{width - pad - 150}" y="{pad + 16 * i + 12}" '
                     f'font-size="12" fill="{color}">{name}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
