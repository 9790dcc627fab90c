"""Compare the compiled split kernels with the numpy fallback.

Trains the same model with each backend on a planted-signal pin table and
times the individual kernels on one round's worth of data. Both backends
must produce the same trees; the script checks that before reporting.

    python benchmarks/bench_kernels.py --panels 20 --rounds 20
"""
import argparse
import time
from contextlib import contextmanager

import numpy as np

from spidefect.features import attach_labels_c1, build_pin_table
from spidefect.gbdt import TrainConfig, _fallback, kernels, train
from spidefect.gbdt.booster import presort
from spidefect.synthgen import GeneratorConfig, generate

KERNELS = ("node_sums", "gather_sorted", "find_splits", "predict_sum", "route")


@contextmanager
def backend(module):
    saved = {k: getattr(kernels, k) for k in KERNELS}
    for k in KERNELS:
        setattr(kernels, k, getattr(module, k))
    try:
        yield
    finally:
        for k, v in saved.items():
            setattr(kernels, k, v)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--panels", type=int, default=20)
    ap.add_argument("--rounds", type=int, default=20)
    ap.add_argument("--depth", type=int, default=6)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    if kernels.BACKEND != "cython":
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    from spidefect.gbdt import _kernels

    pins, aoi = generate(GeneratorConfig(seed=1, num_panels=args.panels, planted_signal_strength=2.0,
                                         pin_defect_rate=0.01))
    table = attach_labels_c1(build_pin_table(pins), aoi)
    cfg = TrainConfig(num_rounds=args.rounds, max_depth=args.depth)
    print(f"rows={table.n_rows} features={table.width} rounds={args.rounds} depth={args.depth}")

    models = {}
    rows = []
    for name, module in (("cython", _kernels), ("python", _fallback)):
        with backend(module):
            t0 = time.perf_counter()
            models[name] = train(table, cfg)
            rows.append((f"train[{name}]", time.perf_counter() - t0))
    same = all(a.structure_equals(b) for a, b in zip(models["cython"].trees, models["python"].trees))
    print(f"identical_trees={same}")

    X = table.rows
    rng = np.random.default_rng(0)
    order, sorted_vals = presort(X)
    g, h = rng.normal(size=len(X)), rng.uniform(0.01, 0.25, size=len(X))
    node_of = rng.integers(0, 32, size=len(X)).astype(np.int16)
    mask = np.ones(X.shape[1], dtype=np.uint8)
    for name, mod in (("cython", _kernels), ("python", _fallback)):
        sg, sh = mod.gather_sorted(order, g, h)
        G, H = mod.node_sums(node_of, g, h, 32)
        rows.append((f"gather_sorted[{name}]", best_of(lambda: mod.gather_sorted(order, g, h), args.repeat)))
        rows.append((f"node_sums[{name}]", best_of(lambda: mod.node_sums(node_of, g, h, 32), args.repeat)))
        rows.append((f"find_splits[{name}]", best_of(
            lambda: mod.find_splits(order, sorted_vals, sg, sh, node_of, G, H, mask, 1.0, 0.0, 1e-3),
            args.repeat)))
        with backend(mod):
            model = models["cython"]
            rows.append((f"predict[{name}]", best_of(lambda: model.raw_score(X), args.repeat)))

    width = max(len(r[0]) for r in rows)
    for label, seconds in rows:
        print(f"{label:<{width}}  {seconds * 1000:10.2f} ms")
    for k in ("train", "gather_sorted", "node_sums", "find_splits", "predict"):
        c = dict(rows)[f"{k}[cython]"]
        p = dict(rows)[f"{k}[python]"]
        print(f"speedup.{k}={p / c:.1f}x")


if __name__ == "__main__":
    main()
