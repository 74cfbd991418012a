"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from oass import kernels


def cams(rng, n, size):
    out = []
    for _ in range(n):
        a = rng.random((size, size))
        out.append(np.ascontiguousarray(np.round(a * 8) / 8))  # plateaus exercise the flood fill
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the fallback is available")
    maps = {s: cams(rng, 20, s) for s in (16, 32, 64)}
    ranked = (rng.random(5000) < 0.1).astype(np.uint8)

    rows = []
    for size, ms in maps.items():
        times = {}
        for name, mod in backends.items():
            t = min(timeit.repeat(lambda: [mod.local_maxima(a) for a in ms], number=1, repeat=args.repeat))
            times[name] = t / len(ms)
        rows.append((f"local_maxima {size}x{size}", times))
    for fn in ("ranked_average_precision", "ranked_average_precision_11pt"):
        times = {name: min(timeit.repeat(lambda: getattr(mod, fn)(ranked), number=10, repeat=args.repeat)) / 10
                 for name, mod in backends.items()}
        rows.append((f"{fn} n=5000", times))

    names = sorted(backends)
    print(f"{'kernel':<40}" + "".join(f"{n:>14}" for n in names) + (f"{'speedup':>10}" if len(names) > 1 else ""))
    for label, times in rows:
        line = f"{label:<40}" + "".join(f"{1e6 * times[n]:>12.1f}us" for n in names)
        if "cython" in times and "python" in times:
            line += f"{times['python'] / times['cython']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
