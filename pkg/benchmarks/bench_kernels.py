"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeats 20] [--json out.json]

Times each backend's raw kernels at desk-scale shapes, then one pretraining
epoch of an ACPE model under every available backend. Results also check that both
backends agree to 1e-12.
"""

import argparse
import json
import tempfile
import time

import numpy as np

from eegpe import kernels
from eegpe.data import generate_synthetic, load_dataset
from eegpe.model import preset
from eegpe.train import protocol_preset, run_pretrain


def kernel_cases(rng, impl):
    # desk shapes: batch 16, d=32, 8 channels, 4 patches of 40 samples
    x4 = rng.normal(size=(16, 32, 8, 4))
    k = rng.normal(size=(32, 7, 3))
    x3 = rng.normal(size=(16 * 8 * 4, 1, 40))
    w = rng.normal(size=(32, 1, 5))
    y3 = impl.conv1d_forward(x3, w, 2, 2)
    return {
        "dwconv2d_forward": lambda: impl.dwconv2d_forward(x4, k),
        "dwconv2d_backward": lambda: impl.dwconv2d_backward(x4, k, x4),
        "conv1d_forward": lambda: impl.conv1d_forward(x3, w, 2, 2),
        "conv1d_backward": lambda: impl.conv1d_backward(x3, w, np.ones_like(y3), 2, 2),
        "dft_magnitude": lambda: impl.dft_magnitude(x3[:, 0, :]),
    }


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def flat(out):
    parts = out if isinstance(out, tuple) else (out,)
    return np.concatenate([np.ravel(p) for p in parts])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    results = {"backends": backends, "kernels": {}, "pretrain_epoch": {}}
    cases = {b: kernel_cases(np.random.default_rng(0), kernels._BACKENDS[b]) for b in backends}
    for name in cases[backends[0]]:
        row, outs = {}, {}
        for b in backends:
            fn = cases[b][name]
            outs[b] = flat(fn())
            row[b] = best_of(fn, args.repeats)
        if len(outs) > 1:
            ref = outs["python"]
            row["max_abs_diff"] = max(float(np.max(np.abs(o - ref))) for o in outs.values())
        results["kernels"][name] = row

    with tempfile.TemporaryDirectory() as tmp:
        ds = load_dataset(generate_synthetic(tmp, "channel-coded", n_channels=8, n_subjects=8,
                                             epochs_per_subject=8, seed=0), 40)
        proto = protocol_preset("pretrain", epochs=1)
        for b in backends:
            with kernels.use_backend(b):
                results["pretrain_epoch"][b] = best_of(
                    lambda: run_pretrain(preset("desk", pe="acpe"), proto, ds, seed=0), max(1, args.repeats // 10))

    width = max(map(len, results["kernels"])) + 2
    print("kernel".ljust(width) + "".join(f"{b:>12}" for b in backends) + "     speedup")
    for name, row in list(results["kernels"].items()) + [("pretrain epoch (acpe)", results["pretrain_epoch"])]:
        line = name.ljust(width) + "".join(f"{row[b] * 1e3:10.3f}ms" for b in backends)
        if "cython" in row:
            line += f"  {row['python'] / row['cython']:8.2f}x"
        print(line)
    diffs = [r["max_abs_diff"] for r in results["kernels"].values() if "max_abs_diff" in r]
    if diffs:
        print(f"max |cython - python| over kernels: {max(diffs):.2e}")
        assert max(diffs) < 1e-12
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
