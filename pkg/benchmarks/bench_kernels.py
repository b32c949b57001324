"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 200] [--end-to-end [--runs 3]]

Kernel timings call both backends directly. ``--end-to-end`` additionally
times a short training run in a subprocess per backend, since the backend is
picked once at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mdmtl._kernels import implementations

E2E_SNIPPET = """
import time
from dataclasses import replace
from mdmtl import _kernels
from mdmtl.experiment import ExperimentConfig, make_suite, stage_config
from mdmtl.trainer import train
exp = ExperimentConfig()
suite = make_suite(exp)
cfg = replace(stage_config("DA-2MD-MTL", exp.base_train(0)), epochs=3)
t = time.perf_counter()
_, rep = train(cfg, suite.registry(), suite.test_sets())
dt = time.perf_counter() - t
print(_kernels.BACKEND, len(rep.loss_trace), dt)
"""


def cases(batch, rng):
    logits = rng.standard_normal((batch, 7))
    targets = rng.integers(0, 7, batch).astype(np.int_)
    emb_raw = rng.standard_normal((batch, 16))
    trip = [rng.integers(0, batch, 32).astype(np.int_) for _ in range(3)]
    g_rows = rng.standard_normal(batch)

    def run(impl):
        out = {}
        loss, probs = impl.softmax_xent_forward(logits, targets)
        out["softmax_xent fwd"] = lambda: impl.softmax_xent_forward(logits, targets)
        out["softmax_xent bwd"] = lambda: impl.softmax_xent_backward(probs, targets, g_rows)
        emb, norms = impl.normalize_rows_forward(emb_raw)
        out["normalize_rows fwd"] = lambda: impl.normalize_rows_forward(emb_raw)
        out["normalize_rows bwd"] = lambda: impl.normalize_rows_backward(emb, norms, emb_raw)
        _, active = impl.triplet_forward(emb, *trip, 0.2)
        out["triplet fwd"] = lambda: impl.triplet_forward(emb, *trip, 0.2)
        out["triplet bwd"] = lambda: impl.triplet_backward(emb, *trip, active, 1.0)
        return out

    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--batch", type=int, nargs="+", default=[32, 256])
    ap.add_argument("--end-to-end", action="store_true")
    ap.add_argument("--runs", type=int, default=3, help="end-to-end runs per backend (best kept)")
    args = ap.parse_args(argv)

    impls = implementations()
    if "cython" not in impls:
        print("compiled kernels not built; only the numpy fallback is available")
    print(f"{'kernel':<22}{'batch':>6}" + "".join(f"{n + ' us':>14}" for n in impls)
          + (f"{'speedup':>10}" if len(impls) > 1 else ""))
    for batch in args.batch:
        run = cases(batch, np.random.default_rng(0))
        fns = {name: run(mod) for name, mod in impls.items()}
        for kernel in fns["python"]:
            times = {n: min(timeit.repeat(fns[n][kernel], number=args.repeat, repeat=3))
                     / args.repeat * 1e6 for n in impls}
            line = f"{kernel:<22}{batch:>6}" + "".join(f"{times[n]:>14.2f}" for n in impls)
            if "cython" in times:
                line += f"{times['python'] / times['cython']:>9.1f}x"
            print(line)

    if args.end_to_end:
        print(f"\nend-to-end: DA-2MD-MTL, default suite, 3 epochs, best of {args.runs}")
        for pure in ("1", "0"):
            env = {**os.environ, "MDMTL_PURE_PYTHON": pure}
            secs = float("inf")
            for _ in range(args.runs):
                out = subprocess.run([sys.executable, "-c", E2E_SNIPPET], env=env, check=True,
                                     capture_output=True, text=True).stdout.split()
                backend, steps, secs = out[0], int(out[1]), min(secs, float(out[2]))
            print(f"  {backend:<8} {steps} steps  {secs:.2f} s  {secs / steps * 1e3:.3f} ms/step")


if __name__ == "__main__":
    main()
