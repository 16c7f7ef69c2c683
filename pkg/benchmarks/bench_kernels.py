"""Compare the compiled kernels with the numpy fallback.

Run: python3 benchmarks/bench_kernels.py [--repeat N]

Prints per-kernel timings for the row shapes the default model uses
(attention scores from 64 tokens, 128-wide activations, 512-wide FFN
hidden), and one full training step under each backend.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from refedit._kernels import _fallback

try:
    from refedit._kernels import _ckernels
except ImportError:
    _ckernels = None

SHAPES = {"softmax": (16 * 4 * 64, 64), "layernorm": (16 * 64, 128), "gelu": (16 * 64, 512)}

STEP_SNIPPET = """
import tempfile, time
from pathlib import Path
from refedit import _kernels
from refedit.forge import ForgeConfig, forge_dataset
from refedit.model import EditModel
from refedit.trainer import TrainConfig, load_training_set, train
root = Path(tempfile.mkdtemp())
forge_dataset(root, ForgeConfig(count=24, seed=0))
data = load_training_set(root / "manifest.jsonl")
model = EditModel()
train(model, data, TrainConfig(phase="instruction", steps=1))
t0 = time.perf_counter()
train(model, data, TrainConfig(phase="instruction", steps={steps}))
print(_kernels.BACKEND, (time.perf_counter() - t0) / {steps})
"""


def kernel_cases(mod, dtype):
    rng = np.random.default_rng(0)
    cases = {}
    s = np.ascontiguousarray(rng.standard_normal(SHAPES["softmax"]), dtype=dtype)
    y = _fallback.softmax_fwd(s.copy())
    cases["softmax fwd"] = lambda: mod.softmax_fwd(s)
    cases["softmax bwd"] = lambda: mod.softmax_bwd(y, s)
    h = np.ascontiguousarray(rng.standard_normal(SHAPES["layernorm"]), dtype=dtype)
    g, b = np.ones(h.shape[1], dtype), np.zeros(h.shape[1], dtype)
    _, mean, rstd = _fallback.layernorm_fwd(h, g, b, 1e-5)
    cases["layernorm fwd"] = lambda: mod.layernorm_fwd(h, g, b, 1e-5)
    cases["layernorm bwd"] = lambda: mod.layernorm_bwd(h, h, mean, rstd, g)
    f = np.ascontiguousarray(rng.standard_normal(SHAPES["gelu"]), dtype=dtype)
    cases["gelu fwd"] = lambda: mod.gelu_fwd(f)
    cases["gelu bwd"] = lambda: mod.gelu_bwd(f, f)
    return cases


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=10, repeat=repeat)) / 10


def step_time(backend, steps):
    env = dict(os.environ, REFEDIT_KERNELS=backend)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                         capture_output=True, text=True, check=True)
    name, seconds = out.stdout.split()
    return name, float(seconds)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=5, help="training steps timed per backend (0 to skip)")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels are not built; only the fallback is available")
        return 1
    print(f"{'kernel':<16} {'dtype':<8} {'numpy ms':>9} {'cython ms':>10} {'speedup':>8}")
    for dtype in (np.float32, np.float64):
        slow, fast = kernel_cases(_fallback, dtype), kernel_cases(_ckernels, dtype)
        for name in slow:
            a, c = best_of(slow[name], args.repeat), best_of(fast[name], args.repeat)
            print(f"{name:<16} {np.dtype(dtype).name:<8} {a * 1e3:9.3f} {c * 1e3:10.3f} {a / c:7.2f}x")
    if args.steps:
        print()
        times = dict(step_time(b, args.steps) for b in ("python", "auto"))
        for name, sec in times.items():
            print(f"training step ({name:<8}) {sec:.3f} s")
        print(f"step speedup {times['python'] / times['compiled']:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
