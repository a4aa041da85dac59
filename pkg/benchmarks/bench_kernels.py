"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--no-train]

Part one calls each kernel directly through ``_kernels.implementation`` on
shapes taken from the default 64x64 models. Part two times a few training
steps end to end in a fresh interpreter per backend, since the backend is
fixed when ``kdlvision`` is imported.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from kdlvision import _kernels as K
from kdlvision import tensor as T


def kernel_cases(rng):
    x = rng.random((32, 16, 66, 66), dtype=np.float32)  # padded 64x64 activations
    cols = K.im2col_numpy(x, 3, 3, 2, 32, 32)
    feat = rng.random((32, 32, 32, 32), dtype=np.float32)
    _, idx = K.maxpool_forward_numpy(feat, 2, 2)
    g = rng.random((32, 32, 16, 16), dtype=np.float32)
    gray = rng.integers(0, 256, size=(256, 256), dtype=np.uint8)
    img = rng.random((256, 256))
    grads = rng.normal(size=(512, 512)).astype(np.float32) * 1e-37
    return {
        "im2col": (x, 3, 3, 2, 32, 32),
        "col2im": (cols, 32, 16, 66, 66, 3, 3, 2, 32, 32),
        "maxpool_forward": (feat, 2, 2),
        "maxpool_backward": (g, idx, 32, 32, 2, 2),
        "lbp": (gray,),
        "haar_forward": (img,),
        "flush_subnormal": (grads,),
    }


def bench_kernels(repeat):
    cases = kernel_cases(np.random.default_rng(0))
    rows = []
    for name in K.KERNELS:
        args = cases[name]
        times = {}
        for backend in ("numpy", "numba"):
            fn = K.implementation(name, backend)
            # flush works in place, so give it a fresh copy each call
            call = (lambda: fn(args[0].copy())) if name == "flush_subnormal" else (lambda: fn(*args))
            call()  # compile / warm up
            times[backend] = min(timeit.repeat(call, number=1, repeat=repeat))
        rows.append((name, times["numpy"], times["numba"]))
    return rows


def bench_conv(repeat):
    """Stride-1 conv, forward and backward, on a student dense-layer shape."""
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.random((32, 52, 16, 16), dtype=np.float32), requires_grad=True)
    w = T.Tensor(rng.normal(size=(12, 52, 3, 3)).astype(np.float32), requires_grad=True)
    b = T.Tensor(np.zeros(12, dtype=np.float32), requires_grad=True)
    paths = {
        "shift-GEMM": lambda: T._conv_shift(x, w, b, 1),
        "im2col": lambda: T._conv_im2col(x, w, b, 1, 1, 16, 16),
    }
    times = {}
    for name, fwd in paths.items():
        def call():
            out, bw = fwd()
            bw(np.ones_like(out))
        call()
        times[name] = min(timeit.repeat(call, number=1, repeat=repeat))
    return times


TRAIN_SNIPPET = """
import json, time, numpy as np
from kdlvision import _kernels, tensor as T
from kdlvision.model import Expert, ModelConfig, build_kdl, trainable_parameters
from kdlvision.optim import Adam
rng = np.random.default_rng(0)
model = build_kdl(ModelConfig(num_classes=10), [Expert.from_variant(v, 10, rng) for v in "ABC"], seed=0)
params = trainable_parameters(model)
opt = Adam(params, lr=1e-3)
x = rng.random((32, 3, 64, 64)).astype(np.float32)
y = rng.integers(0, 10, size=32)
def step():
    params.zero_grad()
    T.backward(T.cross_entropy(model(x), y))
    opt.step()
step()
t = time.perf_counter()
for _ in range({steps}):
    step()
print(json.dumps({{"backend": _kernels.BACKEND, "seconds_per_step": (time.perf_counter() - t) / {steps}}}))
"""


def bench_training(steps):
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, KDLVISION_NUMBA=flag)
        proc = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(steps=steps)], env=env,
                              capture_output=True, text=True, check=True)
        res = json.loads(proc.stdout.strip().splitlines()[-1])
        out[res["backend"]] = res["seconds_per_step"]
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5, help="training steps per backend")
    ap.add_argument("--no-train", action="store_true", help="skip the end-to-end training step timing")
    args = ap.parse_args()

    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, t_np, t_nb in bench_kernels(args.repeat):
        print(f"{name:<18}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>8.1f}x")
    conv = bench_conv(args.repeat)
    print(f"\nstride-1 conv fwd+bwd, [32,52,16,16] * [12,52,3,3]: shift-GEMM {1e3 * conv['shift-GEMM']:.2f} ms, "
          f"im2col ({K.BACKEND}) {1e3 * conv['im2col']:.2f} ms")
    if not args.no_train:
        res = bench_training(args.steps)
        print(f"\nkdl training step, batch 32: numpy {res['numpy']:.3f} s, numba {res['numba']:.3f} s, "
              f"speedup {res['numpy'] / res['numba']:.2f}x")


if __name__ == "__main__":
    main()
