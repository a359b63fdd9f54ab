"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]

Kernel timings run both backends in-process. ``--end-to-end`` additionally
times encrypt / aggregate / decrypt of one ciphertext in a subprocess per
backend (selected through CKKSFED_BACKEND).
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from ckksfed import _fallback, backend, ckks
from ckksfed.fedavg import DEFAULT_MLP_SIZES, init_mlp
from ckksfed.modelpack import flatten

E2E_SCRIPT = r"""
import json, timeit, numpy as np
from ckksfed import backend, ckks
from ckksfed.fedavg import AggregationWeights, aggregate_encrypted
from ckksfed.modelpack import decrypt_model, encrypt_model
p = ckks.CkksParams.create(); rng = np.random.default_rng(0); kp = ckks.keygen(p, rng)
m = {"w": rng.uniform(-1, 1, p.slot_count)}
packed = [encrypt_model(m, kp.public_key, p, rng) for _ in range(8)]
w = AggregationWeights.from_sizes(range(1, 9))
agg = aggregate_encrypted(packed, w, p)
t = lambda f, n: min(timeit.repeat(f, number=1, repeat=n)) * 1e3
print(json.dumps({"backend": backend.NAME,
    "encrypt_ms": t(lambda: encrypt_model(m, kp.public_key, p, rng), REPEAT),
    "aggregate8_ms": t(lambda: aggregate_encrypted(packed, w, p), REPEAT),
    "decrypt_ms": t(lambda: decrypt_model(agg, kp.secret_key), REPEAT)}))
"""


def best_ms(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def kernel_cases(impl, ring, rng):
    a = np.ascontiguousarray(np.stack([rng.integers(0, q, ring.ring_degree, dtype=np.uint64) for q in ring.moduli]))
    b = a[::-1].copy()
    out = np.empty_like(a)
    qs, mus, ks = ring.kernel_args(len(ring.moduli))
    sizes = np.array(DEFAULT_MLP_SIZES, dtype=np.int64)
    _, flat = flatten(init_mlp(DEFAULT_MLP_SIZES, rng))
    X, y = rng.normal(size=(1045, sizes[0])), rng.normal(size=1045) + 62.0
    order = np.arange(1045, dtype=np.int64)
    return {
        "ntt_forward (3 x 16384)": lambda: impl.ntt_forward_rows(a.copy(), qs, ring._psi_rev, ring._psi_rev_shoup),
        "ntt_inverse (3 x 16384)": lambda: impl.ntt_inverse_rows(
            a.copy(), qs, ring._psi_inv_rev, ring._psi_inv_rev_shoup, ring._n_invs, ring._n_invs_shoup),
        "mul_rows (3 x 16384)": lambda: impl.mul_rows(a, b, out, qs, mus, ks),
        "sgd epoch (1045 samples)": lambda: impl.mlp_sgd_pass(flat.copy(), sizes, X, y, order, 1, 5e-5),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--end-to-end", action="store_true")
    args = parser.parse_args()

    params = ckks.CkksParams.create()
    impls = {"numpy": _fallback}
    if backend.compiled is not None:
        impls["cython"] = backend.compiled
    else:
        print("compiled extension not available; timing the fallback only")
    results = {}
    for name, impl in impls.items():
        cases = kernel_cases(impl, params.ring, np.random.default_rng(0))
        results[name] = {case: best_ms(fn, args.repeat) for case, fn in cases.items()}
    print(f"{'kernel':<28}" + "".join(f"{n:>12}" for n in impls) + ("     speedup" if len(impls) == 2 else ""))
    for case in results["numpy"]:
        row = f"{case:<28}" + "".join(f"{results[n][case]:>10.2f}ms" for n in impls)
        if len(impls) == 2:
            row += f"{results['numpy'][case] / results['cython'][case]:>11.1f}x"
        print(row)

    if args.end_to_end:
        print()
        for name in impls:
            env = dict(os.environ, CKKSFED_BACKEND=name)
            proc = subprocess.run([sys.executable, "-c", E2E_SCRIPT.replace("REPEAT", str(args.repeat))],
                                  env=env, capture_output=True, text=True, check=True)
            data = json.loads(proc.stdout)
            print(f"{data['backend']:<8} encrypt {data['encrypt_ms']:8.1f} ms   "
                  f"aggregate x8 {data['aggregate8_ms']:8.1f} ms   decrypt {data['decrypt_ms']:8.1f} ms")


if __name__ == "__main__":
    main()
