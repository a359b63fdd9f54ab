import numpy as np
import pytest

from ckksfed import _fallback, backend
from ckksfed import lattice as lt

compiled = backend.compiled
needs_ext = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def ring(n=1024):
    return lt.RingParams(n, lt.find_ntt_primes(60, n, 1) + lt.find_ntt_primes(40, n, 2), security_bits=None)


def test_backend_names():
    assert _fallback.NAME == "numpy"
    assert backend.NAME in ("numpy", "cython")


@pytest.mark.parametrize("a,b,q", [(2**61 - 2, 2**61 - 3, 2305843009213693951), (12345, 67890, 97)])
def test_fallback_mulmod_exact(a, b, q):
    out = _fallback.mulmod(np.array([a % q], dtype=np.uint64), np.array([b % q], dtype=np.uint64), q)
    assert int(out[0]) == (a % q) * (b % q) % q


def test_fallback_mulmod_random(rng):
    q = lt.find_ntt_primes(61, 16, 1)[0]
    a = rng.integers(0, q, size=2000, dtype=np.uint64)
    b = rng.integers(0, q, size=2000, dtype=np.uint64)
    got = _fallback.mulmod(a, b, q)
    assert got.tolist() == [int(x) * int(y) % q for x, y in zip(a, b)]


@needs_ext
def test_ntt_kernels_agree(rng):
    r = ring()
    a = lt.sample_uniform(r, rng, is_ntt=False).residues
    x, y = a.copy(), a.copy()
    compiled.ntt_forward_rows(x, r._qs, r._psi_rev, r._psi_rev_shoup)
    _fallback.ntt_forward_rows(y, r._qs, r._psi_rev, r._psi_rev_shoup)
    assert np.array_equal(x, y)
    compiled.ntt_inverse_rows(x, r._qs, r._psi_inv_rev, r._psi_inv_rev_shoup, r._n_invs, r._n_invs_shoup)
    _fallback.ntt_inverse_rows(y, r._qs, r._psi_inv_rev, r._psi_inv_rev_shoup, r._n_invs, r._n_invs_shoup)
    assert np.array_equal(x, y)
    assert np.array_equal(x, a)


@needs_ext
def test_mul_kernels_agree(rng):
    r = ring()
    a = lt.sample_uniform(r, rng).residues
    b = lt.sample_uniform(r, rng).residues
    qs, mus, ks = r.kernel_args(3)
    o1, o2 = np.empty_like(a), np.empty_like(a)
    compiled.mul_rows(a, b, o1, qs, mus, ks)
    _fallback.mul_rows(a, b, o2, qs, mus, ks)
    assert np.array_equal(o1, o2)
    cs = np.array([q - 1 for q in r.moduli], dtype=np.uint64)
    compiled.mul_scalar_rows(a, cs, o1, qs, mus, ks)
    _fallback.mul_scalar_rows(a, cs, o2, qs, mus, ks)
    assert np.array_equal(o1, o2)
    assert o1[0].tolist() == [(-int(v)) % r.moduli[0] for v in a[0]]


@needs_ext
@pytest.mark.parametrize("batch", [1, 3, 64])
def test_sgd_kernels_agree(rng, batch):
    from ckksfed.fedavg import init_mlp
    from ckksfed.modelpack import flatten
    sizes = np.array([6, 9, 5, 1], dtype=np.int64)
    _, flat = flatten(init_mlp(tuple(sizes), rng))
    X, y = rng.normal(size=(40, 6)), rng.normal(size=40)
    order = rng.permutation(40).astype(np.int64)
    p1, p2 = flat.copy(), flat.copy()
    l1 = compiled.mlp_sgd_pass(p1, sizes, X, y, order, batch, 1e-2)
    l2 = _fallback.mlp_sgd_pass(p2, sizes, X, y, order, batch, 1e-2)
    assert l1 == pytest.approx(l2, rel=1e-12)
    assert np.allclose(p1, p2, rtol=1e-12, atol=1e-14)


def test_forced_fallback_end_to_end():
    import os
    import subprocess
    import sys
    script = (
        "import numpy as np\n"
        "from ckksfed import backend, ckks\n"
        "from ckksfed.fedavg import AggregationWeights, aggregate_encrypted\n"
        "from ckksfed.modelpack import decrypt_model, encrypt_model\n"
        "assert backend.NAME == 'numpy'\n"
        "p = ckks.CkksParams.create(); rng = np.random.default_rng(0); kp = ckks.keygen(p, rng)\n"
        "ms = [{'w': rng.uniform(-1, 1, 100)} for _ in range(2)]\n"
        "agg = aggregate_encrypted([encrypt_model(m, kp.public_key, p, rng) for m in ms],\n"
        "                          AggregationWeights((1.0, 3.0)), p)\n"
        "out = decrypt_model(agg, kp.secret_key)['w']\n"
        "assert np.max(np.abs(out - (0.25 * ms[0]['w'] + 0.75 * ms[1]['w']))) < 1e-6\n"
        "print('ok')\n"
    )
    env = dict(os.environ, CKKSFED_BACKEND="numpy")
    proc = subprocess.run([sys.executable, "-c", script], env=env, capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip() == "ok"
