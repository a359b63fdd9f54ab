/* Word-sized modular arithmetic for primes below 2^62. */
#ifndef CKKSFED_MODARITH_H
#define CKKSFED_MODARITH_H

#include <stdint.h>
#include <stddef.h>

typedef unsigned __int128 u128;

/* Barrett reduction with k = bitlen(q), mu = floor(2^(2k) / q). */
static inline uint64_t mod_mul(uint64_t a, uint64_t b, uint64_t q, uint64_t mu, int k)
{
    u128 x = (u128)a * b;
    u128 t = x >> (k - 1);
    u128 qh = (t * (u128)mu) >> (k + 1);
    uint64_t r = (uint64_t)(x - qh * (u128)q);
    while (r >= q) r -= q;
    return r;
}

/* Shoup product with a precomputed constant: w_shoup = floor(w * 2^64 / q). */
static inline uint64_t mod_mul_shoup(uint64_t x, uint64_t w, uint64_t w_shoup, uint64_t q)
{
    uint64_t hi = (uint64_t)(((u128)x * w_shoup) >> 64);
    uint64_t r = x * w - hi * q;
    return r >= q ? r - q : r;
}

static inline uint64_t mod_add(uint64_t a, uint64_t b, uint64_t q)
{
    uint64_t s = a + b;
    return s >= q ? s - q : s;
}

static inline uint64_t mod_sub(uint64_t a, uint64_t b, uint64_t q)
{
    return a >= b ? a - b : a + q - b;
}

/* In-place negacyclic NTT; natural order in, bit-reversed order out.
   Harvey lazy butterflies keep values in [0, 4q) until the final pass, so q < 2^62. */
static void ntt_forward_c(uint64_t *a, size_t n, const uint64_t *psi_rev,
                          const uint64_t *psi_rev_shoup, uint64_t q)
{
    size_t t = n, m, i, j;
    const uint64_t two_q = 2 * q;
    for (m = 1; m < n; m <<= 1) {
        t >>= 1;
        for (i = 0; i < m; i++) {
            uint64_t *x = a + 2 * i * t, *y = x + t;
            uint64_t w = psi_rev[m + i], ws = psi_rev_shoup[m + i];
            for (j = 0; j < t; j++) {
                uint64_t u = x[j];
                u -= (u >= two_q) ? two_q : 0;
                uint64_t hi = (uint64_t)(((u128)y[j] * ws) >> 64);
                uint64_t v = y[j] * w - hi * q;
                x[j] = u + v;
                y[j] = u - v + two_q;
            }
        }
    }
    for (j = 0; j < n; j++) {
        uint64_t u = a[j];
        u -= (u >= two_q) ? two_q : 0;
        a[j] = u >= q ? u - q : u;
    }
}

/* Inverse of ntt_forward_c, including the 1/n factor. */
static void ntt_inverse_c(uint64_t *a, size_t n, const uint64_t *psi_inv_rev,
                          const uint64_t *psi_inv_rev_shoup, uint64_t n_inv,
                          uint64_t n_inv_shoup, uint64_t q)
{
    size_t t = 1, m, i, j;
    for (m = n; m > 1; m >>= 1) {
        size_t h = m >> 1, j1 = 0;
        for (i = 0; i < h; i++) {
            uint64_t w = psi_inv_rev[h + i], ws = psi_inv_rev_shoup[h + i];
            for (j = j1; j < j1 + t; j++) {
                uint64_t u = a[j];
                uint64_t v = a[j + t];
                a[j] = mod_add(u, v, q);
                a[j + t] = mod_mul_shoup(mod_sub(u, v, q), w, ws, q);
            }
            j1 += 2 * t;
        }
        t <<= 1;
    }
    for (j = 0; j < n; j++) a[j] = mod_mul_shoup(a[j], n_inv, n_inv_shoup, q);
}

static void mul_vec_c(const uint64_t *a, const uint64_t *b, uint64_t *out, size_t n,
                      uint64_t q, uint64_t mu, int k)
{
    size_t j;
    for (j = 0; j < n; j++) out[j] = mod_mul(a[j], b[j], q, mu, k);
}

static void mul_scalar_c(const uint64_t *a, uint64_t c, uint64_t *out, size_t n,
                         uint64_t q, uint64_t mu, int k)
{
    size_t j;
    for (j = 0; j < n; j++) out[j] = mod_mul(a[j], c, q, mu, k);
}

#endif
