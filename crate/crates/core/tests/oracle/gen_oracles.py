"""High-precision reference values frozen into tests/oracles.rs.

Run with `python3 gen_oracles.py`; requires mpmath.
"""
from mpmath import mp, mpf, exp, fsum, sqrt

mp.dps = 50


def thetas(d, base=10000):
    return [mpf(base) ** (-mpf(2 * m) / d) for m in range(d // 2)]


def softmax(xs):
    xs = [mpf(x) for x in xs]
    m = max(xs)
    es = [exp(x - m) for x in xs]
    s = fsum(es)
    return [e / s for e in es]


def cosine(u, v):
    u = [mpf(x) for x in u]
    v = [mpf(x) for x in v]
    return fsum(a * b for a, b in zip(u, v)) / (sqrt(fsum(a * a for a in u)) * sqrt(fsum(b * b for b in v)))


def show(name, xs):
    print(f"const {name}: [f64; {len(xs)}] = [")
    for x in xs:
        print(f"    {float(x)!r},")
    print("];")


show("THETAS_16", thetas(16))
show("THETAS_64", thetas(64))
show("SOFTMAX_WIDE", softmax([1000.0, 999.0, -5.0, 0.5, 1000.0]))
show("SOFTMAX_SMALL", softmax([0.1, 0.2, 0.3, -0.4]))
print(f"const COSINE_SKEW: f64 = {float(cosine([1e-3, 2.0, -3.5, 7.25], [4.0, -1e-2, 0.5, 2.0]))!r};")
