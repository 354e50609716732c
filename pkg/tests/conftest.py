import math

import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# independent dense oracles


def rope_angles(pos, axis_pairs, base=10000.0):
    """Per-pair rotation angles for one (t, y, x) position, written out from the frequency law."""
    out = []
    for p, n in zip(pos, axis_pairs):
        for k in range(n):
            out.append(p * base ** (-2.0 * k / (2.0 * n)))
    return np.array(out)


def rope_matrix(pos, axis_pairs, base=10000.0):
    """Explicit block-diagonal rotation matrix R(p)."""
    ang = rope_angles(pos, axis_pairs, base)
    D = 2 * len(ang)
    R = np.zeros((D, D))
    for j, a in enumerate(ang):
        c, s = math.cos(a), math.sin(a)
        R[2 * j : 2 * j + 2, 2 * j : 2 * j + 2] = [[c, -s], [s, c]]
    return R


def dense_softmax(q, k):
    """Row softmax of q k^T / sqrt(d) evaluated with plain loops over numpy rows (float64)."""
    q = np.asarray(q, np.float64)
    k = np.asarray(k, np.float64)
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True), m[..., 0] + np.log(e.sum(axis=-1))


def quantile_w1(a, b):
    """W1 as the integral over u in (0, 1) of |F_a^-1(u) - F_b^-1(u)|, evaluated exactly piecewise."""
    a, b = np.sort(a), np.sort(b)
    cuts = np.unique(np.concatenate([np.arange(a.size + 1) / a.size, np.arange(b.size + 1) / b.size]))
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (lo + hi)
        qa = a[min(int(math.floor(mid * a.size)), a.size - 1)]
        qb = b[min(int(math.floor(mid * b.size)), b.size - 1)]
        total += (hi - lo) * abs(qa - qb)
    return total
