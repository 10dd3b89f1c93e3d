import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, x, step=1e-4):
    """Independent finite-difference gradient of scalar ``f()`` w.r.t. ``x`` (mutated in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = f()
        flat[i] = orig - step
        minus = f()
        flat[i] = orig
        g[i] = (plus - minus) / (2 * step)
    return grad


def max_rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def naive_conv(x, w, b, stride, pad):
    """Six nested loops over [N,H,W,Cin] input and [kh,kw,Cin,Cout] weights."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    sh, sw = stride
    pt, pb, pl, pr = pad
    xp = np.zeros((n, h + pt + pb, wd + pl + pr, cin))
    xp[:, pt:pt + h, pl:pl + wd, :] = x
    ho = (h + pt + pb - kh) // sh + 1
    wo = (wd + pl + pr - kw) // sw + 1
    out = np.zeros((n, ho, wo, cout))
    for i in range(n):
        for y in range(ho):
            for xx in range(wo):
                for co in range(cout):
                    acc = b[co]
                    for dy in range(kh):
                        for dx in range(kw):
                            for ci in range(cin):
                                acc += xp[i, y * sh + dy, xx * sw + dx, ci] * w[dy, dx, ci, co]
                    out[i, y, xx, co] = acc
    return out


def naive_pool(x, window, stride):
    n, h, w, c = x.shape
    ph, pw = window
    sh, sw = stride
    ho = (h - ph) // sh + 1
    wo = (w - pw) // sw + 1
    out = np.zeros((n, ho, wo, c))
    for i in range(n):
        for y in range(ho):
            for xx in range(wo):
                for ch in range(c):
                    best = -np.inf
                    for dy in range(ph):
                        for dx in range(pw):
                            best = max(best, x[i, y * sh + dy, xx * sw + dx, ch])
                    out[i, y, xx, ch] = best
    return out


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "skipped"):
        for report in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(report, "user_properties", ()))
            if "criterion" in props and report.when in ("call", "setup"):
                word = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[outcome]
                lines.append((props["criterion"], f"{word}  criterion {props['criterion']:>2}: {props['title']}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
