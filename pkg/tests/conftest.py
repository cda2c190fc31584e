import numpy as np
import pytest

from invisp import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def grad_check(build, inputs, h=1e-3, indices=None):
    """Return (analytic, numeric) gradients of scalar ``build(*inputs)`` per input.

    Runs in float64; ``indices`` optionally limits the probed entries (same
    list for every input, flat indices).
    """
    analytic, numeric = [], []
    with ad.precision(np.float64):
        for t in inputs:
            t.grad = None
        with ad.Tape():
            loss = build(*inputs)
            ad.backward(loss)
        for t in inputs:
            idx = None if indices is None else [i for i in indices if i < t.size]
            num = ad.numerical_gradient(lambda: build(*inputs).item(), t.data, h=h, indices=idx)
            ana = t.grad.reshape(-1).copy()
            if idx is not None:
                ana, num = ana[idx], num.reshape(-1)[idx]
            analytic.append(ana.reshape(-1))
            numeric.append(np.asarray(num).reshape(-1))
    return analytic, numeric


@pytest.fixture
def gradcheck():
    def run(build, inputs, h=1e-3, indices=None, tol=1e-3):
        analytic, numeric = grad_check(build, inputs, h, indices)
        errs = [relative_error(a, n) for a, n in zip(analytic, numeric)]
        assert max(errs) < tol, f"relative errors {errs}"
        return errs

    return run


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


def leaf(arr, dtype=np.float64):
    with ad.precision(dtype):
        return ad.Tensor(arr, requires_grad=True)


def as_float64(params, seed=0):
    """Cast parameters to float64 and move biases off exact zero.

    Zero biases place ReLU pre-activations exactly on the kink wherever a
    whole hidden column is inactive, where one-sided differences disagree.
    """
    rng = np.random.default_rng(seed)
    for name, p in params:
        p.data = p.data.astype(np.float64)
        if name.endswith("bias"):
            p.data = p.data + 0.05 * rng.standard_normal(p.shape)


def brute_force_ssim(a, b, size=11, sigma=1.5, peak=1.0):
    """SSIM written window by window with an explicit 2-D Gaussian."""
    x = np.arange(size) - (size - 1) / 2
    g2 = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * sigma**2))
    g2 /= g2.sum()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    vals = []
    for ch in range(a.shape[0]):
        for i in range(a.shape[1] - size + 1):
            for j in range(a.shape[2] - size + 1):
                pa = a[ch, i : i + size, j : j + size]
                pb = b[ch, i : i + size, j : j + size]
                ma, mb = np.sum(g2 * pa), np.sum(g2 * pb)
                va = np.sum(g2 * (pa - ma) ** 2)
                vb = np.sum(g2 * (pb - mb) ** 2)
                cov = np.sum(g2 * (pa - ma) * (pb - mb))
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
