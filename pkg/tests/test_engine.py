"""Window buffers and compiled kernels, tested against naive bookkeeping."""

import numpy as np
import pytest

from stickywage.engine import (
    CompiledKernel,
    MemoryPieces,
    WindowBuffers,
    memory_inner_product,
    run_chunked,
    steps_in_window,
)
from stickywage.errors import DomainError, SimulationError
from stickywage.measures import KernelProcess, RadonMeasure


def test_steps_in_window():
    assert steps_in_window(1.0, 0.25) == 4
    with pytest.raises(DomainError):
        steps_in_window(1.0, 0.3)


def test_window_buffer_slides_transparently():
    rng = np.random.default_rng(0)
    hist = np.array([1.0, 2.0, 3.0])
    bufs = WindowBuffers(hist, n_paths=1, block=4, h=0.5, need_Y=True,
                         zeta=None)
    series = list(hist)
    for k in range(25):
        y_new = float(rng.uniform(0.5, 1.5))
        bufs.append(np.array([y_new]), (k + 1) * 0.5)
        series.append(y_new)
        # the live window must always equal the tail of the full series
        window = bufs.y[bufs.cur - 2: bufs.cur + 1, 0]
        assert np.allclose(window, series[-3:])
        # cumulative-trapezoid difference over the window
        got = bufs.Y[bufs.cur, 0] - bufs.Y[bufs.cur - 2, 0]
        want = np.trapezoid(series[-3:], dx=0.5)
        assert got == pytest.approx(want, rel=1e-12)


def test_window_buffer_exponential_integral():
    zeta = 0.7
    h = 0.25
    hist = np.array([1.0, 1.0, 1.0, 1.0, 1.0])
    bufs = WindowBuffers(hist, n_paths=1, block=8, h=h, need_Y=False,
                         zeta=zeta)
    ys = [1.0] * 5
    for k in range(12):
        y_new = 1.0 + 0.1 * k
        bufs.append(np.array([y_new]), (k + 1) * h)
        ys.append(y_new)
    # Q accumulates the trapezoid of exp(-zeta u) y(u) from the window start
    u = -1.0 + h * np.arange(len(ys))
    integrand = np.exp(-zeta * u) * np.array(ys)
    got = bufs.Q[bufs.cur, 0] - bufs.Q[bufs.cur - 4, 0]
    want = np.trapezoid(integrand[-5:], dx=h)
    assert got == pytest.approx(want, rel=1e-12)


def _filled_buffers(measure, h=0.25, n_paths=3, steps=10, seed=4):
    rng = np.random.default_rng(seed)
    n_hist = steps_in_window(measure.d, h)
    hist = rng.uniform(0.5, 1.5, n_hist + 1)
    bufs = WindowBuffers(hist, n_paths, block=4, h=h, need_Y=True, zeta=None)
    for k in range(steps):
        bufs.append(rng.uniform(0.5, 1.5, n_paths), (k + 1) * h)
    return bufs


def test_flat_eval_matches_generic_eval():
    """The constant-kernel fast path and the generic weighted path agree."""
    m = RadonMeasure(d=1.0, atoms=[(-0.5, 0.3), (-0.35, -0.1)],
                     density=[(-1.0, 0.2), (-0.4, -0.05)])
    h = 0.25
    n_hist = 4
    fast = CompiledKernel(KernelProcess.constant(m), h, n_hist)
    slow = CompiledKernel(
        KernelProcess.time_varying([(m, lambda t: 1.0)],
                                   tv_bound=m.total_variation()),
        h, n_hist)
    assert fast._flat_atoms is not None
    assert slow._flat_atoms is None
    bufs = _filled_buffers(m)
    a = fast.eval(bufs, 1.5, None)
    b = slow.eval(bufs, 1.5, None)
    assert np.allclose(a, b, rtol=1e-14, atol=1e-16)


def test_eval_fractional_atom_blends_linearly():
    # an atom off the grid reads the linear interpolant of the lagged path
    m = RadonMeasure(d=1.0, atoms=[(-0.3, 1.0)])
    h = 0.25
    kern = CompiledKernel(KernelProcess.constant(m), h, 4)
    bufs = _filled_buffers(m)
    cur = bufs.cur
    lag = -0.3 / h                       # -1.2 columns
    left = bufs.y[cur - 2]
    right = bufs.y[cur - 1]
    want = left * 0.2 + right * 0.8      # node weights around -1.2
    got = kern.eval(bufs, 0.0, None)
    assert np.allclose(got, want, rtol=1e-14)


def test_empty_kernel_evaluates_to_zero():
    m = RadonMeasure(d=1.0)
    kern = CompiledKernel(KernelProcess.constant(m), 0.25, 4)
    assert kern.is_empty
    bufs = _filled_buffers(m)
    assert np.all(kern.eval(bufs, 0.0, None) == 0.0)


def test_tv_guard_fires_inside_eval():
    m = RadonMeasure(d=1.0, atoms=[(-0.5, 1.0)])
    kern = CompiledKernel(
        KernelProcess.time_varying([(m, lambda t: t)], tv_bound=1.0),
        0.25, 4)
    bufs = _filled_buffers(m)
    kern.eval(bufs, 0.5, None)
    with pytest.raises(SimulationError):
        kern.eval(bufs, 3.0, None)


def test_memory_inner_product_is_trapezoid_of_the_product():
    mp = MemoryPieces(zeta=0.6,
                      los=np.array([-1.0, -0.5]),
                      his=np.array([-0.5, 0.0]),
                      A=np.array([0.4, 0.0]),
                      B=np.array([0.1, 0.25]))
    h = 0.125
    s = -1.0 + h * np.arange(9)
    x = 1.0 + 0.3 * np.sin(3.0 * s)
    got = memory_inner_product(mp, x, h)
    # piecewise trapezoid with a break at -0.5; each piece evaluates its own
    # weight at the shared node
    w0 = 0.4 * np.exp(-0.6 * s[:5]) + 0.1
    want = (np.trapezoid(w0 * x[:5], dx=h)
            + np.trapezoid(0.25 * x[4:], dx=h))
    assert got == pytest.approx(want, rel=1e-12)


def test_memory_inner_product_empty():
    mp = MemoryPieces(zeta=0.5, los=np.array([]), his=np.array([]),
                      A=np.array([]), B=np.array([]))
    assert memory_inner_product(mp, np.ones(5), 0.25) == 0.0


def test_run_chunked_reassembles_in_order():
    def worker(path_range):
        return {"ids": np.asarray(list(path_range))}

    for n_workers in (1, 3, 8):
        results = run_chunked(worker, n_paths=23, chunk=5, n_workers=n_workers)
        ids = np.concatenate([r["ids"] for r in results])
        assert np.array_equal(ids, np.arange(23))
