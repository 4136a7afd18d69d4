"""Shared test utilities, chiefly the central finite-difference oracle."""

import numpy as np


def finite_difference_gradients(build_loss, tensors, h=1e-5):
    """Central-difference gradients of a rebuilt scalar loss.

    `build_loss` must construct the graph from the tensors' current values
    and return the scalar loss tensor; only its value is used, so the
    oracle is independent of the reverse-mode path it checks.
    """
    grads = []
    for t in tensors:
        grad = np.zeros_like(t.values)
        flat_values = t.values.reshape(-1)
        flat_grad = grad.reshape(-1)
        for k in range(flat_values.size):
            original = flat_values[k]
            flat_values[k] = original + h
            up = build_loss().item()
            flat_values[k] = original - h
            down = build_loss().item()
            flat_values[k] = original
            flat_grad[k] = (up - down) / (2.0 * h)
        grads.append(grad)
    return grads


def gradient_tolerance_violation(analytic, numeric, rtol=1e-4, atol=1e-7):
    """Worst violation of |analytic - numeric| <= max(rtol*|numeric|, atol)."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.abs(analytic - numeric)
    tol = np.maximum(rtol * np.abs(numeric), atol)
    return float((err - tol).max())


def assert_gradients_match(analytic_list, numeric_list, rtol=1e-4, atol=1e-7):
    for analytic, numeric in zip(analytic_list, numeric_list):
        violation = gradient_tolerance_violation(analytic, numeric, rtol, atol)
        assert violation <= 0.0, f"gradient mismatch, worst tolerance violation {violation:.3e}"


def _values_equal(a, b):
    if isinstance(a, float) and isinstance(b, float):
        return (np.isnan(a) and np.isnan(b)) or a == b
    if isinstance(a, tuple) and isinstance(b, tuple):
        return len(a) == len(b) and all(_values_equal(x, y) for x, y in zip(a, b))
    return a == b


def assert_metrics_equal(first, second):
    """Field-by-field RunMetrics comparison treating nan == nan."""
    assert (first.method, first.seed, first.num_modalities) == (
        second.method,
        second.seed,
        second.num_modalities,
    )
    assert len(first.epochs) == len(second.epochs)
    assert (first.final is None) == (second.final is None)
    records = list(zip(first.epochs, second.epochs))
    if first.final is not None:
        records.append((first.final, second.final))
    for rec_a, rec_b in records:
        assert type(rec_a) is type(rec_b)
        for name in vars(rec_a):
            va, vb = getattr(rec_a, name), getattr(rec_b, name)
            assert _values_equal(va, vb), f"{name}: {va!r} != {vb!r}"
