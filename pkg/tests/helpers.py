"""Shared test utilities: gradient checking against the finite-difference oracle."""
from __future__ import annotations

import numpy as np

from modasr import autodiff as ad


def check_gradients(build, params, rtol=1e-4, eps=1e-5):
    """Assert analytic gradients of ``build(*params)`` match central differences.

    ``build`` maps leaf tensors to a scalar Tensor. Must be called under
    ``precision("float64")`` by the test; 32-bit differences are too noisy.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    with ad.Tape() as tape:
        loss = build(*params)
        tape.backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]

    def f(*ps):
        return build(*ps).item()

    numeric = ad.finite_diff_grad(f, params, eps=eps)
    for a, n, p in zip(analytic, numeric, params):
        err = ad.grad_rel_err(a, n)
        assert err < rtol, f"gradient mismatch (rel-err {err:.3e}) for leaf of shape {p.shape}"


def rand(rng, *shape):
    return ad.Tensor(rng.standard_normal(shape))
