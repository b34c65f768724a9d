"""Central finite-difference verification of analytic gradients.

This is the independent oracle for the backward pass: it re-derives every
gradient entry from two forward evaluations and never touches the tape.
Meant to run in 64-bit mode (h = 1e-5 drowns in float32 rounding).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, no_grad

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4
# Entries whose analytic and numeric gradients both sit below this magnitude
# are compared absolutely; a pure ratio there would amplify rounding noise.
_REL_FLOOR = 1e-5


def relative_error(analytic, numeric):
    denom = max(abs(analytic), abs(numeric), _REL_FLOOR)
    return abs(analytic - numeric) / denom


def numeric_gradient(f, array, indices=None, h=FD_STEP):
    """Central differences of scalar-valued ``f`` w.r.t. entries of ``array``.

    ``array`` is perturbed in place and restored. ``indices`` restricts the
    check to a subset of flat positions (full sweep when None).
    """
    flat = array.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    grads = {}
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            grads[i] = (fp - fm) / (2.0 * h)
    return grads


def check_gradients(loss_fn, tensors, indices_per_tensor=None, h=FD_STEP):
    """Compare analytic grads of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph from the leaf ``tensors`` on every
    call. Returns the worst relative error across all checked entries.
    """
    for t in tensors:
        t.grad = np.zeros_like(t.data) if isinstance(t, Tensor) else None
    loss = loss_fn()
    backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for t, ga in zip(tensors, analytic):
        idx = None if indices_per_tensor is None else indices_per_tensor.get(id(t))
        numeric = numeric_gradient(lambda: float(loss_fn().data), t.data, idx, h=h)
        gaf = ga.reshape(-1)
        for i, gn in numeric.items():
            worst = max(worst, relative_error(float(gaf[i]), gn))
    return worst


def sample_indices(rng, size, max_entries):
    """Deterministic flat-index subsample for large parameter tensors."""
    if size <= max_entries:
        return list(range(size))
    return sorted(rng.choice(size, size=max_entries, replace=False).tolist())


def check_model_gradients(model, x, labels, rng, max_entries_per_param=4, h=FD_STEP):
    """End-to-end check of a model's parameter gradients on one batch.

    Samples a few entries per parameter tensor (a full sweep would cost two
    forward passes per weight). Model must be built in float64.
    """
    from .tensor import softmax_xent  # local import keeps module load light

    params = [p for p in model.parameters() if p.trainable]
    idx_map = {
        id(p): sample_indices(rng, p.data.size, max_entries_per_param) for p in params
    }

    def loss_fn():
        return softmax_xent(model.forward(x, train=True), labels)

    return check_gradients(loss_fn, params, idx_map, h=h)
