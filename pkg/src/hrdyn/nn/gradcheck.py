"""Central finite-difference verification of backpropagated gradients."""

import numpy as np

from ..exceptions import GradientCheckError, NonFiniteLossError

# denominators below this are treated as absolute error
_REL_FLOOR = 1e-6
# one-sided slopes differing by more than this fraction mark a kink
_KINK_RTOL = 1e-2


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), _REL_FLOOR)


def _is_kink(loss, plus, minus, h):
    fwd, bwd = (plus - loss) / h, (loss - minus) / h
    return abs(fwd - bwd) > max(_KINK_RTOL * max(abs(fwd), abs(bwd)), _REL_FLOOR)


def grad_check(model_fn, params, inputs, tolerance=None, n_coords=None, seed=0,
               return_details=False):
    """Compare backprop against central differences, coordinate by coordinate.

    Parameters
    ----------
    model_fn : callable
        ``model_fn(params, inputs) -> (loss, grads)`` where ``grads`` maps the
        same names as ``params``.  Must be deterministic.
    params : dict of str -> ndarray
        Perturbed in place and restored after each probe.
    n_coords : int, optional
        Probe only this many random coordinates per tensor; all by default.
    tolerance : float, optional
        Raise :class:`GradientCheckError` if the worst error exceeds it.
    return_details : bool
        Also return a dict with the number of probed and skipped coordinates.

    Returns
    -------
    float
        Maximum relative error ``|a - n| / max(|a|, |n|, 1e-6)``.  The step
        is ``1e-5 * max(1, |theta_i|)``.  Coordinates sitting on a kink
        (ReLU at exactly zero, max-pool tie), detected by disagreeing
        one-sided slopes, have no derivative and are skipped.
    """
    loss, grads = model_fn(params, inputs)
    if not np.isfinite(loss):
        raise NonFiniteLossError("grad_check: loss is not finite")
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    probed = skipped = 0
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        if n_coords is None or n_coords >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        g = grads[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            h = 1e-5 * max(1.0, abs(orig))
            flat[i] = orig + h
            plus, _ = model_fn(params, inputs)
            flat[i] = orig - h
            minus, _ = model_fn(params, inputs)
            flat[i] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NonFiniteLossError(f"grad_check: loss not finite when probing {name}[{i}]")
            probed += 1
            if _is_kink(loss, plus, minus, h):
                skipped += 1
                continue
            worst = max(worst, relative_error(g[i], (plus - minus) / (2 * h)))
    if tolerance is not None and worst > tolerance:
        raise GradientCheckError(f"max relative gradient error {worst:.3g} exceeds {tolerance:.3g}")
    if return_details:
        return worst, {"probed": probed, "skipped_kinks": skipped}
    return worst
