"""BDF time integration with variable-order startup.

The march runs order n at step n for n = 1, 2, 3 and fourth order from
step 4 on; each order's step matrix (c0/tau) M + A is factorized once and
reused. The fine reference and the multiscale system share this one code
path, only the matrices differ.
"""

import warnings

import numpy as np

from .linalg import DOUBLE, BlockSystem, factorize

_BDF = {
    1: (1.0, -1.0),
    2: (3.0 / 2.0, -2.0, 1.0 / 2.0),
    3: (11.0 / 6.0, -3.0, 3.0 / 2.0, -1.0 / 3.0),
    4: (25.0 / 12.0, -4.0, 3.0, -4.0 / 3.0, 1.0 / 4.0),
}


def bdf_coefficients(order):
    """Backward-difference coefficients (c0, ..., cn), normalized so the
    implicit step matrix is (c0/tau) M + A."""
    if order not in _BDF:
        raise ValueError(f"BDF order must be in 1..4, got {order}")
    return _BDF[order]


class BdfScheme:
    def __init__(self, order):
        self.order = order
        self.coefficients = bdf_coefficients(order)

    def apply(self, samples, tau):
        """Backward difference of a sample list [u_n, u_{n-1}, ...]."""
        c = self.coefficients
        if len(samples) < len(c):
            raise ValueError("not enough history for this order")
        return sum(ck * uk for ck, uk in zip(c, samples)) / tau


class TimeGrid:
    """Uniform time grid; the step count T/tau must be an integer."""

    def __init__(self, tau, T):
        tau, T = float(tau), float(T)
        if tau <= 0 or T <= 0:
            raise ValueError("need tau > 0 and T > 0")
        n = T / tau
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"tau={tau} does not divide T={T}")
        self.tau = tau
        self.T = T
        self.num_steps = int(round(n))

    def times(self):
        return self.tau * np.arange(self.num_steps + 1)


class StateHistory:
    """Ring buffer of the most recent solution vectors, newest first."""

    def __init__(self, depth=4):
        self.depth = depth
        self._buf = []

    def push(self, u):
        self._buf.insert(0, u)
        del self._buf[self.depth + 1:]

    def recent(self, count):
        if len(self._buf) < count:
            raise ValueError("history shallower than requested")
        return self._buf[:count]

    def __len__(self):
        return len(self._buf)


def initial_state(dimension, u0=None, f=None):
    """Initial multiscale coefficient vector.

    Only the well-prepared zero-data case is supported: projecting nonzero
    initial data would require the time derivatives of its multiscale
    projection at t = 0, which this artifact does not construct.
    """
    if u0 is not None and np.any(np.asarray(u0) != 0):
        raise NotImplementedError(
            "unsupported: nonzero initial data requires compatibility "
            "derivatives of the multiscale projection at t = 0")
    if f is not None:
        f0 = np.asarray(f(0.0))
        if np.any(np.abs(f0) > 1e-14):
            warnings.warn("f(., 0) != 0: well-preparedness is weakened; "
                          "the temporal order may degrade near t = 0")
    return np.zeros(dimension)


def march(M, A, load, grid: TimeGrid, u0, policy=None, solver="direct",
          split=None, max_order=4, store=True):
    """BDF march of M u' + A u = load(t) from u0 over the grid.

    ``solver='schur'`` solves each implicit step through the block
    elimination of :class:`~eholod.linalg.BlockSystem` with the leading
    block of size ``split``. Returns the list of states (including u0)
    when ``store`` is set, else only the final state in a length-1 list.
    """
    policy = policy or DOUBLE
    tau = grid.tau
    u0 = policy.asarray(np.asarray(u0))
    M = M if not policy.extended else policy.densify(M)
    A = A if not policy.extended else policy.densify(A)

    steppers = {}

    def stepper(order):
        if order not in steppers:
            c0 = bdf_coefficients(order)[0]
            S = (c0 / tau) * M + A
            if solver == "schur" and split is not None:
                steppers[order] = BlockSystem(S, split, policy=policy,
                                              name=f"BDF{order} step matrix")
            else:
                steppers[order] = factorize(S, kind="spd", policy=policy,
                                            name=f"BDF{order} step matrix")
        return steppers[order]

    history = StateHistory(depth=max_order)
    history.push(u0)
    states = [u0]
    for n in range(1, grid.num_steps + 1):
        order = min(n, max_order)
        coeffs = bdf_coefficients(order)
        past = history.recent(order)
        acc = coeffs[1] * past[0]
        for ck, uk in zip(coeffs[2:], past[1:]):
            acc = acc + ck * uk
        rhs = policy.asarray(load(n * tau)) - (M @ acc) / tau
        u = stepper(order).solve(rhs)
        history.push(u)
        if store:
            states.append(u)
        else:
            states = [u]
    return states


def dump_states(states, times, indices, path):
    """Write selected states as one binary .npz plus a small manifest."""
    import json
    from pathlib import Path
    path = Path(path)
    sel = {f"state_{i:06d}": np.asarray(states[i], dtype=np.float64)
           for i in indices}
    np.savez(path.with_suffix(".npz"), **sel)
    manifest = {"indices": [int(i) for i in indices],
                "times": [float(times[i]) for i in indices],
                "dimension": int(np.asarray(states[0]).shape[0])}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))
