"""Minimal differentiable-computation kernel.

Dense float64 tensors (plain numpy arrays), named parameter stores, a
reverse-mode tape recorded per forward pass, a fused GRU-sequence node for
trajectory unrolling, and a central finite-difference gradient oracle.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError, StateError

Array = np.ndarray

# Keys of one GRU cell parameter slice.
GRU_KEYS = ("w_r", "u_r", "b_r", "w_z", "u_z", "b_z", "w_c", "u_c", "b_c")


def tensor(data, shape=None, check: bool = True) -> Array:
    """Build a C-order float64 array, optionally verifying finiteness.

    ``shape`` reshapes the flat data; a size mismatch raises DimensionError.
    """
    arr = np.array(data, dtype=np.float64, order="C")
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise DimensionError(
                f"cannot shape {arr.size} values into {tuple(shape)}"
            )
        arr = arr.reshape(shape)
    if check and not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains NaN or Inf")
    return arr


def check_finite(arr: Array, what: str = "value") -> Array:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} is not finite")
    return arr


# ---------------------------------------------------------------------------
# Parameter and gradient stores
# ---------------------------------------------------------------------------


class ParamStore:
    """Ordered map of parameter name -> float64 array, with a version counter.

    Iteration order is insertion order and is deterministic; online and
    target stores built from the same shape map are congruent.
    """

    def __init__(self, entries: Mapping[str, Array] | None = None):
        self._entries: dict[str, Array] = {}
        self.version = 0
        if entries is not None:
            for name, value in entries.items():
                self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._entries[name] = tensor(value)

    def __getitem__(self, name: str) -> Array:
        return self._entries[name]

    def __setitem__(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if name in self._entries and arr.shape != self._entries[name].shape:
            raise DimensionError(
                f"shape {arr.shape} does not match existing {name!r} "
                f"{self._entries[name].shape}"
            )
        self._entries[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Array]]:
        return iter(self._entries.items())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: arr.shape for name, arr in self._entries.items()}

    def slice(self, prefix: str) -> dict[str, Array]:
        """Entries under ``prefix``, keyed by the remainder of the name."""
        return {
            name[len(prefix):]: arr
            for name, arr in self._entries.items()
            if name.startswith(prefix)
        }

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for name, arr in self._entries.items():
            dup._entries[name] = arr.copy()
        dup.version = self.version
        return dup

    def congruent(self, other: "ParamStore") -> bool:
        return self.shapes() == other.shapes()

    def n_scalars(self) -> int:
        return sum(arr.size for arr in self._entries.values())


class GradStore:
    """Gradient arrays shape-congruent with one ParamStore."""

    def __init__(self, entries: dict[str, Array]):
        self._entries = entries

    @classmethod
    def zeros_like(cls, params: ParamStore) -> "GradStore":
        return cls({name: np.zeros_like(arr) for name, arr in params.items()})

    def __getitem__(self, name: str) -> Array:
        return self._entries[name]

    def __setitem__(self, name: str, value: Array) -> None:
        if name in self._entries and value.shape != self._entries[name].shape:
            raise DimensionError(f"gradient shape mismatch for {name!r}")
        self._entries[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Array]]:
        return iter(self._entries.items())

    def norm(self) -> float:
        total = 0.0
        for arr in self._entries.values():
            total += float(np.sum(arr * arr))
        return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------


class Node:
    """One array value in a recorded computation.

    ``bwd(upstream)`` returns one gradient (or None) per parent;
    ``Graph.backward`` accumulates them in reverse topological order.
    """

    __slots__ = ("value", "parents", "bwd", "grad")

    def __init__(self, value: Array, parents: tuple = (), bwd=None):
        self.value = value
        self.parents = parents
        self.bwd = bwd
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def const(x) -> Node:
    """Wrap an array as a leaf constant."""
    return Node(np.asarray(x, dtype=np.float64))


def _lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    return Node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    return Node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    return Node(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def neg(a) -> Node:
    a = _lift(a)
    return Node(-a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Node:
    a = _lift(a)
    return Node(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul shapes {a.value.shape} x {b.value.shape} do not agree"
        )
    return Node(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def linear(x, weights, bias) -> Node:
    """x [batch, in] @ weights[out, in].T + bias[out], on the tape."""
    x, weights, bias = _lift(x), _lift(weights), _lift(bias)
    out = linear_forward(weights.value, bias.value, x.value)
    return Node(
        out,
        (x, weights, bias),
        lambda g: (g @ weights.value, g.T @ x.value, g.sum(axis=0)),
    )


def _sigmoid_inplace(x: Array) -> Array:
    """1 / (1 + exp(-x)) computed in place on a scratch array."""
    np.negative(x, out=x)
    np.exp(x, out=x)
    x += 1.0
    np.reciprocal(x, out=x)
    return x


def sigmoid(a) -> Node:
    a = _lift(a)
    out = _sigmoid_inplace(a.value.copy())
    return Node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Node:
    a = _lift(a)
    out = np.tanh(a.value)
    return Node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Node:
    a = _lift(a)
    mask = a.value > 0.0
    return Node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def elu(a, alpha: float = 1.0) -> Node:
    a = _lift(a)
    pos = a.value > 0.0
    out = np.where(pos, a.value, alpha * np.expm1(a.value))
    return Node(out, (a,), lambda g: (g * np.where(pos, 1.0, out + alpha),))


def absval(a) -> Node:
    a = _lift(a)
    return Node(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Node:
    a = _lift(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return Node(np.asarray(out), (a,), bwd)


def reduce_max(a, axis: int) -> Node:
    """Max along ``axis``; gradient routes to the first maximal entry."""
    a = _lift(a)
    idx = np.expand_dims(a.value.argmax(axis=axis), axis)
    out = np.take_along_axis(a.value, idx, axis=axis).squeeze(axis)

    def bwd(g):
        full = np.zeros_like(a.value)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Node(out, (a,), bwd)


def take_along(a, indices: Array, axis: int) -> Node:
    """Gather along ``axis`` with integer ``indices`` (one pick per slot)."""
    a = _lift(a)
    idx = np.asarray(indices)
    out = np.take_along_axis(a.value, idx, axis=axis)

    def bwd(g):
        full = np.zeros_like(a.value)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return Node(out, (a,), bwd)


def reshape(a, shape) -> Node:
    a = _lift(a)
    orig = a.value.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def concat(parts: Iterable, axis: int = 0) -> Node:
    nodes = [_lift(p) for p in parts]
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return Node(
        np.concatenate([n.value for n in nodes], axis=axis),
        tuple(nodes),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def gru_sequence(x_r, x_z, x_c, u_r, u_z, u_c, h0: Array, n_steps: int) -> Node:
    """Unroll a GRU over ``n_steps`` with precomputed input projections.

    ``x_*`` are nodes of shape [n_steps*rows, H] holding W_* x_t + b_* stacked
    time-major; ``u_*`` are the recurrent weight nodes [H, H]; ``h0`` is the
    constant initial hidden state [rows, H].  The node value stacks
    h_1..h_T as [n_steps*rows, H].  bwd implements the full BPTT recursion:

        r_t = sigmoid(x_r_t + h_{t-1} U_r^T)
        z_t = sigmoid(x_z_t + h_{t-1} U_z^T)
        c_t = tanh(x_c_t + (r_t * h_{t-1}) U_c^T)
        h_t = h_{t-1} + z_t * (c_t - h_{t-1})
    """
    x_r, x_z, x_c = _lift(x_r), _lift(x_z), _lift(x_c)
    u_r, u_z, u_c = _lift(u_r), _lift(u_z), _lift(u_c)
    rows, width = h0.shape
    if x_r.value.shape != (n_steps * rows, width):
        raise DimensionError(
            f"gru_sequence inputs {x_r.value.shape} do not match "
            f"{n_steps} steps of {h0.shape}"
        )

    # reset and update gates share one matmul and one sigmoid per step;
    # per-step results are written straight into the persistent stacks
    xrz = np.concatenate([x_r.value, x_z.value], axis=1).reshape(n_steps, rows, 2 * width)
    xc = x_c.value.reshape(n_steps, rows, width)
    u_rz = np.concatenate([u_r.value, u_z.value], axis=0)
    u_rz_t = np.ascontiguousarray(u_rz.T)
    uc_t = np.ascontiguousarray(u_c.value.T)

    rz_all = np.empty((n_steps, rows, 2 * width))
    c_all = np.empty((n_steps, rows, width))
    rh_all = np.empty((n_steps, rows, width))
    h_all = np.empty((n_steps, rows, width))
    h_prev = h0
    for t in range(n_steps):
        rz = np.matmul(h_prev, u_rz_t, out=rz_all[t])
        rz += xrz[t]
        _sigmoid_inplace(rz)
        rh = np.multiply(rz[:, :width], h_prev, out=rh_all[t])
        c = np.matmul(rh, uc_t, out=c_all[t])
        c += xc[t]
        np.tanh(c, out=c)
        h = np.subtract(c, h_prev, out=h_all[t])
        h *= rz[:, width:]
        h += h_prev
        h_prev = h
    del h_prev

    def bwd(g):
        g = g.reshape(n_steps, rows, width)
        gxr = np.empty((n_steps, rows, width))
        gxz = np.empty((n_steps, rows, width))
        gxc = np.empty((n_steps, rows, width))
        gu_rz = np.zeros_like(u_rz)
        guc = np.zeros_like(u_c.value)
        gpre_rz = np.empty((rows, 2 * width))
        scratch_w = np.empty_like(guc)
        scratch_w2 = np.empty_like(gu_rz)
        grh = np.empty((rows, width))
        gh = np.zeros((rows, width))
        for t in range(n_steps - 1, -1, -1):
            gh += g[t]
            h_prev = h0 if t == 0 else h_all[t - 1]
            rz, c, rh = rz_all[t], c_all[t], rh_all[t]
            r, z = rz[:, :width], rz[:, width:]
            # gpre_c = gh * z * (1 - c^2), stored into gxc[t]
            gpre_c = np.multiply(gh, z, out=gxc[t])
            gpre_c *= 1.0 - c * c
            guc += np.matmul(gpre_c.T, rh, out=scratch_w)
            np.matmul(gpre_c, u_c.value, out=grh)
            # gpre_r = grh * h_prev * r * (1 - r); gpre_z = gh*(c-h_prev) * z*(1-z)
            gpr = np.multiply(grh, h_prev, out=gpre_rz[:, :width])
            gpr *= r
            gpr *= 1.0 - r
            gpz = np.subtract(c, h_prev, out=gpre_rz[:, width:])
            gpz *= gh
            gpz *= z
            gpz *= 1.0 - z
            gxr[t] = gpr
            gxz[t] = gpz
            gu_rz += np.matmul(gpre_rz.T, h_prev, out=scratch_w2)
            # gh_prev = gh * (1 - z) + grh * r + gpre_rz @ u_rz
            gh *= 1.0 - z
            grh *= r
            gh += grh
            gh += np.matmul(gpre_rz, u_rz, out=grh)
        flat = (n_steps * rows, width)
        return (
            gxr.reshape(flat),
            gxz.reshape(flat),
            gxc.reshape(flat),
            gu_rz[:width].copy(),
            gu_rz[width:].copy(),
            guc,
        )

    return Node(
        h_all.reshape(n_steps * rows, width),
        (x_r, x_z, x_c, u_r, u_z, u_c),
        bwd,
    )


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    return order


class Graph:
    """One recorded forward pass over one or more ParamStores.

    Parameter leaves are created lazily by ``leaf`` and cached, so repeated
    use of a parameter shares a single node and its gradient accumulates.
    The graph is rebuilt for every forward pass; ``backward`` may run once.
    """

    def __init__(self):
        self._leaves: dict[tuple[int, str], Node] = {}
        self._spent = False

    def leaf(self, params: ParamStore, name: str) -> Node:
        key = (id(params), name)
        node = self._leaves.get(key)
        if node is None:
            node = Node(params[name])
            self._leaves[key] = node
        return node

    def backward(self, loss: Node) -> None:
        if self._spent:
            raise StateError("backward already ran on this graph")
        if not self._leaves and not loss.parents:
            raise StateError("backward without a recorded forward pass")
        if loss.value.size != 1:
            raise DimensionError(
                f"loss must be scalar, got shape {loss.value.shape}"
            )
        self._spent = True
        loss.grad = np.ones_like(loss.value)
        # first contribution is borrowed by reference (it may alias the
        # child's grad); a second contribution allocates a fresh owned array
        owned: set[int] = set()
        for node in reversed(_topo_order(loss)):
            if node.grad is None or node.bwd is None:
                continue
            for parent, pgrad in zip(node.parents, node.bwd(node.grad)):
                if pgrad is None:
                    continue
                if parent.grad is None:
                    parent.grad = pgrad
                elif id(parent) in owned:
                    parent.grad += pgrad
                else:
                    parent.grad = parent.grad + pgrad
                    owned.add(id(parent))

    def grads(self, params: ParamStore) -> GradStore:
        """Per-name gradients; parameters that never participated get zeros."""
        out = GradStore.zeros_like(params)
        for name in params.names():
            node = self._leaves.get((id(params), name))
            if node is not None and node.grad is not None:
                out[name] = node.grad
        return out


# ---------------------------------------------------------------------------
# Layer primitives (plain-numpy evaluation path)
# ---------------------------------------------------------------------------


def linear_forward(weights: Array, bias: Array, inputs: Array) -> Array:
    """inputs [batch, in] -> inputs @ weights.T + bias, weights [out, in]."""
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    if (
        weights.ndim != 2
        or bias.shape != (weights.shape[0],)
        or inputs.ndim != 2
        or inputs.shape[1] != weights.shape[1]
    ):
        raise DimensionError(
            f"linear_forward shapes weights={weights.shape} bias={bias.shape} "
            f"inputs={inputs.shape} do not agree"
        )
    return inputs @ weights.T + bias


def gru_cell_forward(params: Mapping[str, Array], inputs: Array, hidden: Array) -> Array:
    """One gated recurrent update; ``params`` holds the keys in GRU_KEYS."""
    inputs = np.asarray(inputs, dtype=np.float64)
    hidden = np.asarray(hidden, dtype=np.float64)
    w_r, u_r, b_r = params["w_r"], params["u_r"], params["b_r"]
    w_z, u_z, b_z = params["w_z"], params["u_z"], params["b_z"]
    w_c, u_c, b_c = params["w_c"], params["u_c"], params["b_c"]
    width = u_r.shape[0]
    if hidden.ndim != 2 or hidden.shape[1] != width or inputs.shape[0] != hidden.shape[0]:
        raise DimensionError(
            f"gru_cell_forward shapes inputs={inputs.shape} hidden={hidden.shape} "
            f"width={width} do not agree"
        )
    r = _sigmoid_inplace(inputs @ w_r.T + hidden @ u_r.T + b_r)
    z = _sigmoid_inplace(inputs @ w_z.T + hidden @ u_z.T + b_z)
    c = np.tanh(inputs @ w_c.T + (r * hidden) @ u_c.T + b_c)
    return (1.0 - z) * hidden + z * c


# ---------------------------------------------------------------------------
# Parameter initialization and updates
# ---------------------------------------------------------------------------


def init_params(shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator) -> ParamStore:
    """Matrices uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], vectors zero.

    fan_in is the last extent.  Draw order is the mapping's iteration order,
    so the result is a pure function of (shapes, generator state).
    """
    store = ParamStore()
    for name, shape in shapes.items():
        store.add(name, _draw_entry(shape, rng))
    return store


def _draw_entry(shape: tuple[int, ...], rng: np.random.Generator) -> Array:
    if len(shape) >= 2:
        bound = 1.0 / np.sqrt(shape[-1])
        return rng.uniform(-bound, bound, size=shape)
    return np.zeros(shape)


def reset_selected(
    params: ParamStore,
    selector: Callable[[str], bool] | str,
    rng: np.random.Generator,
) -> ParamStore:
    """Re-draw entries whose name matches; all other entries are untouched.

    A string selector matches as a name prefix.  Matched entries are redrawn
    in store order by the init_params rules, so selecting everything is
    distributionally identical to a fresh init with the same generator.
    """
    if isinstance(selector, str):
        prefix = selector
        selector = lambda name: name.startswith(prefix)  # noqa: E731
    for name, arr in params.items():
        if selector(name):
            params[name] = _draw_entry(arr.shape, rng)
    params.version += 1
    return params


def sgd_step(params: ParamStore, grads: GradStore, rate: float) -> ParamStore:
    """In-place p <- p - rate * g for every entry; bumps the version."""
    for name, arr in params.items():
        grad = grads[name]
        if grad.shape != arr.shape:
            raise DimensionError(f"gradient shape mismatch for {name!r}")
        arr -= rate * grad
    params.version += 1
    return params


def ema_update(target: ParamStore, online: ParamStore, eta: float) -> ParamStore:
    """In-place t <- (1 - eta) * t + eta * o; requires 0 < eta < 1.

    Computed as t += eta * (o - t), which keeps t = o an exact fixed point.
    """
    if not 0.0 < eta < 1.0:
        raise ConfigError(f"eta must lie in (0, 1), got {eta}")
    if not target.congruent(online):
        raise DimensionError("target and online stores are not congruent")
    for name, arr in target.items():
        arr += eta * (online[name] - arr)
    target.version += 1
    return target


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_gradient(
    f: Callable[[ParamStore], float],
    params: ParamStore,
    step: float = 1e-5,
) -> GradStore:
    """Central-difference estimate of df/dp for every scalar component.

    ``f`` must be deterministic; parameters are perturbed in place and
    restored exactly.  A non-finite f value raises NumericError.
    """
    if step <= 0.0:
        raise ContractError("step must be positive")
    grads = GradStore.zeros_like(params)
    for name, arr in params.items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            f_plus = float(f(params))
            flat[i] = saved - step
            f_minus = float(f(params))
            flat[i] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"f not finite near parameter {name!r}[{i}]")
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grads
