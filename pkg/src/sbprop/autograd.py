"""Tape-based reverse-mode differentiation with exact activation accounting.

Execution is eager (define-by-run): ``Tape.record`` computes the op's value
immediately and appends a node.  Each node carries a cache policy that states
what the training plan retains for the backward pass:

* ``FULL``      -- the node's output is kept; charged at its element count.
* ``NONE``      -- nothing kept, nothing charged.  Backward recomputes the
                   value on demand if some vector-Jacobian product needs it.
* ``RECOMPUTE`` -- like ``NONE`` but declared intent: the value is always
                   rebuilt from its inputs during backward.
* ``Sampled``   -- only the given index rows along one axis are kept; charged
                   at the sampled fraction of the full element count.

The accountant counts elements, not bytes, and counts activations only
(parameter leaves are never charged).  ``OpCounter`` uses the convention:
one multiply-accumulate is one op, per-element ops count one per output
element, and the backward counter covers gradient *propagation* through the
activation graph; products that only form parameter gradients are tallied
separately in ``param_grad_elementary_ops`` (this keeps forward and backward
counts balanced, which the time-ratio model assumes).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import ConfigError, ContractError, ShapeError, StateError

__all__ = [
    "FULL",
    "NONE",
    "RECOMPUTE",
    "Sampled",
    "MemoryStats",
    "OpCounter",
    "Tape",
    "TapeNode",
    "backward",
    "backward_from",
    "masked_backward",
    "checkpoint_region",
    "finite_difference_grad",
]


# ---------------------------------------------------------------------------
# cache policies


class _Policy:
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self) -> str:
        return self.name


FULL = _Policy("FULL")
NONE = _Policy("NONE")
RECOMPUTE = _Policy("RECOMPUTE")


@dataclass(frozen=True)
class Sampled:
    """Keep only ``kept`` rows along ``axis``; charge the matching fraction."""

    kept: tuple[int, ...]
    axis: int


def _charge_for(policy, value: np.ndarray) -> int:
    if policy is FULL:
        return int(value.size)
    if policy is NONE or policy is RECOMPUTE:
        return 0
    if isinstance(policy, Sampled):
        n = value.shape[policy.axis]
        return int(value.size // n) * len(policy.kept)
    raise ConfigError(f"unknown cache policy: {policy!r}")


# ---------------------------------------------------------------------------
# instrumentation


@dataclass
class MemoryStats:
    """Cached-activation element counts, total and per layer label."""

    cached_elements_total: int = 0
    cached_elements_per_layer: dict[str, int] = field(default_factory=dict)

    def add(self, layer: str, elements: int) -> None:
        if elements == 0:
            return
        self.cached_elements_total += int(elements)
        self.cached_elements_per_layer[layer] = (
            self.cached_elements_per_layer.get(layer, 0) + int(elements)
        )

    def subtotal(self, prefix: str) -> int:
        return sum(v for k, v in self.cached_elements_per_layer.items() if k.startswith(prefix))


@dataclass
class OpCounter:
    """Elementary-op tallies; additive across layers, reset per step."""

    forward_elementary_ops: int = 0
    backward_elementary_ops: int = 0
    param_grad_elementary_ops: int = 0

    def reset(self) -> None:
        self.forward_elementary_ops = 0
        self.backward_elementary_ops = 0
        self.param_grad_elementary_ops = 0

    def total(self) -> int:
        return self.forward_elementary_ops + self.backward_elementary_ops


# ---------------------------------------------------------------------------
# elementary ops


def _unbroadcast_lead(g: np.ndarray, target_shape: tuple[int, ...]) -> np.ndarray:
    """Sum leading axes of g until it matches target_shape."""
    while g.ndim > len(target_shape):
        g = g.sum(axis=0)
    return np.ascontiguousarray(g)


class Op:
    """One differentiable elementary operation."""

    name = "op"
    needs_inputs = True
    needs_output = False

    def forward(self, values: list[np.ndarray], attrs: dict) -> np.ndarray:
        raise NotImplementedError

    def vjp(
        self,
        dy: np.ndarray,
        values: list[np.ndarray] | None,
        output: np.ndarray | None,
        attrs: dict,
        input_shapes: list[tuple[int, ...]],
    ) -> list[np.ndarray | None]:
        raise NotImplementedError

    def flops_forward(self, values, output, attrs) -> int:
        return int(output.size)

    def flops_vjp(self, i: int, input_shapes, output_shape, attrs) -> int:
        return int(np.prod(output_shape))


class _MatMul(Op):
    name = "matmul"

    def forward(self, values, attrs):
        a, b = values
        if a.shape[-1] != (b.shape[-1] if attrs.get("transpose_b") else b.shape[-2]):
            raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
        return backend.matmul(a, b, bool(attrs.get("transpose_b", False)))

    def vjp(self, dy, values, output, attrs, input_shapes):
        a, b = values
        if attrs.get("transpose_b", False):
            da = backend.matmul(dy, b)
            db = backend.matmul(np.ascontiguousarray(np.swapaxes(dy, -1, -2)), a)
        else:
            da = backend.matmul(dy, b, transpose_b=True)
            db = backend.matmul(np.ascontiguousarray(np.swapaxes(a, -1, -2)), dy)
        return [
            _unbroadcast_lead(da, input_shapes[0]),
            _unbroadcast_lead(db, input_shapes[1]),
        ]

    def _macs(self, a_shape, b_shape, out_shape, attrs):
        k = a_shape[-1]
        lead = int(np.prod(out_shape[:-2])) if len(out_shape) > 2 else 1
        return lead * out_shape[-2] * k * out_shape[-1]

    def flops_forward(self, values, output, attrs):
        return self._macs(values[0].shape, values[1].shape, output.shape, attrs)

    def flops_vjp(self, i, input_shapes, output_shape, attrs):
        return self._macs(input_shapes[0], input_shapes[1], output_shape, attrs)


class _Add(Op):
    name = "add"

    def forward(self, values, attrs):
        return backend.add(values[0], values[1])

    needs_inputs = False

    def vjp(self, dy, values, output, attrs, input_shapes):
        return [dy, dy]

    def flops_vjp(self, i, input_shapes, output_shape, attrs):
        return 0


class _AddBias(Op):
    """x + b where b has the shape of x's last axis."""

    name = "add_bias"
    needs_inputs = False

    def forward(self, values, attrs):
        x, b = values
        return x + b

    def vjp(self, dy, values, output, attrs, input_shapes):
        return [dy, _unbroadcast_lead(dy, input_shapes[1])]

    def flops_vjp(self, i, input_shapes, output_shape, attrs):
        return 0


class _AddRows(Op):
    """x[..., n, c] + p[n, c], broadcast over leading axes."""

    name = "add_rows"
    needs_inputs = False

    def forward(self, values, attrs):
        x, p = values
        return x + p

    def vjp(self, dy, values, output, attrs, input_shapes):
        return [dy, _unbroadcast_lead(dy, input_shapes[1])]

    def flops_vjp(self, i, input_shapes, output_shape, attrs):
        return 0


class _Mul(Op):
    name = "mul"

    def forward(self, values, attrs):
        return backend.mul(values[0], values[1])

    def vjp(self, dy, values, output, attrs, input_shapes):
        a, b = values
        return [backend.mul(dy, b), backend.mul(dy, a)]


class _Scale(Op):
    name = "scale"
    needs_inputs = False

    def forward(self, values, attrs):
        return backend.scale(values[0], attrs["c"])

    def vjp(self, dy, values, output, attrs, input_shapes):
        return [backend.scale(dy, attrs["c"])]


class _Relu(Op):
    name = "relu"

    def forward(self, values, attrs):
        return backend.relu(values[0])

    def vjp(self, dy, values, output, attrs, input_shapes):
        return [backend.relu_vjp(values[0], dy)]


class _Gelu(Op):
    name = "gelu"

    def forward(self, values, attrs):
        return backend.gelu(values[0])

    def vjp(self, dy, values, output, attrs, input_shapes):
        return [backend.gelu_vjp(values[0], dy)]


class _LayerNorm(Op):
    name = "layer_norm"

    def forward(self, values, attrs):
        x, gamma, beta = values
        return backend.layer_norm(x, gamma, beta, attrs["eps"])

    def vjp(self, dy, values, output, attrs, input_shapes):
        x, gamma, _ = values
        dx, dgamma, dbeta = backend.layer_norm_vjp(x, gamma, attrs["eps"], dy)
        return [dx, dgamma, dbeta]


class _Softmax(Op):
    name = "softmax"
    needs_inputs = False
    needs_output = True

    def forward(self, values, attrs):
        return backend.softmax_lastdim(values[0])

    def vjp(self, dy, values, output, attrs, input_shapes):
        return [backend.softmax_vjp(output, dy)]


class _AddCausalMask(Op):
    """Additive upper-triangular -inf-like mask on the last two axes."""

    name = "add_causal_mask"
    needs_inputs = False

    def forward(self, values, attrs):
        n = values[0].shape[-1]
        mask = np.triu(np.full((n, n), -1e30), k=1)
        return values[0] + mask

    def vjp(self, dy, values, output, attrs, input_shapes):
        return [dy]

    def flops_vjp(self, i, input_shapes, output_shape, attrs):
        return 0


class _GatherTokens(Op):
    """Select rows along an axis; the memory op behind masks and dropout."""

    name = "gather_tokens"
    needs_inputs = False

    def forward(self, values, attrs):
        return np.ascontiguousarray(np.take(values[0], attrs["idx"], axis=attrs["axis"]))

    def vjp(self, dy, values, output, attrs, input_shapes):
        dx = np.zeros(input_shapes[0])
        sl: list = [slice(None)] * len(input_shapes[0])
        sl[attrs["axis"]] = list(attrs["idx"])
        dx[tuple(sl)] = dy
        return [dx]

    def flops_forward(self, values, output, attrs):
        return 0

    def flops_vjp(self, i, input_shapes, output_shape, attrs):
        return 0


class _SelectToken(Op):
    """x[:, i, :] for x of shape (B, n, F)."""

    name = "select_token"
    needs_inputs = False

    def forward(self, values, attrs):
        return np.ascontiguousarray(values[0][:, attrs["i"], :])

    def vjp(self, dy, values, output, attrs, input_shapes):
        dx = np.zeros(input_shapes[0])
        dx[:, attrs["i"], :] = dy
        return [dx]

    def flops_forward(self, values, output, attrs):
        return 0

    def flops_vjp(self, i, input_shapes, output_shape, attrs):
        return 0


class _StackTokens(Op):
    """Stack k arrays of shape (B, F) into (B, k, F)."""

    name = "stack_tokens"
    needs_inputs = False

    def forward(self, values, attrs):
        return np.ascontiguousarray(np.stack(values, axis=1))

    def vjp(self, dy, values, output, attrs, input_shapes):
        return [np.ascontiguousarray(dy[:, j, :]) for j in range(len(input_shapes))]

    def flops_forward(self, values, output, attrs):
        return 0

    def flops_vjp(self, i, input_shapes, output_shape, attrs):
        return 0


class _SplitHeads(Op):
    """(B, n, h*d) -> (B, h, n, d)."""

    name = "split_heads"
    needs_inputs = False

    def forward(self, values, attrs):
        x = values[0]
        b, n, c = x.shape
        h = attrs["h"]
        return np.ascontiguousarray(x.reshape(b, n, h, c // h).transpose(0, 2, 1, 3))

    def vjp(self, dy, values, output, attrs, input_shapes):
        b, n, c = input_shapes[0]
        return [np.ascontiguousarray(dy.transpose(0, 2, 1, 3).reshape(b, n, c))]

    def flops_forward(self, values, output, attrs):
        return 0

    def flops_vjp(self, i, input_shapes, output_shape, attrs):
        return 0


class _MergeHeads(Op):
    """(B, h, n, d) -> (B, n, h*d)."""

    name = "merge_heads"
    needs_inputs = False

    def forward(self, values, attrs):
        x = values[0]
        b, h, n, d = x.shape
        return np.ascontiguousarray(x.transpose(0, 2, 1, 3).reshape(b, n, h * d))

    def vjp(self, dy, values, output, attrs, input_shapes):
        b, h, n, d = input_shapes[0]
        return [np.ascontiguousarray(dy.reshape(b, n, h, d).transpose(0, 2, 1, 3))]

    def flops_forward(self, values, output, attrs):
        return 0

    def flops_vjp(self, i, input_shapes, output_shape, attrs):
        return 0


class _MeanTokens(Op):
    """(B, n, c) -> (B, c), mean over the token axis."""

    name = "mean_tokens"
    needs_inputs = False

    def forward(self, values, attrs):
        return np.ascontiguousarray(values[0].mean(axis=1))

    def vjp(self, dy, values, output, attrs, input_shapes):
        b, n, c = input_shapes[0]
        return [np.ascontiguousarray(np.repeat(dy[:, None, :] / n, n, axis=1))]

    def flops_forward(self, values, output, attrs):
        return int(np.prod(values[0].shape))

    def flops_vjp(self, i, input_shapes, output_shape, attrs):
        return int(np.prod(input_shapes[0]))


class _SumAll(Op):
    name = "sum_all"
    needs_inputs = False

    def forward(self, values, attrs):
        return np.array([values[0].sum()])

    def vjp(self, dy, values, output, attrs, input_shapes):
        return [np.full(input_shapes[0], dy[0])]

    def flops_forward(self, values, output, attrs):
        return int(np.prod(values[0].shape))

    def flops_vjp(self, i, input_shapes, output_shape, attrs):
        return 0


class _CrossEntropy(Op):
    """Mean NLL of logits (B, K) against integer labels (attr)."""

    name = "cross_entropy"

    def forward(self, values, attrs):
        logits = values[0]
        labels = attrs["labels"]
        m = logits.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
        nll = lse - logits[np.arange(len(labels)), labels]
        return np.array([nll.mean()])

    def vjp(self, dy, values, output, attrs, input_shapes):
        logits = values[0]
        labels = attrs["labels"]
        p = backend.softmax_lastdim(logits)
        p[np.arange(len(labels)), labels] -= 1.0
        return [p * (dy[0] / len(labels))]

    def flops_forward(self, values, output, attrs):
        return int(values[0].size)

    def flops_vjp(self, i, input_shapes, output_shape, attrs):
        return int(np.prod(input_shapes[0]))


OPS: dict[str, Op] = {
    op.name: op
    for op in [
        _MatMul(),
        _Add(),
        _AddBias(),
        _AddRows(),
        _Mul(),
        _Scale(),
        _Relu(),
        _Gelu(),
        _LayerNorm(),
        _Softmax(),
        _AddCausalMask(),
        _GatherTokens(),
        _SelectToken(),
        _StackTokens(),
        _SplitHeads(),
        _MergeHeads(),
        _MeanTokens(),
        _SumAll(),
        _CrossEntropy(),
    ]
}

DIFFERENTIABLE_OPS = [
    "matmul",
    "add",
    "add_bias",
    "add_rows",
    "mul",
    "scale",
    "relu",
    "gelu",
    "layer_norm",
    "softmax",
    "add_causal_mask",
    "gather_tokens",
    "select_token",
    "stack_tokens",
    "split_heads",
    "merge_heads",
    "mean_tokens",
    "sum_all",
    "cross_entropy",
]


# ---------------------------------------------------------------------------
# tape


class TapeNode:
    __slots__ = (
        "idx",
        "op",
        "attrs",
        "inputs",
        "value",
        "retained",
        "shape",
        "cache",
        "requires_grad",
        "kind",
        "layer",
        "name",
        "composite",
    )

    def __init__(self, idx, op, attrs, inputs, value, cache, requires_grad, kind, layer, name):
        self.idx = idx
        self.op = op  # op name for recorded ops, None for leaves/composites
        self.attrs = attrs
        self.inputs = inputs
        self.value = value
        self.retained = None
        self.shape = value.shape
        self.cache = cache
        self.requires_grad = requires_grad
        self.kind = kind  # "op" | "param" | "data" | "composite"
        self.layer = layer
        self.name = name
        self.composite = None

    @property
    def is_leaf(self) -> bool:
        return self.kind in ("param", "data")

    def __repr__(self) -> str:
        tag = self.op or self.kind
        return f"<node {self.idx} {tag} {self.shape} cache={self.cache!r}>"


class Tape:
    """Ordered record of one forward pass; single-owner during a step.

    Nodes appear in topological order by construction.  Charging and op
    counting can be disabled (evaluation passes) or redirected to shared
    counters (sub-tapes built by composite ops).
    """

    def __init__(self, *, counting: bool = True, charging: bool = True,
                 counter: OpCounter | None = None, memory: MemoryStats | None = None):
        self.nodes: list[TapeNode] = []
        self.op_counter = counter if counter is not None else OpCounter()
        self.memory = memory if memory is not None else MemoryStats()
        self.counting = counting
        self.charging = charging
        self.current_layer = "model"
        self.sealed = False

    @contextmanager
    def layer(self, name: str):
        prev = self.current_layer
        self.current_layer = name
        try:
            yield
        finally:
            self.current_layer = prev

    def _append(self, node: TapeNode) -> TapeNode:
        self.nodes.append(node)
        return node

    def leaf(self, value, *, requires_grad: bool = False, kind: str = "data",
             cache=NONE, name: str = "") -> TapeNode:
        if self.sealed:
            raise StateError("tape is sealed; start a new tape for a new step")
        arr = np.ascontiguousarray(np.asarray(value, dtype=np.float64))
        node = TapeNode(len(self.nodes), None, {}, (), arr, cache, requires_grad,
                        kind, self.current_layer, name)
        if self.charging and kind != "param":
            self.memory.add(self.current_layer, _charge_for(cache, arr))
        return self._append(node)

    def record(self, op_name: str, inputs: list[TapeNode], attrs: dict | None = None,
               *, cache=FULL, name: str = "", precomputed_value: np.ndarray | None = None
               ) -> TapeNode:
        """Compute the op eagerly and append a node.

        ``precomputed_value`` installs an already-computed output (a value
        carried over from an earlier identical evaluation) instead of
        executing the op again; the node keeps its normal gradient structure
        and no forward ops are counted.
        """
        if self.sealed:
            raise StateError("tape is sealed; start a new tape for a new step")
        op = OPS.get(op_name)
        if op is None:
            raise ConfigError(f"unknown op id: {op_name!r}")
        attrs = attrs or {}
        values = [n.value for n in inputs]
        if any(v is None for v in values):
            raise StateError("input value missing; inputs must be recorded on this tape")
        if precomputed_value is not None:
            out = precomputed_value
        else:
            out = op.forward(values, attrs)
        out = np.ascontiguousarray(np.asarray(out, dtype=np.float64))
        if self.counting and precomputed_value is None:
            self.op_counter.forward_elementary_ops += op.flops_forward(values, out, attrs)
        requires_grad = any(n.requires_grad for n in inputs)
        node = TapeNode(len(self.nodes), op_name, attrs, tuple(inputs), out, cache,
                        requires_grad, "op", self.current_layer, name)
        if self.charging:
            self.memory.add(self.current_layer, _charge_for(cache, out))
        return self._append(node)

    def record_composite(self, handler, inputs: list[TapeNode], value: np.ndarray,
                         charge_elements: int, *, requires_grad: bool, name: str = "") -> TapeNode:
        """Append a composite node whose backward is delegated to ``handler``."""
        if self.sealed:
            raise StateError("tape is sealed; start a new tape for a new step")
        node = TapeNode(len(self.nodes), None, {}, tuple(inputs),
                        np.ascontiguousarray(value), NONE, requires_grad,
                        "composite", self.current_layer, name)
        node.composite = handler
        if self.charging:
            self.memory.add(self.current_layer, int(charge_elements))
        return self._append(node)

    def charge_cached_input(self, node: TapeNode) -> None:
        """Charge a consumed activation to the current layer (input-copy rule).

        Units charge their own data input rather than their output; stacking
        units then counts every inter-unit activation exactly once.  Charging
        an input also pins its value so sealing will not drop it.
        """
        if self.charging:
            self.memory.add(self.current_layer, int(node.value.size if node.value is not None
                                                    else np.prod(node.shape)))
        self.pin(node)

    @staticmethod
    def pin(node: TapeNode) -> None:
        """Keep this node's value through sealing (no extra charge)."""
        if node.kind == "op" and (node.cache is NONE or node.cache is RECOMPUTE):
            node.cache = FULL

    def seal(self) -> None:
        """Drop values the cache policies do not retain.  Idempotent."""
        if self.sealed:
            return
        self.sealed = True
        for node in self.nodes:
            if node.is_leaf or node.kind == "composite":
                continue  # leaves are caller-owned; composites hold their own cache
            if node.cache is FULL:
                continue
            if isinstance(node.cache, Sampled):
                node.retained = np.ascontiguousarray(
                    np.take(node.value, node.cache.kept, axis=node.cache.axis))
                node.value = None
            else:  # NONE / RECOMPUTE
                node.value = None

    def validate_topology(self) -> bool:
        for node in self.nodes:
            for inp in node.inputs:
                if inp.idx >= node.idx:
                    return False
        return True


# ---------------------------------------------------------------------------
# backward passes


def _ensure_value(node: TapeNode, scratch: dict[int, np.ndarray],
                  tape: Tape) -> np.ndarray:
    """Value of a node during backward, recomputing dropped ones on demand."""
    if node.value is not None:
        return node.value
    if node.idx in scratch:
        return scratch[node.idx]
    if node.is_leaf:
        raise StateError(f"leaf {node!r} lost its value")
    if node.kind == "composite":
        raise StateError("composite outputs are not recomputable on the host tape")
    values = [_ensure_value(inp, scratch, tape) for inp in node.inputs]
    op = OPS[node.op]
    out = op.forward(values, node.attrs)
    if tape.counting:
        tape.op_counter.forward_elementary_ops += op.flops_forward(values, out, node.attrs)
    scratch[node.idx] = out
    return out


def _zero_outside(g: np.ndarray, kept, axis: int) -> np.ndarray:
    keep = np.zeros(g.shape[axis], dtype=bool)
    keep[list(kept)] = True
    out = g.copy()
    sl: list = [slice(None)] * g.ndim
    sl[axis] = ~keep
    out[tuple(sl)] = 0.0
    return out


def backward_from(tape: Tape, node: TapeNode, seed: np.ndarray, *,
                  masked: dict[int, tuple[tuple[int, ...], int]] | None = None,
                  grad_taps: dict[int, np.ndarray] | None = None
                  ) -> dict[TapeNode, np.ndarray]:
    """Reverse sweep from ``node`` seeded with ``seed``; returns leaf gradients.

    ``masked`` maps node index -> (kept_indices, axis): when such a node's
    accumulated gradient is popped, rows outside the kept set are zeroed
    before its vector-Jacobian product runs.  Registering every masked
    layer's output *and* the bottom layer's input reproduces the
    partial-gradient semantics of sampled backpropagation on a dense tape.

    ``grad_taps``, if given, receives a copy of the accumulated output
    gradient of the listed node indices (captured before mask zeroing).
    """
    tape.seal()
    grads: dict[int, np.ndarray] = {node.idx: np.ascontiguousarray(seed, dtype=np.float64)}
    result: dict[TapeNode, np.ndarray] = {}
    scratch: dict[int, np.ndarray] = {}

    for nd in reversed(tape.nodes):
        g = grads.pop(nd.idx, None)
        if g is None:
            continue
        if grad_taps is not None and nd.idx in grad_taps:
            grad_taps[nd.idx] = g.copy()
        if masked and nd.idx in masked:
            kept, axis = masked[nd.idx]
            g = _zero_outside(g, kept, axis)
        if nd.is_leaf:
            if nd.requires_grad:
                if g.shape != nd.shape:
                    raise ContractError(f"gradient shape {g.shape} != value shape {nd.shape}")
                result[nd] = g
            continue
        if nd.composite is not None:
            for inp, gi in nd.composite.backward(g, nd, tape).items():
                if not inp.requires_grad:
                    continue
                if inp.idx in grads:
                    grads[inp.idx] = grads[inp.idx] + gi
                else:
                    grads[inp.idx] = gi
            continue

        op = OPS[nd.op]
        values = None
        if op.needs_inputs:
            values = [_ensure_value(inp, scratch, tape) for inp in nd.inputs]
        output = _ensure_value(nd, scratch, tape) if op.needs_output else None
        input_shapes = [inp.shape for inp in nd.inputs]
        in_grads = op.vjp(g, values, output, nd.attrs, input_shapes)
        for i, (inp, gi) in enumerate(zip(nd.inputs, in_grads)):
            if gi is None or not inp.requires_grad:
                continue
            if tape.counting:
                n_ops = op.flops_vjp(i, input_shapes, nd.shape, nd.attrs)
                if inp.kind == "param":
                    tape.op_counter.param_grad_elementary_ops += n_ops
                else:
                    tape.op_counter.backward_elementary_ops += n_ops
            if gi.shape != inp.shape:
                raise ContractError(
                    f"vjp of {nd.op} produced shape {gi.shape} for input of shape {inp.shape}")
            if inp.idx in grads:
                grads[inp.idx] = grads[inp.idx] + gi
            else:
                grads[inp.idx] = np.ascontiguousarray(gi, dtype=np.float64)

    return result


def backward(tape: Tape, loss_node: TapeNode,
             masked: dict[int, tuple[tuple[int, ...], int]] | None = None,
             grad_taps: dict[int, np.ndarray] | None = None
             ) -> dict[TapeNode, np.ndarray]:
    """Gradients of a scalar loss for every leaf that requires them.

    Leaves that receive no gradient flow (e.g. below an empty mask) map to
    zeros, so the result always has one same-shaped entry per trainable leaf.
    """
    if int(np.prod(loss_node.shape)) != 1:
        raise ContractError(f"loss must be scalar, got shape {loss_node.shape}")
    seed = np.ones(loss_node.shape)
    result = backward_from(tape, loss_node, seed, masked=masked, grad_taps=grad_taps)
    for nd in tape.nodes:
        if nd.is_leaf and nd.requires_grad and nd not in result:
            result[nd] = np.zeros(nd.shape)
    return result


def masked_backward(tape: Tape, loss_node: TapeNode, kept_indices,
                    boundaries: list[tuple[TapeNode, int]]) -> dict[TapeNode, np.ndarray]:
    """Dense backward with inter-layer gradients zeroed at unsampled positions.

    ``boundaries`` lists (node, token_axis) pairs: each masked layer's output
    and the bottom masked layer's input.  This is the reference semantics the
    sampled-backprop wrapper must reproduce.
    """
    kept = tuple(int(i) for i in kept_indices)
    masked: dict[int, tuple[tuple[int, ...], int]] = {}
    for node, axis in boundaries:
        n = node.shape[axis]
        if any(i < 0 or i >= n for i in kept):
            raise IndexError(f"mask indices out of range for axis of size {n}")
        masked[node.idx] = (kept, axis)
    return backward(tape, loss_node, masked=masked)


# ---------------------------------------------------------------------------
# gradient checkpointing


class _CheckpointHandler:
    def __init__(self, fn, main_inputs: list[TapeNode]):
        self.fn = fn
        self.main_inputs = main_inputs

    def backward(self, g: np.ndarray, node: TapeNode, tape: Tape) -> dict[TapeNode, np.ndarray]:
        sub = Tape(counting=tape.counting, charging=False,
                   counter=tape.op_counter, memory=tape.memory)
        sub.current_layer = node.layer
        leaves = [
            sub.leaf(inp.value,
                     requires_grad=inp.requires_grad,
                     kind="param" if inp.kind == "param" else "data")
            for inp in self.main_inputs
        ]
        out = self.fn(sub, leaves)
        grads = backward_from(sub, out, g)
        remap: dict[TapeNode, np.ndarray] = {}
        for leaf, main in zip(leaves, self.main_inputs):
            if leaf in grads:
                remap[main] = grads[leaf]
        return remap


def checkpoint_region(tape: Tape, fn, data_inputs: list[TapeNode],
                      param_inputs: list[TapeNode] | None = None, *,
                      name: str = "checkpoint") -> TapeNode:
    """Record ``fn`` as a recompute region: cache only its data inputs.

    ``fn(subtape, leaves) -> node`` must be a pure function of its leaves; it
    is re-executed during backward, so the region charges only its data-input
    elements.  Gradients are identical to recording ``fn`` directly.
    """
    params = param_inputs or []
    all_inputs = list(data_inputs) + list(params)

    for inp in data_inputs:
        Tape.pin(inp)

    sub = Tape(counting=tape.counting, charging=False,
               counter=tape.op_counter, memory=tape.memory)
    sub.current_layer = tape.current_layer
    leaves = [sub.leaf(inp.value, requires_grad=inp.requires_grad,
                       kind="param" if inp.kind == "param" else "data")
              for inp in all_inputs]
    out_node = fn(sub, leaves)

    charge = sum(int(inp.value.size) for inp in data_inputs)
    node = tape.record_composite(
        _CheckpointHandler(fn, all_inputs), all_inputs, out_node.value, charge,
        requires_grad=any(i.requires_grad for i in all_inputs), name=name)
    return node


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_grad(f, x, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar-valued f at x, per coordinate."""
    if eps <= 0:
        raise ConfigError("finite-difference step must be positive")
    base = np.array(getattr(x, "array", x), dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(base))
        flat[i] = orig - eps
        fm = float(f(base))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
