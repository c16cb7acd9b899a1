"""Sampled backward passes: node samplers and the wrapped-op machinery.

A wrapped op keeps its forward exact (computed on all nodes, nothing taped)
and caches only what its backward needs: the sampled rows of its input, or
the full input for ops whose sampled-row gradients read every input row
(attention keys/values).  Backward restricts the upstream gradient to the
sampled rows, re-executes the op under recording on the cached inputs,
and scatters the resulting input gradient into zeros at the sampled
positions.

The re-execution records onto a sub-tape whose charges land in the host
accountant; together with the cached-input charge this reproduces the
per-layer gradient-calculation memory of the cost model in
``sbprop.analysis``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import NONE, MemoryStats, Tape, TapeNode, backward_from
from .errors import ConfigError, ShapeError, StateError

__all__ = [
    "SampleMask",
    "SbpConfig",
    "mask_size",
    "sample_uniform",
    "sample_diverse_feature",
    "sample_diverse_grad",
    "sample_checkerboard3d",
    "SbpUnit",
    "SquareUnit",
    "SbpWrapped",
    "sbp_wrap",
    "wrap_on_tape",
]

SAMPLERS = ("uniform_random", "diverse_feature", "diverse_grad", "checkerboard3d")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def mask_size(n: int, r: float) -> int:
    """Number of kept nodes: round-half-up of r*n, clamped to [1, n]."""
    if r <= 0.0 or r > 1.0:
        raise ConfigError(f"keep-ratio must be in (0, 1], got {r}")
    if n < 1:
        raise ConfigError(f"node count must be >= 1, got {n}")
    return max(1, min(n, _round_half_up(r * n)))


@dataclass(frozen=True)
class SampleMask:
    """Kept node indices for one training step, shared across wrapped layers."""

    kept: tuple[int, ...]
    total: int
    axis_kind: str = "temporal"  # or "spatiotemporal"
    grid: tuple[int, int, int] | None = None

    def __post_init__(self):
        kept = tuple(sorted(int(i) for i in self.kept))
        object.__setattr__(self, "kept", kept)
        if len(set(kept)) != len(kept):
            raise ConfigError("mask indices must be unique")
        if kept and (kept[0] < 0 or kept[-1] >= self.total):
            raise IndexError(f"mask indices out of range [0, {self.total})")

    def __len__(self) -> int:
        return len(self.kept)

    @property
    def fraction(self) -> float:
        return len(self.kept) / self.total

    def bool_mask(self) -> np.ndarray:
        out = np.zeros(self.total, dtype=bool)
        out[list(self.kept)] = True
        return out

    @classmethod
    def all(cls, total: int) -> "SampleMask":
        return cls(tuple(range(total)), total)


@dataclass
class SbpConfig:
    """Sampled-backprop settings for one experiment.

    ``boundary`` counts wrapped layers from the bottom (0 = nothing wrapped;
    None lets the model pick its default).  One keep-ratio applies to every
    wrapped layer; the per-layer-independent mask variant exists for study
    via ``share_mask_across_layers=False`` but is not the default.
    """

    keep_ratio: float = 0.25
    sampler: str = "uniform_random"
    boundary: int | None = None
    resample_each_step: bool = True
    share_mask_across_layers: bool = True
    grid: tuple[int, int, int] | None = None

    def validate(self) -> None:
        if not (0.0 < self.keep_ratio <= 1.0):
            raise ConfigError(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.sampler!r}; choose from {SAMPLERS}")
        if self.boundary is not None and self.boundary < 0:
            raise ConfigError("boundary must be >= 0")


# ---------------------------------------------------------------------------
# samplers


def _chunk_bounds(n: int, k: int) -> list[int]:
    # k near-equal consecutive chunks; exact size 1/r when r*n and 1/r are integral
    return [_round_half_up(i * n / k) for i in range(k + 1)]


def sample_uniform(n: int, r: float, rng) -> SampleMask:
    """One node drawn uniformly from each of k consecutive chunks."""
    k = mask_size(n, r)
    bounds = _chunk_bounds(n, k)
    kept = [int(rng.integers(bounds[i], bounds[i + 1])) for i in range(k)]
    return SampleMask(tuple(kept), n)


def _sorted_chunk_sample(order: np.ndarray, r: float, rng) -> SampleMask:
    n = len(order)
    k = mask_size(n, r)
    bounds = _chunk_bounds(n, k)
    positions = [int(rng.integers(bounds[i], bounds[i + 1])) for i in range(k)]
    return SampleMask(tuple(int(order[p]) for p in positions), n)


def sample_diverse_feature(features: np.ndarray, r: float, rng) -> SampleMask:
    """Sort nodes by feature L2 norm (stable, ties by index), then chunk-sample."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        norms = np.abs(feats)
    elif feats.ndim == 2:
        norms = np.sqrt((feats * feats).sum(axis=1))
    else:
        raise ShapeError(f"features must be (n,) or (n, c), got {feats.shape}")
    order = np.argsort(norms, kind="stable")
    return _sorted_chunk_sample(order, r, rng)


def sample_diverse_grad(grad_magnitudes: np.ndarray, r: float, rng) -> SampleMask:
    """Same sorted-chunk procedure keyed on per-node gradient magnitude."""
    mags = np.asarray(grad_magnitudes, dtype=np.float64)
    if mags.ndim != 1:
        raise ShapeError(f"gradient magnitudes must be 1-D, got {mags.shape}")
    order = np.argsort(mags, kind="stable")
    return _sorted_chunk_sample(order, r, rng)


_CHECKERBOARD_RATIOS = (0.5, 0.25, 0.125)


def sample_checkerboard3d(dims: tuple[int, int, int], r: float) -> SampleMask:
    """Deterministic parity pattern over a (T, H, W) cell grid.

    r=1/2 keeps cells with even t+h+w; r=1/4 additionally requires even t;
    r=1/8 additionally requires even h.  Exact on even-sized grids; on odd
    grids the selection is trimmed/padded in flat row-major order to hit the
    clamped cardinality (so (1,1,1) keeps {0}).
    """
    if r not in _CHECKERBOARD_RATIOS:
        raise ConfigError(
            f"checkerboard3d supports keep-ratios {_CHECKERBOARD_RATIOS}, got {r}")
    t_dim, h_dim, w_dim = dims
    n = t_dim * h_dim * w_dim
    target = mask_size(n, r)

    kept = []
    flat = 0
    for t in range(t_dim):
        for h in range(h_dim):
            for w in range(w_dim):
                ok = (t + h + w) % 2 == 0
                if r <= 0.25:
                    ok = ok and t % 2 == 0
                if r <= 0.125:
                    ok = ok and h % 2 == 0
                if ok:
                    kept.append(flat)
                flat += 1

    if len(kept) > target:
        kept = kept[:target]
    elif len(kept) < target:
        pool = sorted(set(range(n)) - set(kept))
        kept.extend(pool[: target - len(kept)])
        kept.sort()
    return SampleMask(tuple(kept), n, axis_kind="spatiotemporal", grid=dims)


# ---------------------------------------------------------------------------
# wrapped ops


class SbpUnit:
    """A wrappable op: one layer whose output rows lie along a node axis.

    ``run`` records the computation on a tape.  With ``mask=None`` it is the
    plain layer (declaring the documented cache policies and charging its
    data input).  With a mask it is the backward re-execution path: output
    restricted to the sampled rows, interior activations charged at their
    re-materialized (sampled) sizes.  Units with
    ``cache_side_inputs_full=True`` receive the full input in masked runs and
    gather rows internally; others receive the pre-sliced input.

    ``side_sink``/``side_values`` carry values the wrapper retains from the
    full forward into the masked run (attention keys/values), so the masked
    run does not recompute them.
    """

    param_names: tuple[str, ...] = ()
    cache_side_inputs_full = False
    token_axis = 1  # batched layers: (B, n, c)

    def run(self, tape: Tape, x: TapeNode, params: list[TapeNode],
            mask: SampleMask | None, side_values: dict | None = None,
            side_sink: dict | None = None) -> TapeNode:
        raise NotImplementedError


class SquareUnit(SbpUnit):
    """Minimal tree unit (elementwise square) used in tests and examples."""

    token_axis = 0

    def run(self, tape, x, params, mask, side_values=None, side_sink=None):
        if mask is None:
            tape.charge_cached_input(x)
        return tape.record("mul", [x, x], cache=NONE, name="square")


def _take(arr: np.ndarray, kept, axis: int) -> np.ndarray:
    return np.ascontiguousarray(np.take(arr, list(kept), axis=axis))


def _scatter(rows: np.ndarray, kept, axis: int, full_shape) -> np.ndarray:
    out = np.zeros(full_shape)
    sl: list = [slice(None)] * len(full_shape)
    sl[axis] = list(kept)
    out[tuple(sl)] = rows
    return out


def _zero_outside(arr: np.ndarray, kept, axis: int) -> np.ndarray:
    keepb = np.zeros(arr.shape[axis], dtype=bool)
    keepb[list(kept)] = True
    out = arr.copy()
    sl: list = [slice(None)] * arr.ndim
    sl[axis] = ~keepb
    out[tuple(sl)] = 0.0
    return out


class _WrapState:
    """Cached inputs plus the recorded sampled-path sub-tape of one wrap."""

    __slots__ = ("saved_x", "mask", "x_shape", "subtape", "out_node", "x_leaf", "p_leaves")

    def __init__(self, saved_x, mask, x_shape, subtape, out_node, x_leaf, p_leaves):
        self.saved_x = saved_x
        self.mask = mask
        self.x_shape = x_shape
        self.subtape = subtape
        self.out_node = out_node
        self.x_leaf = x_leaf
        self.p_leaves = p_leaves


def _wrap_forward(unit: SbpUnit, x_value: np.ndarray, param_values: list[np.ndarray],
                  param_requires: list[bool], mask: SampleMask, *,
                  x_requires_grad: bool = True, counter=None, memory=None,
                  counting: bool = True, charging: bool = True,
                  suppress_interior_charges: bool = False,
                  layer: str = "model") -> tuple[np.ndarray, _WrapState]:
    """Run the wrapped op: exact full forward with nothing taped, then the
    sampled-path recording whose retained activations are what backward uses.

    Charges land here (cached input via the caller; interior sampled
    activations via the sub-tape policies), matching the record-time
    accounting contract.
    """
    n = x_value.shape[unit.token_axis]
    if mask.total != n:
        raise IndexError(
            f"mask covers {mask.total} nodes but the op's node axis has {n}")

    full = Tape(counting=counting, charging=False, counter=counter)
    x_full = full.leaf(x_value, requires_grad=False, kind="data")
    p_full = [full.leaf(p, requires_grad=False, kind="param") for p in param_values]
    side_sink: dict = {}
    y = unit.run(full, x_full, p_full, mask=None, side_sink=side_sink)
    side_values = {k: node.value for k, node in side_sink.items()}

    if unit.cache_side_inputs_full:
        saved = x_value
    else:
        saved = _take(x_value, mask.kept, unit.token_axis)

    sub = Tape(counting=counting, charging=charging and not suppress_interior_charges,
               counter=counter, memory=memory)
    sub.current_layer = layer
    x_leaf = sub.leaf(saved, requires_grad=x_requires_grad, kind="data")
    p_leaves = [sub.leaf(p, requires_grad=req, kind="param")
                for p, req in zip(param_values, param_requires)]
    out_node = unit.run(sub, x_leaf, p_leaves, mask=mask, side_values=side_values)
    sub.seal()  # drop everything the charge plan does not retain

    return y.value, _WrapState(saved, mask, x_value.shape, sub, out_node, x_leaf, p_leaves)


def _wrap_backward(unit: SbpUnit, state: _WrapState, dy: np.ndarray,
                   x_requires_grad: bool) -> tuple[np.ndarray | None, list[np.ndarray | None]]:
    """Restrict dy to the mask, backprop the sampled-path sub-tape (dropped
    values are recomputed from the retained set), scatter into zeros."""
    mask = state.mask
    dy_m = _take(dy, mask.kept, unit.token_axis)
    grads = backward_from(state.subtape, state.out_node, dy_m)

    dx = None
    if x_requires_grad:
        gx = grads.get(state.x_leaf)
        if gx is None:
            dx = np.zeros(state.x_shape)
        elif gx.shape == state.x_shape:
            # full input was cached (graph op): zero unsampled rows
            dx = _zero_outside(gx, mask.kept, unit.token_axis)
        else:
            # sampled input rows: scatter into zeros at the mask positions
            dx = _scatter(gx, mask.kept, unit.token_axis, state.x_shape)
    d_params = [grads.get(p) for p in state.p_leaves]
    return dx, d_params


class SbpWrapped:
    """Standalone wrapped op over raw arrays (forward once, then backward).

    ``memory`` holds the wrap's own cached-input charge; at full mask this
    equals the charge of a checkpointed op (inputs cached, intermediates
    recomputed).
    """

    def __init__(self, unit: SbpUnit, mask: SampleMask,
                 cache_side_inputs_full: bool | None = None):
        self.unit = unit
        if cache_side_inputs_full is not None and \
                cache_side_inputs_full != unit.cache_side_inputs_full:
            raise ConfigError(
                f"{type(unit).__name__} declares cache_side_inputs_full="
                f"{unit.cache_side_inputs_full}; cannot override")
        self.mask = mask
        self.memory = MemoryStats()
        self._state: _WrapState | None = None
        self._params: list[np.ndarray] = []

    def forward(self, x: np.ndarray, params: list[np.ndarray] | None = None) -> np.ndarray:
        x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
        self._params = [np.ascontiguousarray(np.asarray(p, dtype=np.float64))
                        for p in (params or [])]
        self.memory = MemoryStats()
        self.memory.add("wrap", int(x.size if self.unit.cache_side_inputs_full
                                    else len(self.mask) * x.size // x.shape[self.unit.token_axis]))
        y, state = _wrap_forward(
            self.unit, x, self._params, [True] * len(self._params), self.mask,
            memory=self.memory, layer="wrap")
        self._state = state
        return y

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, list[np.ndarray | None]]:
        if self._state is None:
            raise StateError("backward called before forward")
        dy = np.ascontiguousarray(np.asarray(dy, dtype=np.float64))
        return _wrap_backward(self.unit, self._state, dy, True)


def sbp_wrap(unit: SbpUnit, mask: SampleMask,
             cache_side_inputs_full: bool | None = None) -> SbpWrapped:
    """Wrap an op for sampled backpropagation (standalone, array-level)."""
    return SbpWrapped(unit, mask, cache_side_inputs_full)


class _SbpHandler:
    def __init__(self, unit: SbpUnit, state: _WrapState):
        self.unit = unit
        self.state = state

    def backward(self, g: np.ndarray, node: TapeNode, tape: Tape) -> dict[TapeNode, np.ndarray]:
        x_node = node.inputs[0]
        param_nodes = list(node.inputs[1:])
        dx, d_params = _wrap_backward(self.unit, self.state, g, x_node.requires_grad)
        out: dict[TapeNode, np.ndarray] = {}
        if dx is not None:
            out[x_node] = dx
        for p_node, gp in zip(param_nodes, d_params):
            if gp is not None:
                out[p_node] = gp
        return out


def wrap_on_tape(tape: Tape, unit: SbpUnit, x_node: TapeNode, params: list[TapeNode],
                 mask: SampleMask, *, suppress_interior_charges: bool = False,
                 name: str = "") -> TapeNode:
    """Record a wrapped op on a host tape.

    Forward output is identical to the unwrapped op.  The composite node
    charges its cached input (sampled rows, or the full input for
    side-input-full units); the sampled-path recording charges the
    activations it retains for gradient calculation, unless suppressed
    (checkpoint composition: every interior policy then charges the minimum
    of the two plans, i.e. nothing).
    """
    y_value, state = _wrap_forward(
        unit, x_node.value, [p.value for p in params],
        [p.requires_grad for p in params], mask,
        x_requires_grad=x_node.requires_grad,
        counter=tape.op_counter, memory=tape.memory,
        counting=tape.counting, charging=tape.charging,
        suppress_interior_charges=suppress_interior_charges,
        layer=tape.current_layer)
    charge = int(np.asarray(state.saved_x).size)
    node = tape.record_composite(
        _SbpHandler(unit, state),
        [x_node] + list(params), y_value, charge,
        requires_grad=x_node.requires_grad or any(p.requires_grad for p in params),
        name=name or f"sbp[{type(unit).__name__}]")
    return node
