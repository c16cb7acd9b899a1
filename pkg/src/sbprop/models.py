"""Desk-scale model families: a mini video transformer and a chunked
spatial-then-temporal classifier.

Both are assembled from wrappable units (``sbprop.sbp.SbpUnit``) so that one
forward builder serves four training plans: plain end-to-end, sampled
backward, checkpointed, and sampled+checkpointed.

Activation-charge convention (fixed; the audits assert it exactly): each unit
charges its own data input, plus the interior set
  attention: Q, K, V and the score maps before/after the softmax;
  mlp:       norm output, both fc outputs (post-bias), the activation output.
Residual adds, head splits/merges, gathers and the attention context are
charge-exempt; the first norm output is recomputed from the cached input
during backward instead of being stored.  Under a full cache one transformer
block therefore holds 15*h*d*n + 2*h*n^2 elements, and a wrapped block
4*h*d*n + (11*h*d*n + 2*h*n^2) * |mask|/n.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import FULL, NONE, RECOMPUTE, Tape, TapeNode, checkpoint_region
from .errors import ConfigError, ShapeError
from .sbp import SampleMask, SbpUnit, wrap_on_tape
from .tensor import Rng, Tensor

__all__ = [
    "EmbedUnit",
    "AttentionUnit",
    "MlpUnit",
    "ChunkEncoderUnit",
    "TransformerBlock",
    "MiniVideoTransformer",
    "SttModel",
    "ForwardSpec",
    "ForwardTrace",
    "transformer_block_forward",
    "stt_forward",
    "chunk_tokens",
]

LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# units


class EmbedUnit(SbpUnit):
    """Per-token linear embedding plus learned positions (a tree unit)."""

    param_names = ("w", "b", "pos")
    cache_side_inputs_full = False
    token_axis = 1

    def __init__(self, token_subset: tuple[int, ...] | None = None):
        self.token_subset = token_subset  # frame-dropout runs on a subsequence

    def run(self, tape, x, params, mask, side_values=None, side_sink=None):
        w, b, pos = params
        if mask is None:
            tape.charge_cached_input(x)
            subset = self.token_subset
        else:
            subset = mask.kept  # input rows arrive pre-sliced
        if subset is not None:
            pos_rows = tape.record("gather_tokens", [pos],
                                   {"idx": tuple(subset), "axis": 0}, cache=NONE)
        else:
            pos_rows = pos
        h = tape.record("matmul", [x, w], cache=NONE)
        h = tape.record("add_bias", [h, b], cache=NONE)
        return tape.record("add_rows", [h, pos_rows], cache=NONE, name="embed")


class AttentionUnit(SbpUnit):
    """Pre-norm multi-head dot-product attention with a residual connection.

    Sampled-row gradients need every key and value row, so wrapped instances
    cache their input in full and keep K/V whole (carried over from the
    forward pass) while Q and the score maps are restricted to the sampled
    rows.
    """

    param_names = ("gamma", "beta", "wq", "wk", "wv")
    cache_side_inputs_full = True
    token_axis = 1

    def __init__(self, heads: int, head_dim: int, causal: bool = False):
        self.heads = heads
        self.head_dim = head_dim
        self.causal = causal

    def run(self, tape, x, params, mask, side_values=None, side_sink=None):
        gamma, beta, wq, wk, wv = params
        h = self.heads
        inv_sqrt_d = 1.0 / np.sqrt(self.head_dim)
        carried = side_values or {}

        ln = tape.record("layer_norm", [x, gamma, beta], {"eps": LN_EPS},
                         cache=RECOMPUTE, precomputed_value=carried.get("ln"))
        if mask is None:
            tape.charge_cached_input(x)
            q_in = ln
        else:
            if self.causal:
                raise ConfigError("causal attention cannot be wrapped for sampled backward")
            q_in = tape.record("gather_tokens", [ln],
                               {"idx": mask.kept, "axis": 1}, cache=NONE)
        q = tape.record("matmul", [q_in, wq], cache=FULL, name="q")
        # keys and values are cached from the forward pass, never recomputed
        k = tape.record("matmul", [ln, wk], cache=FULL, name="k",
                        precomputed_value=carried.get("k"))
        v = tape.record("matmul", [ln, wv], cache=FULL, name="v",
                        precomputed_value=carried.get("v"))
        if side_sink is not None:
            side_sink.update(ln=ln, k=k, v=v)
        qh = tape.record("split_heads", [q], {"h": h}, cache=NONE)
        kh = tape.record("split_heads", [k], {"h": h}, cache=NONE)
        vh = tape.record("split_heads", [v], {"h": h}, cache=NONE)

        s = tape.record("matmul", [qh, kh], {"transpose_b": True}, cache=NONE)
        s = tape.record("scale", [s], {"c": inv_sqrt_d}, cache=FULL, name="scores")
        if self.causal:
            s = tape.record("add_causal_mask", [s], cache=NONE)
        p = tape.record("softmax", [s], cache=FULL, name="attn")

        ctx = tape.record("matmul", [p, vh], cache=NONE)
        merged = tape.record("merge_heads", [ctx], cache=NONE)
        res = x if mask is None else tape.record(
            "gather_tokens", [x], {"idx": mask.kept, "axis": 1}, cache=NONE)
        return tape.record("add", [res, merged], cache=NONE, name="attn_out")


class MlpUnit(SbpUnit):
    """Pre-norm two-layer MLP (4x hidden, exact-erf GELU) with residual."""

    param_names = ("gamma", "beta", "w1", "b1", "w2", "b2")
    cache_side_inputs_full = True  # the audit convention keeps this input whole
    token_axis = 1

    def run(self, tape, z, params, mask, side_values=None, side_sink=None):
        gamma, beta, w1, b1, w2, b2 = params
        if mask is None:
            tape.charge_cached_input(z)
            z_rows = z
        else:
            z_rows = tape.record("gather_tokens", [z],
                                 {"idx": mask.kept, "axis": 1}, cache=NONE)
        ln = tape.record("layer_norm", [z_rows, gamma, beta], {"eps": LN_EPS},
                         cache=FULL, name="mlp_norm")
        h1 = tape.record("matmul", [ln, w1], cache=NONE)
        h1 = tape.record("add_bias", [h1, b1], cache=FULL, name="fc1")
        a = tape.record("gelu", [h1], cache=FULL, name="act")
        h2 = tape.record("matmul", [a, w2], cache=NONE)
        h2 = tape.record("add_bias", [h2, b2], cache=FULL, name="fc2")
        return tape.record("add", [z_rows, h2], cache=NONE, name="mlp_out")


class ChunkEncoderUnit(SbpUnit):
    """Per-chunk MLP encoder (norm -> fc -> gelu -> fc over flat chunk pixels).

    Chunks are processed independently, one sub-graph each, so a chunk's
    computation is bit-identical no matter which other chunks are present.
    """

    param_names = ("gamma", "beta", "w1", "b1", "w2", "b2")
    cache_side_inputs_full = False
    token_axis = 1

    def run(self, tape, x, params, mask, side_values=None, side_sink=None):
        gamma, beta, w1, b1, w2, b2 = params
        if mask is None:
            tape.charge_cached_input(x)
        feats = []
        for i in range(x.shape[1]):
            xi = tape.record("select_token", [x], {"i": i}, cache=NONE)
            ln = tape.record("layer_norm", [xi, gamma, beta], {"eps": LN_EPS},
                             cache=FULL, name=f"chunk{i}_norm")
            h1 = tape.record("matmul", [ln, w1], cache=NONE)
            h1 = tape.record("add_bias", [h1, b1], cache=FULL, name=f"chunk{i}_fc1")
            a = tape.record("gelu", [h1], cache=FULL, name=f"chunk{i}_act")
            h2 = tape.record("matmul", [a, w2], cache=NONE)
            h2 = tape.record("add_bias", [h2, b2], cache=FULL, name=f"chunk{i}_fc2")
            feats.append(h2)
        return tape.record("stack_tokens", feats, cache=NONE, name="features")


# ---------------------------------------------------------------------------
# forward plumbing shared by both families


@dataclass
class ForwardSpec:
    """How to build one forward pass."""

    mode: str = "e2e"  # e2e | sbp | checkpoint | sbp_checkpoint
    masks: list[SampleMask] | None = None  # one per wrapped unit
    boundary: int | None = None  # wrapped layers from the bottom; None = model default
    token_subset: tuple[int, ...] | None = None  # frame dropout


@dataclass
class ForwardTrace:
    """Handles produced by one forward build."""

    logits: TapeNode
    loss: TapeNode | None
    param_leaves: dict[str, TapeNode]
    boundary_nodes: list[tuple[TapeNode, int]] = field(default_factory=list)
    layer_outputs: list[TapeNode] = field(default_factory=list)
    masks: list[SampleMask] = field(default_factory=list)
    top_wrapped_node: TapeNode | None = None


def _expand_masks(spec: ForwardSpec, n_wrapped: int) -> list[SampleMask]:
    if n_wrapped == 0:
        return []
    if not spec.masks:
        raise ConfigError(f"{spec.mode} forward needs masks for {n_wrapped} wrapped units")
    if len(spec.masks) == 1:
        return list(spec.masks) * n_wrapped
    if len(spec.masks) != n_wrapped:
        raise ConfigError(f"got {len(spec.masks)} masks for {n_wrapped} wrapped units")
    return list(spec.masks)


def _run_unit(tape: Tape, unit: SbpUnit, x_node: TapeNode, param_nodes: list[TapeNode],
              spec: ForwardSpec, wrapped: bool, masks: list[SampleMask],
              unit_index: int, name: str) -> TapeNode:
    """Record one unit under the plan's mode."""
    if not wrapped or spec.mode == "e2e":
        return unit.run(tape, x_node, param_nodes, mask=None)
    if spec.mode == "checkpoint":
        def fn(sub, leaves):
            return unit.run(sub, leaves[0], leaves[1:], mask=None)
        return checkpoint_region(tape, fn, [x_node], param_nodes, name=name)
    if spec.mode in ("sbp", "sbp_checkpoint"):
        return wrap_on_tape(
            tape, unit, x_node, param_nodes, masks[unit_index],
            suppress_interior_charges=(spec.mode == "sbp_checkpoint"), name=name)
    raise ConfigError(f"unknown forward mode {spec.mode!r}")


def _init_linear(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal((fan_in, fan_out), std=1.0 / np.sqrt(fan_in))


# ---------------------------------------------------------------------------
# transformer block (the unit pair, packaged for audits and tests)


class TransformerBlock:
    """One attention + MLP block with its own parameters."""

    def __init__(self, heads: int, head_dim: int, *, causal: bool = False,
                 rng: Rng | None = None):
        self.heads = heads
        self.head_dim = head_dim
        self.causal = causal
        self.width = heads * head_dim
        rng = rng or Rng(0)
        c = self.width
        self.params: dict[str, np.ndarray] = {
            "attn.gamma": np.ones(c),
            "attn.beta": np.zeros(c),
            "attn.wq": _init_linear(rng, c, c),
            "attn.wk": _init_linear(rng, c, c),
            "attn.wv": _init_linear(rng, c, c),
            "mlp.gamma": np.ones(c),
            "mlp.beta": np.zeros(c),
            "mlp.w1": _init_linear(rng, c, 4 * c),
            "mlp.b1": np.zeros(4 * c),
            "mlp.w2": _init_linear(rng, 4 * c, c),
            "mlp.b2": np.zeros(c),
        }
        self.attn_unit = AttentionUnit(heads, head_dim, causal=causal)
        self.mlp_unit = MlpUnit()

    def _leaves(self, tape: Tape, requires_grad: bool) -> dict[str, TapeNode]:
        return {k: tape.leaf(v, requires_grad=requires_grad, kind="param", name=k)
                for k, v in self.params.items()}

    def record(self, tape: Tape, x_node: TapeNode, *, mask: SampleMask | None = None,
               leaves: dict[str, TapeNode] | None = None,
               requires_grad: bool = True) -> tuple[TapeNode, TapeNode]:
        """Record the block; returns (attention output, block output)."""
        lv = leaves or self._leaves(tape, requires_grad)
        attn_params = [lv["attn.gamma"], lv["attn.beta"], lv["attn.wq"],
                       lv["attn.wk"], lv["attn.wv"]]
        mlp_params = [lv["mlp.gamma"], lv["mlp.beta"], lv["mlp.w1"], lv["mlp.b1"],
                      lv["mlp.w2"], lv["mlp.b2"]]
        if mask is None:
            z = self.attn_unit.run(tape, x_node, attn_params, mask=None)
            y = self.mlp_unit.run(tape, z, mlp_params, mask=None)
        else:
            z = wrap_on_tape(tape, self.attn_unit, x_node, attn_params, mask, name="attn")
            y = wrap_on_tape(tape, self.mlp_unit, z, mlp_params, mask, name="mlp")
        return z, y

    def forward(self, x) -> Tensor:
        """Plain block forward on an (n, c) or (B, n, c) input."""
        arr = np.asarray(getattr(x, "array", x), dtype=np.float64)
        squeeze = arr.ndim == 2
        if squeeze:
            arr = arr[None]
        if arr.shape[-1] != self.width:
            raise ShapeError(f"expected token width {self.width}, got {arr.shape[-1]}")
        tape = Tape(counting=False, charging=False)
        x_node = tape.leaf(arr, requires_grad=False, kind="data")
        _, y = self.record(tape, x_node, requires_grad=False)
        out = y.value
        return Tensor(out[0] if squeeze else out)


def transformer_block_forward(x, block: TransformerBlock) -> Tensor:
    """Multi-head attention + MLP with residuals; forward only."""
    return block.forward(x)


# ---------------------------------------------------------------------------
# mini video transformer


class MiniVideoTransformer:
    """Token-per-frame (or per-patch) transformer classifier.

    ``grid`` other than (T, 1, 1) lays tokens out in row-major (t, h, w)
    order, which is the index space of the 3-D checkerboard sampler.  The
    bottom ``boundary`` blocks (plus the embedding) form the wrappable part;
    the top three blocks keep full backward paths by default.
    """

    family = "mini_transformer"

    def __init__(self, *, in_dim: int, heads: int, head_dim: int, depth: int,
                 grid: tuple[int, int, int], n_classes: int,
                 boundary: int | None = None, pos_init: float = 0.02, seed: int = 0):
        self.in_dim = in_dim
        self.heads = heads
        self.head_dim = head_dim
        self.depth = depth
        self.grid = tuple(grid)
        self.n_tokens = int(np.prod(grid))
        self.n_classes = n_classes
        self.width = heads * head_dim
        self.boundary = self.default_boundary() if boundary is None else boundary
        if self.boundary > depth:
            raise ConfigError(f"boundary {self.boundary} exceeds depth {depth}")

        rng = Rng(seed).derive(11)
        c = self.width
        self.params: dict[str, np.ndarray] = {
            "embed.w": _init_linear(rng, in_dim, c),
            "embed.b": np.zeros(c),
            "embed.pos": rng.normal((self.n_tokens, c), std=pos_init),
        }
        self.blocks: list[TransformerBlock] = []
        for l in range(depth):
            blk = TransformerBlock(heads, head_dim, causal=False, rng=rng.derive(100 + l))
            self.blocks.append(blk)
            for k, v in blk.params.items():
                self.params[f"block{l}.{k}"] = v
        self.params["head.w"] = _init_linear(rng, c, n_classes)
        self.params["head.b"] = np.zeros(n_classes)
        self._rebind_blocks()

    def _rebind_blocks(self) -> None:
        # blocks view the model's parameter dict so updates stay in sync
        for l, blk in enumerate(self.blocks):
            blk.params = {k: self.params[f"block{l}.{k}"] for k in blk.params}

    def default_boundary(self) -> int:
        return max(self.depth - 3, 0)

    def n_wrapped_units(self, boundary: int) -> int:
        return 0 if boundary == 0 else 1 + 2 * boundary

    def candidate_count(self) -> int:
        return self.n_tokens

    def spatial_param_names(self, boundary: int) -> set[str]:
        names = set()
        if boundary > 0:
            names.update(k for k in self.params if k.startswith("embed."))
            for l in range(boundary):
                names.update(k for k in self.params if k.startswith(f"block{l}."))
        return names

    def forward(self, tape: Tape, x: np.ndarray, spec: ForwardSpec,
                labels: np.ndarray | None = None) -> ForwardTrace:
        """Record one forward pass; x is (B, n_tokens, in_dim)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.in_dim:
            raise ShapeError(f"expected (B, n, {self.in_dim}) tokens, got {x.shape}")
        boundary = self.boundary if spec.boundary is None else spec.boundary
        if spec.token_subset is not None and spec.mode != "e2e":
            raise ConfigError("token subsets (frame dropout) run with mode='e2e'")

        n_wrapped = self.n_wrapped_units(boundary) if spec.mode in ("sbp", "sbp_checkpoint") else 0
        masks = _expand_masks(spec, n_wrapped) if n_wrapped else []
        wraps_on = spec.mode in ("sbp", "sbp_checkpoint", "checkpoint")

        leaves = {k: tape.leaf(v, requires_grad=True, kind="param", name=k)
                  for k, v in self.params.items()}
        x_node = tape.leaf(x, requires_grad=False, kind="data", name="tokens")

        trace = ForwardTrace(logits=x_node, loss=None, param_leaves=leaves)
        trace.masks = masks
        unit_index = 0

        with tape.layer("embed"):
            embed_unit = EmbedUnit(token_subset=spec.token_subset)
            embed_params = [leaves["embed.w"], leaves["embed.b"], leaves["embed.pos"]]
            h = _run_unit(tape, embed_unit, x_node, embed_params, spec,
                          wrapped=wraps_on and boundary > 0, masks=masks,
                          unit_index=unit_index, name="embed")
            if boundary > 0:
                trace.boundary_nodes.append((h, 1))
                trace.top_wrapped_node = h
                unit_index += 1
        trace.layer_outputs.append(h)

        for l in range(self.depth):
            blk = self.blocks[l]
            in_spatial = l < boundary
            wrapped = wraps_on and in_spatial
            with tape.layer(f"block{l}"):
                blk_leaves = {k: leaves[f"block{l}.{k}"] for k in blk.params}
                attn_params = [blk_leaves["attn.gamma"], blk_leaves["attn.beta"],
                               blk_leaves["attn.wq"], blk_leaves["attn.wk"],
                               blk_leaves["attn.wv"]]
                mlp_params = [blk_leaves["mlp.gamma"], blk_leaves["mlp.beta"],
                              blk_leaves["mlp.w1"], blk_leaves["mlp.b1"],
                              blk_leaves["mlp.w2"], blk_leaves["mlp.b2"]]
                z = _run_unit(tape, blk.attn_unit, h, attn_params, spec,
                              wrapped=wrapped, masks=masks,
                              unit_index=unit_index, name=f"block{l}.attn")
                if in_spatial:
                    trace.boundary_nodes.append((z, 1))
                    unit_index += 1
                h = _run_unit(tape, blk.mlp_unit, z, mlp_params, spec,
                              wrapped=wrapped, masks=masks,
                              unit_index=unit_index, name=f"block{l}.mlp")
                if in_spatial:
                    trace.boundary_nodes.append((h, 1))
                    trace.top_wrapped_node = h
                    unit_index += 1
            trace.layer_outputs.append(h)

        with tape.layer("head"):
            tape.charge_cached_input(h)
            pooled = tape.record("mean_tokens", [h], cache=FULL, name="pooled")
            logits = tape.record("matmul", [pooled, leaves["head.w"]], cache=NONE)
            logits = tape.record("add_bias", [logits, leaves["head.b"]],
                                 cache=FULL, name="logits")
            trace.logits = logits
            if labels is not None:
                trace.loss = tape.record("cross_entropy", [logits],
                                         {"labels": np.asarray(labels)},
                                         cache=NONE, name="loss")
        return trace


# ---------------------------------------------------------------------------
# spatial-then-temporal model


def chunk_tokens(video: np.ndarray, chunk_size: int) -> np.ndarray:
    """(B, C, T, H, W) video -> (B, T/K, K*C*H*W) flat chunk tokens."""
    v = np.asarray(video, dtype=np.float64)
    if v.ndim == 4:
        v = v[None]
    if v.ndim != 5:
        raise ShapeError(f"expected (B, C, T, H, W) video, got shape {v.shape}")
    b, c, t, hh, ww = v.shape
    if t % chunk_size != 0:
        raise ShapeError(f"frame count {t} not divisible by chunk size {chunk_size}")
    n = t // chunk_size
    # (B, n, C, K, H, W) -> flat per chunk
    chunks = v.reshape(b, c, n, chunk_size, hh, ww).transpose(0, 2, 1, 3, 4, 5)
    return np.ascontiguousarray(chunks.reshape(b, n, c * chunk_size * hh * ww))


class SttModel:
    """Per-chunk spatial encoder followed by a small causal temporal block."""

    family = "stt"

    def __init__(self, *, frames: int, chunk_size: int, frame_shape: tuple[int, int, int],
                 spatial_hidden: int, feat_dim: int, temporal_heads: int,
                 n_classes: int, boundary: int | None = None, seed: int = 0):
        if frames % chunk_size != 0:
            raise ShapeError(f"frames {frames} not divisible by chunk size {chunk_size}")
        self.frames = frames
        self.chunk_size = chunk_size
        self.frame_shape = tuple(frame_shape)
        self.n_chunks = frames // chunk_size
        self.chunk_dim = chunk_size * int(np.prod(frame_shape))
        self.spatial_hidden = spatial_hidden
        self.feat_dim = feat_dim
        self.temporal_heads = temporal_heads
        if feat_dim % temporal_heads != 0:
            raise ConfigError("feat_dim must divide evenly across temporal heads")
        self.n_classes = n_classes
        self.boundary = 1 if boundary is None else boundary
        if self.boundary not in (0, 1):
            raise ConfigError("stt boundary is 0 (nothing wrapped) or 1 (spatial encoder)")

        rng = Rng(seed).derive(22)
        fc = self.chunk_dim
        self.params: dict[str, np.ndarray] = {
            "spatial.gamma": np.ones(fc),
            "spatial.beta": np.zeros(fc),
            "spatial.w1": _init_linear(rng, fc, spatial_hidden),
            "spatial.b1": np.zeros(spatial_hidden),
            "spatial.w2": _init_linear(rng, spatial_hidden, feat_dim),
            "spatial.b2": np.zeros(feat_dim),
            "temporal.pos": rng.normal((self.n_chunks, feat_dim), std=0.02),
        }
        self.temporal_block = TransformerBlock(
            temporal_heads, feat_dim // temporal_heads, causal=True, rng=rng.derive(33))
        for k, v in self.temporal_block.params.items():
            self.params[f"temporal.{k}"] = v
        self.params["head.w"] = _init_linear(rng, feat_dim, n_classes)
        self.params["head.b"] = np.zeros(n_classes)
        self._rebind_blocks()

        self.encoder_unit = ChunkEncoderUnit()

    def _rebind_blocks(self) -> None:
        self.temporal_block.params = {
            k: self.params[f"temporal.{k}"] for k in self.temporal_block.params}

    def default_boundary(self) -> int:
        return 1

    def n_wrapped_units(self, boundary: int) -> int:
        return 1 if boundary >= 1 else 0

    def candidate_count(self) -> int:
        return self.n_chunks

    def spatial_param_names(self, boundary: int) -> set[str]:
        return {k for k in self.params if k.startswith("spatial.")} if boundary else set()

    def forward(self, tape: Tape, x: np.ndarray, spec: ForwardSpec,
                labels: np.ndarray | None = None) -> ForwardTrace:
        """Record one forward pass; x is (B, n_chunks, chunk_dim) tokens."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.chunk_dim:
            raise ShapeError(f"expected (B, n, {self.chunk_dim}) chunk tokens, got {x.shape}")
        boundary = self.boundary if spec.boundary is None else spec.boundary
        if spec.token_subset is not None and spec.mode != "e2e":
            raise ConfigError("token subsets (frame dropout) run with mode='e2e'")

        n_wrapped = self.n_wrapped_units(boundary) if spec.mode in ("sbp", "sbp_checkpoint") else 0
        masks = _expand_masks(spec, n_wrapped) if n_wrapped else []
        wraps_on = spec.mode in ("sbp", "sbp_checkpoint", "checkpoint")

        leaves = {k: tape.leaf(v, requires_grad=True, kind="param", name=k)
                  for k, v in self.params.items()}
        x_node = tape.leaf(x, requires_grad=False, kind="data", name="chunks")

        trace = ForwardTrace(logits=x_node, loss=None, param_leaves=leaves)
        trace.masks = masks

        enc_params = [leaves["spatial.gamma"], leaves["spatial.beta"],
                      leaves["spatial.w1"], leaves["spatial.b1"],
                      leaves["spatial.w2"], leaves["spatial.b2"]]
        with tape.layer("spatial.encoder"):
            h = _run_unit(tape, self.encoder_unit, x_node, enc_params, spec,
                          wrapped=wraps_on and boundary >= 1, masks=masks,
                          unit_index=0, name="spatial")
            if boundary >= 1:
                trace.boundary_nodes.append((h, 1))
                trace.top_wrapped_node = h
        trace.layer_outputs.append(h)

        with tape.layer("temporal.block"):
            pos = leaves["temporal.pos"]
            if spec.token_subset is not None:
                pos = tape.record("gather_tokens", [pos],
                                  {"idx": tuple(spec.token_subset), "axis": 0}, cache=NONE)
            h = tape.record("add_rows", [h, pos], cache=NONE, name="with_pos")
            blk_leaves = {k: leaves[f"temporal.{k}"] for k in self.temporal_block.params}
            _, h = self.temporal_block.record(tape, h, leaves=blk_leaves)
        trace.layer_outputs.append(h)

        with tape.layer("head"):
            tape.charge_cached_input(h)
            pooled = tape.record("mean_tokens", [h], cache=FULL, name="pooled")
            logits = tape.record("matmul", [pooled, leaves["head.w"]], cache=NONE)
            logits = tape.record("add_bias", [logits, leaves["head.b"]],
                                 cache=FULL, name="logits")
            trace.logits = logits
            if labels is not None:
                trace.loss = tape.record("cross_entropy", [logits],
                                         {"labels": np.asarray(labels)},
                                         cache=NONE, name="loss")
        return trace


def stt_forward(video, model: SttModel) -> Tensor:
    """Chunk-split -> per-chunk spatial encoding -> temporal head logits."""
    arr = np.asarray(getattr(video, "array", video), dtype=np.float64)
    squeeze = arr.ndim == 4
    tokens = chunk_tokens(arr, model.chunk_size)
    tape = Tape(counting=False, charging=False)
    trace = model.forward(tape, tokens, ForwardSpec(mode="e2e"))
    out = trace.logits.value
    return Tensor(out[0] if squeeze else out)
