"""Experiment runner: config schema, training loops per mode, CSV records.

Modes
-----
``e2e``             full forward / full backward.
``sbp``             sampled backward below the boundary (one shared mask per
                    step by default, resampled every step).
``frame_dropout``   drop frames before the model: forward AND backward paths
                    removed for unsampled frames; kept tokens keep their
                    original position embeddings.
``checkpoint``      recompute units during backward; cache unit inputs only.
``sbp+checkpoint``  sampled backward whose re-materialization charges are
                    suppressed (per-node minimum of both plans).

All randomness flows from the config seed through named child streams, so a
(config, seed) pair reproduces its metrics exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import analysis
from ..autograd import Tape, backward
from ..errors import ConfigError, ContractError
from ..models import (
    ForwardSpec,
    MiniVideoTransformer,
    SttModel,
    TransformerBlock,
    chunk_tokens,
)
from ..sbp import (
    SampleMask,
    SbpConfig,
    sample_checkerboard3d,
    sample_diverse_feature,
    sample_diverse_grad,
    sample_uniform,
)
from ..tensor import Rng
from .data import SyntheticDataset, train_val_split

MODES = ("e2e", "sbp", "frame_dropout", "checkpoint", "sbp+checkpoint")
MODEL_FAMILIES = ("stt", "mini_transformer")

_ARCH_KEYS = {
    "stt": {"chunk_size", "spatial_hidden", "feat_dim", "temporal_heads", "boundary"},
    "mini_transformer": {"heads", "head_dim", "depth", "spatial_patches", "boundary",
                         "pos_init"},
}
_SBP_KEYS = {"keep_ratio", "sampler", "boundary", "resample_each_step",
             "share_mask_across_layers"}


@dataclass
class ExperimentConfig:
    model: str
    mode: str
    dataset: str
    seed: int
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    spatial_lr_mult: float = 0.1
    momentum: float = 0.9
    val_fraction: float = 0.25
    arch: dict = field(default_factory=dict)
    sbp: dict = field(default_factory=dict)
    out: str | None = None

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            raw = json.load(f)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in raw:
            raise ConfigError("config must set a seed")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.model not in MODEL_FAMILIES:
            raise ConfigError(f"model must be one of {MODEL_FAMILIES}, got {self.model!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        unknown_arch = set(self.arch) - _ARCH_KEYS[self.model]
        if unknown_arch:
            raise ConfigError(f"unknown arch keys for {self.model}: {sorted(unknown_arch)}")
        unknown_sbp = set(self.sbp) - _SBP_KEYS
        if unknown_sbp:
            raise ConfigError(f"unknown sbp keys: {sorted(unknown_sbp)}")
        if self.mode in ("sbp", "sbp+checkpoint", "frame_dropout"):
            if "keep_ratio" not in self.sbp:
                raise ConfigError(f"mode {self.mode!r} needs sbp.keep_ratio")
        self.sbp_config()  # raises on bad values

    def sbp_config(self) -> SbpConfig:
        cfg = SbpConfig(**{k: v for k, v in self.sbp.items() if k in _SBP_KEYS})
        cfg.validate()
        return cfg

    def to_canonical_dict(self) -> dict:
        return {
            "model": self.model, "mode": self.mode, "dataset": self.dataset,
            "seed": self.seed, "epochs": self.epochs, "batch_size": self.batch_size,
            "lr": self.lr, "spatial_lr_mult": self.spatial_lr_mult,
            "momentum": self.momentum, "val_fraction": self.val_fraction,
            "arch": self.arch, "sbp": self.sbp,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_canonical_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# model construction and tokenization


def tokenize(ds_x: np.ndarray, family: str, arch: dict) -> np.ndarray:
    """(N, C, T, H, W) clips -> (N, n_tokens, token_dim) in (t, h, w) order."""
    if family == "stt":
        return chunk_tokens(ds_x, arch["chunk_size"])
    sh, sw = arch.get("spatial_patches", (1, 1))
    n, c, t, h, w = ds_x.shape
    if h % sh or w % sw:
        raise ConfigError(f"frame {h}x{w} not divisible into {sh}x{sw} patches")
    ph, pw = h // sh, w // sw
    v = ds_x.reshape(n, c, t, sh, ph, sw, pw).transpose(0, 2, 3, 5, 1, 4, 6)
    return np.ascontiguousarray(v.reshape(n, t * sh * sw, c * ph * pw))


def build_model(config: ExperimentConfig, ds: SyntheticDataset):
    arch = dict(config.arch)
    c, h, w = ds.frame_shape
    if config.model == "stt":
        arch.setdefault("chunk_size", 1)
        arch.setdefault("spatial_hidden", 64)
        arch.setdefault("feat_dim", 16)
        arch.setdefault("temporal_heads", 2)
        return SttModel(
            frames=ds.frames,
            chunk_size=arch["chunk_size"],
            frame_shape=ds.frame_shape,
            spatial_hidden=arch["spatial_hidden"],
            feat_dim=arch["feat_dim"],
            temporal_heads=arch["temporal_heads"],
            n_classes=ds.meta["n_classes"],
            boundary=arch.get("boundary"),
            seed=config.seed,
        ), arch
    arch.setdefault("heads", 2)
    arch.setdefault("head_dim", 16)
    arch.setdefault("depth", 4)
    arch.setdefault("spatial_patches", (1, 1))
    arch.setdefault("pos_init", 0.02)
    sh, sw = arch["spatial_patches"]
    grid = (ds.frames, sh, sw)
    in_dim = c * (h // sh) * (w // sw)
    return MiniVideoTransformer(
        in_dim=in_dim,
        heads=arch["heads"],
        head_dim=arch["head_dim"],
        depth=arch["depth"],
        grid=grid,
        n_classes=ds.meta["n_classes"],
        boundary=arch.get("boundary"),
        pos_init=arch["pos_init"],
        seed=config.seed,
    ), arch


# ---------------------------------------------------------------------------
# mask drawing


class MaskDrawer:
    """Per-step sampler dispatch, including the state the diverse samplers
    read (previous step's boundary features / gradient magnitudes; all-equal
    fallback before the first step, equivalent to the uniform sampler over
    the identity ordering).

    On patch-grid models the temporal samplers act frame-wise: every patch
    token of a kept frame is kept.  The 3-D checkerboard samples the joint
    spatio-temporal cell grid instead.
    """

    def __init__(self, model, sbp_cfg: SbpConfig, rng: Rng):
        self.model = model
        self.cfg = sbp_cfg
        self.rng = rng
        n = model.candidate_count()
        self.features = np.zeros((n, 1))
        self.grad_mags = np.zeros(n)
        self._cached: list[SampleMask] | None = None

    def _frame_layout(self) -> tuple[int, int]:
        grid = getattr(self.model, "grid", None)
        per_frame = grid[1] * grid[2] if grid else 1
        return self.model.candidate_count() // per_frame, per_frame

    def _expand(self, frame_mask: SampleMask, per_frame: int) -> SampleMask:
        if per_frame == 1:
            return frame_mask
        kept = tuple(f * per_frame + j for f in frame_mask.kept for j in range(per_frame))
        return SampleMask(kept, frame_mask.total * per_frame)

    def _draw_one(self) -> SampleMask:
        n = self.model.candidate_count()
        kind = self.cfg.sampler
        if kind == "checkerboard3d":
            grid = self.cfg.grid or getattr(self.model, "grid", None)
            if grid is None or int(np.prod(grid)) != n:
                raise ConfigError("checkerboard3d needs a (T, H, W) grid matching the model")
            return sample_checkerboard3d(tuple(grid), self.cfg.keep_ratio)

        frames, per_frame = self._frame_layout()
        if kind == "uniform_random":
            mask = sample_uniform(frames, self.cfg.keep_ratio, self.rng)
        elif kind == "diverse_feature":
            feats = self.features.reshape(frames, -1)  # patch features concatenated
            mask = sample_diverse_feature(feats, self.cfg.keep_ratio, self.rng)
        elif kind == "diverse_grad":
            mags = np.sqrt((self.grad_mags.reshape(frames, -1) ** 2).sum(axis=1))
            mask = sample_diverse_grad(mags, self.cfg.keep_ratio, self.rng)
        else:
            raise ConfigError(f"unknown sampler {kind!r}")
        return self._expand(mask, per_frame)

    def draw(self, n_wrapped: int) -> list[SampleMask]:
        if not self.cfg.resample_each_step and self._cached is not None:
            return self._cached
        if self.cfg.share_mask_across_layers:
            masks = [self._draw_one()] * max(n_wrapped, 1)
        else:
            masks = [self._draw_one() for _ in range(max(n_wrapped, 1))]
        self._cached = masks
        return masks

    def observe(self, features: np.ndarray | None, grad: np.ndarray | None) -> None:
        """Record this step's boundary-layer output and its gradient."""
        if features is not None:
            self.features = features.mean(axis=0)  # (n, c), batch-averaged
        if grad is not None:
            self.grad_mags = np.sqrt((grad**2).sum(axis=(0, 2)))


# ---------------------------------------------------------------------------
# records


RUN_SUMMARY_COLUMNS = [
    "config_hash", "dataset_hash", "model", "mode", "keep_ratio", "sampler",
    "boundary", "seed", "epochs", "final_val_acc", "cached_elements",
    "cached_spatial", "cached_temporal", "forward_ops", "backward_ops",
    "param_grad_ops", "secs_per_step", "status",
]

EPOCH_COLUMNS = ["epoch", "train_loss", "val_acc"]


@dataclass
class RunRecord:
    config_hash: str
    dataset_hash: str
    model: str
    mode: str
    keep_ratio: float
    sampler: str
    boundary: int
    seed: int
    epochs: int
    final_val_acc: float
    cached_elements: int
    cached_spatial: int
    cached_temporal: int
    forward_ops: int
    backward_ops: int
    param_grad_ops: int
    secs_per_step: float
    status: str
    epoch_rows: list[tuple[int, float, float]] = field(default_factory=list)

    def summary_row(self) -> list:
        return [getattr(self, col) for col in RUN_SUMMARY_COLUMNS]

    def write(self, outdir, config: ExperimentConfig | None = None) -> Path:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "summary.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(RUN_SUMMARY_COLUMNS)
            w.writerow(self.summary_row())
        with open(outdir / "epochs.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(EPOCH_COLUMNS)
            w.writerows(self.epoch_rows)
        if config is not None:
            with open(outdir / "config.json", "w") as f:
                json.dump(config.to_canonical_dict(), f, indent=2, sort_keys=True)
        return outdir / "summary.csv"

    @classmethod
    def read_summary(cls, path) -> "RunRecord":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        if rows[0] != RUN_SUMMARY_COLUMNS:
            raise ContractError(f"unexpected summary schema in {path}")
        vals = dict(zip(RUN_SUMMARY_COLUMNS, rows[1]))
        return cls(
            config_hash=vals["config_hash"], dataset_hash=vals["dataset_hash"],
            model=vals["model"], mode=vals["mode"],
            keep_ratio=float(vals["keep_ratio"]), sampler=vals["sampler"],
            boundary=int(vals["boundary"]), seed=int(vals["seed"]),
            epochs=int(vals["epochs"]), final_val_acc=float(vals["final_val_acc"]),
            cached_elements=int(vals["cached_elements"]),
            cached_spatial=int(vals["cached_spatial"]),
            cached_temporal=int(vals["cached_temporal"]),
            forward_ops=int(vals["forward_ops"]), backward_ops=int(vals["backward_ops"]),
            param_grad_ops=int(vals["param_grad_ops"]),
            secs_per_step=float(vals["secs_per_step"]), status=vals["status"],
        )


# ---------------------------------------------------------------------------
# training


class _Sgd:
    """Plain SGD with momentum 0.9 and a smaller step for the spatial model."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float,
                 spatial_names: set[str], spatial_mult: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.spatial_names = spatial_names
        self.spatial_mult = spatial_mult
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            v = self.velocity[name]
            v *= self.momentum
            v += g
            lr = self.lr * (self.spatial_mult if name in self.spatial_names else 1.0)
            self.params[name] -= lr * v  # in place: model blocks share these arrays


def _frame_token_subset(model, keep_ratio: float, rng: Rng) -> tuple[int, ...]:
    """Uniformly sampled frames; for patch grids, all patches of kept frames."""
    if isinstance(model, SttModel):
        return tuple(sample_uniform(model.n_chunks, keep_ratio, rng).kept)
    t, sh, sw = model.grid
    frames = sample_uniform(t, keep_ratio, rng).kept
    per_frame = sh * sw
    return tuple(ti * per_frame + j for ti in frames for j in range(per_frame))


def _forward_spec(config: ExperimentConfig, model, drawer: MaskDrawer | None,
                  fd_rng: Rng | None, boundary: int) -> ForwardSpec:
    mode = config.mode
    if mode == "e2e":
        return ForwardSpec(mode="e2e", boundary=boundary)
    if mode == "checkpoint":
        return ForwardSpec(mode="checkpoint", boundary=boundary)
    if mode == "frame_dropout":
        subset = _frame_token_subset(model, config.sbp["keep_ratio"], fd_rng)
        return ForwardSpec(mode="e2e", boundary=boundary, token_subset=subset)
    masks = drawer.draw(model.n_wrapped_units(boundary))
    kind = "sbp" if mode == "sbp" else "sbp_checkpoint"
    return ForwardSpec(mode=kind, masks=masks, boundary=boundary)


def collect_layer_activations(model, tokens: np.ndarray) -> list[np.ndarray]:
    """Per-layer activation maps (embedding output, then each block output)
    from one evaluation forward; feeds the similarity diagnostics."""
    tape = Tape(counting=False, charging=False)
    trace = model.forward(tape, tokens, ForwardSpec(mode="e2e"))
    return [node.value for node in trace.layer_outputs]


def evaluate(model, tokens: np.ndarray, labels: np.ndarray, batch_size: int) -> float:
    correct = 0
    for lo in range(0, len(tokens), batch_size):
        hi = min(lo + batch_size, len(tokens))
        tape = Tape(counting=False, charging=False)
        trace = model.forward(tape, tokens[lo:hi], ForwardSpec(mode="e2e"))
        correct += int((trace.logits.value.argmax(axis=1) == labels[lo:hi]).sum())
    return correct / len(tokens)


def run_experiment(config: ExperimentConfig, dataset: SyntheticDataset | None = None,
                   return_model: bool = False):
    """Train per the config mode, evaluate on the held-out split, produce a
    RunRecord (written to ``config.out`` when set)."""
    config.validate()
    ds = dataset if dataset is not None else SyntheticDataset.load(config.dataset)
    model, arch = build_model(config, ds)
    tokens = tokenize(ds.x, config.model, arch)
    train_idx, val_idx = train_val_split(ds, config.val_fraction, config.seed)
    x_train, y_train = tokens[train_idx], ds.y[train_idx]
    x_val, y_val = tokens[val_idx], ds.y[val_idx]

    sbp_cfg = config.sbp_config()
    boundary = sbp_cfg.boundary if sbp_cfg.boundary is not None else model.default_boundary()
    if config.model == "stt":
        boundary = min(boundary, 1)
    needs_masks = config.mode in ("sbp", "sbp+checkpoint")
    base_rng = Rng(config.seed)
    drawer = MaskDrawer(model, sbp_cfg, base_rng.derive(101)) if needs_masks else None
    fd_rng = base_rng.derive(102) if config.mode == "frame_dropout" else None
    shuffle_rng = base_rng.derive(103)

    spatial_names = model.spatial_param_names(boundary)
    optim = _Sgd(model.params, config.lr, config.momentum, spatial_names,
                 config.spatial_lr_mult)

    status = "ok"
    epoch_rows: list[tuple[int, float, float]] = []
    last_tape: Tape | None = None
    step_times: list[float] = []

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(x_train))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            sel = order[lo:lo + config.batch_size]
            xb, yb = x_train[sel], y_train[sel]
            spec = _forward_spec(config, model, drawer, fd_rng, boundary)
            if spec.token_subset is not None:
                xb = xb[:, list(spec.token_subset), :]

            t0 = time.perf_counter()
            tape = Tape()
            trace = model.forward(tape, xb, spec, yb)
            loss_val = float(trace.loss.value[0])
            taps = None
            if drawer is not None and trace.top_wrapped_node is not None:
                taps = {trace.top_wrapped_node.idx: None}
            grads = backward(tape, trace.loss, grad_taps=taps)
            named = {name: grads[node] for name, node in trace.param_leaves.items()}
            optim.step(named)
            step_times.append(time.perf_counter() - t0)
            if not np.isfinite(loss_val):
                status = "aborted: non-finite loss"
                break
            losses.append(loss_val)
            if drawer is not None and trace.top_wrapped_node is not None:
                tap_grad = taps.get(trace.top_wrapped_node.idx) if taps else None
                drawer.observe(trace.top_wrapped_node.value, tap_grad)
            last_tape = tape
        if status != "ok":
            break
        val_acc = evaluate(model, x_val, y_val, config.batch_size)
        epoch_rows.append((epoch, float(np.mean(losses)), val_acc))

    mem = last_tape.memory if last_tape is not None else None
    counter = last_tape.op_counter if last_tape is not None else None
    cached_spatial = 0
    if mem is not None:
        if isinstance(model, SttModel):
            cached_spatial = mem.subtotal("spatial.") if boundary else 0
        elif boundary > 0:
            labels = {"embed"} | {f"block{l}" for l in range(boundary)}
            cached_spatial = sum(v for k, v in mem.cached_elements_per_layer.items()
                                 if k in labels)

    samples_backward = config.mode in ("sbp", "sbp+checkpoint", "frame_dropout")
    record = RunRecord(
        config_hash=config.config_hash(),
        dataset_hash=ds.content_hash()[:16],
        model=config.model,
        mode=config.mode,
        keep_ratio=float(config.sbp["keep_ratio"]) if samples_backward else 1.0,
        sampler=sbp_cfg.sampler,
        boundary=boundary,
        seed=config.seed,
        epochs=config.epochs,
        final_val_acc=epoch_rows[-1][2] if epoch_rows else float("nan"),
        cached_elements=mem.cached_elements_total if mem else 0,
        cached_spatial=cached_spatial,
        cached_temporal=(mem.cached_elements_total - cached_spatial) if mem else 0,
        forward_ops=counter.forward_elementary_ops if counter else 0,
        backward_ops=counter.backward_elementary_ops if counter else 0,
        param_grad_ops=counter.param_grad_elementary_ops if counter else 0,
        secs_per_step=float(np.mean(step_times)) if step_times else 0.0,
        status=status,
        epoch_rows=epoch_rows,
    )
    if config.out:
        record.write(config.out, config)
    return (record, model) if return_model else record


# ---------------------------------------------------------------------------
# comparisons


COMPARISON_COLUMNS = [
    "mode", "keep_ratio", "final_val_acc", "acc_delta_vs_e2e",
    "space_ratio_measured", "space_ratio_predicted", "space_conforms",
    "time_ratio_measured", "time_ratio_predicted", "time_conforms",
]


def compare_runs(records: list[RunRecord], out_path=None,
                 transformer_dims: tuple[int, int] | None = None) -> list[dict]:
    """Cross-mode comparison table against the e2e baseline run.

    Space/time ratios are measured from the per-step counters; predictions
    use the chunked-model formula with the baseline's measured memory split
    (or the transformer formula when (d, n) is supplied).  Conformance flags
    mark measured-within-10%-of-predicted.
    """
    if len(records) < 2 or len({r.mode for r in records}) < 2:
        raise ContractError("need at least two records with distinct modes")
    hashes = {r.dataset_hash for r in records}
    if len(hashes) != 1:
        raise ContractError(f"records come from different datasets: {sorted(hashes)}")
    base = next((r for r in records if r.mode == "e2e"), None)
    if base is None:
        raise ContractError("comparison needs an e2e baseline record")

    rows = []
    for rec in records:
        row: dict = {
            "mode": rec.mode,
            "keep_ratio": rec.keep_ratio,
            "final_val_acc": rec.final_val_acc,
            "acc_delta_vs_e2e": rec.final_val_acc - base.final_val_acc,
        }
        space_measured = rec.cached_elements / base.cached_elements
        time_measured = ((rec.forward_ops + rec.backward_ops)
                         / (base.forward_ops + base.backward_ops))
        r = rec.keep_ratio
        # the analytic ratios model sampled backward only; the cache formula
        # additionally assumes no checkpoint composition
        space_pred = float("nan")
        time_pred = float("nan")
        if rec.mode in ("sbp", "sbp+checkpoint") and r < 1.0:
            time_pred = analysis.predict_time_ratio(r)
        if rec.mode == "sbp" and r < 1.0:
            if transformer_dims is not None:
                d, n = transformer_dims
                space_pred = analysis.predict_space_ratio_transformer(d, n, r)
            else:
                space_pred = analysis.predict_space_ratio_stt(
                    base.cached_spatial, base.cached_temporal, r)
        row["space_ratio_measured"] = space_measured
        row["space_ratio_predicted"] = space_pred
        row["space_conforms"] = (
            bool(abs(space_measured - space_pred) / space_pred < 0.10)
            if np.isfinite(space_pred) else "")
        row["time_ratio_measured"] = time_measured
        row["time_ratio_predicted"] = time_pred
        row["time_conforms"] = (
            bool(abs(time_measured - time_pred) / time_pred < 0.10)
            if np.isfinite(time_pred) else "")
        rows.append(row)

    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(COMPARISON_COLUMNS)
            for row in rows:
                w.writerow([row[c] for c in COMPARISON_COLUMNS])
    return rows


# ---------------------------------------------------------------------------
# audits


def audit_block_memory(heads: int, head_dim: int, tokens: int, keep_ratios,
                       seed: int = 0) -> list[dict]:
    """Measured vs predicted cached-element ratio for one transformer block."""
    rng = Rng(seed)
    block = TransformerBlock(heads, head_dim, rng=rng.derive(1))
    x = rng.derive(2).normal((1, tokens, heads * head_dim))

    tape_full = Tape()
    x_node = tape_full.leaf(x, requires_grad=False, kind="data")
    block.record(tape_full, x_node, requires_grad=False)
    full = tape_full.memory.cached_elements_total

    rows = []
    for r in keep_ratios:
        mask = sample_uniform(tokens, r, rng.derive(3, int(r * 1000)))
        tape = Tape()
        x_node = tape.leaf(x, requires_grad=False, kind="data")
        block.record(tape, x_node, mask=mask, requires_grad=True)
        measured = tape.memory.cached_elements_total / full
        predicted = analysis.predict_space_ratio_transformer(head_dim, tokens, mask.fraction)
        rows.append({
            "family": "transformer_block", "keep_ratio": r,
            "measured": measured, "predicted": predicted,
            "rel_dev": abs(measured - predicted) / predicted,
        })
    return rows


def audit_stt_memory(keep_ratios, seed: int = 0, *, frames: int = 16,
                     spatial_hidden: int = 768, feat_dim: int = 8) -> list[dict]:
    """Measured vs predicted cached-element ratio for the chunked model."""
    model = SttModel(frames=frames, chunk_size=1, frame_shape=(1, 6, 8),
                     spatial_hidden=spatial_hidden, feat_dim=feat_dim,
                     temporal_heads=1, n_classes=4, seed=seed)
    rng = Rng(seed)
    x = rng.derive(5).normal((1, model.n_chunks, model.chunk_dim))

    tape_full = Tape()
    model.forward(tape_full, x, ForwardSpec(mode="e2e"))
    m_s = tape_full.memory.subtotal("spatial.")
    m_c = tape_full.memory.cached_elements_total - m_s

    rows = []
    for r in keep_ratios:
        mask = sample_uniform(model.n_chunks, r, rng.derive(6, int(r * 1000)))
        tape = Tape()
        model.forward(tape, x, ForwardSpec(mode="sbp", masks=[mask]))
        measured = tape.memory.cached_elements_total / (m_s + m_c)
        predicted = analysis.predict_space_ratio_stt(m_s, m_c, mask.fraction)
        rows.append({
            "family": "stt", "keep_ratio": r,
            "measured": measured, "predicted": predicted,
            "rel_dev": abs(measured - predicted) / predicted,
            "m_s": m_s, "m_c": m_c,
        })
    return rows


def audit_time_ratio(keep_ratios, seed: int = 0, *, heads: int = 2, head_dim: int = 16,
                     depth: int = 4, tokens: int = 32, in_dim: int = 32) -> list[dict]:
    """Measured vs predicted total-op ratio on a fully wrapped mini transformer."""
    rng = Rng(seed)
    model = MiniVideoTransformer(in_dim=in_dim, heads=heads, head_dim=head_dim,
                                 depth=depth, grid=(tokens, 1, 1), n_classes=4,
                                 boundary=depth, seed=seed)
    x = rng.derive(1).normal((2, tokens, in_dim))
    labels = np.asarray(rng.derive(2).integers(0, 4, size=2))

    def run(spec):
        tape = Tape()
        trace = model.forward(tape, x, spec, labels)
        backward(tape, trace.loss)
        return analysis.RunStats(
            cached_elements=tape.memory.cached_elements_total,
            forward_ops=tape.op_counter.forward_elementary_ops,
            backward_ops=tape.op_counter.backward_elementary_ops,
            fingerprint="audit_time")

    full = run(ForwardSpec(mode="e2e", boundary=depth))
    rows = []
    for r in keep_ratios:
        mask = sample_uniform(tokens, r, rng.derive(3, int(r * 1000)))
        stats = run(ForwardSpec(mode="sbp", masks=[mask], boundary=depth))
        ratios = analysis.measure_ratios(full, stats)
        predicted = analysis.predict_time_ratio(mask.fraction)
        rows.append({
            "family": "mini_transformer", "keep_ratio": r,
            "measured": ratios["time_ratio"], "predicted": predicted,
            "rel_dev": abs(ratios["time_ratio"] - predicted) / predicted,
        })
    return rows
