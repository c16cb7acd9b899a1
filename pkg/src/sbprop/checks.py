"""Self-contained correctness audits: finite-difference gradient checks for
every differentiable op, and wrapped-backward vs masked-oracle equivalence
on randomized mini-transformer configurations.

Used by the ``audit-grad`` CLI subcommand and by the acceptance tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (
    DIFFERENTIABLE_OPS,
    FULL,
    Tape,
    backward,
    finite_difference_grad,
    masked_backward,
)
from .models import ForwardSpec, MiniVideoTransformer
from .sbp import SampleMask, mask_size
from .tensor import Rng

__all__ = ["CheckResult", "op_gradient_checks", "sbp_oracle_checks", "relative_error"]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| scaled by the larger gradient magnitude (floored at 1e-2
    so near-zero gradients compare absolutely)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-2)
    return float(np.abs(a - b).max(initial=0.0) / denom)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


# one input configuration per op: (op, attrs, input shapes, which inputs to check)
def _op_cases(rng: Rng):
    b, n, c, heads = 2, 4, 6, 2
    labels = np.asarray(rng.integers(0, 3, size=4))
    return [
        ("matmul", {}, [(3, 4), (4, 5)]),
        ("matmul", {"transpose_b": True}, [(2, 3, 4), (2, 5, 4)]),
        ("add", {}, [(3, 4), (3, 4)]),
        ("add_bias", {}, [(3, 4), (4,)]),
        ("add_rows", {}, [(b, n, c), (n, c)]),
        ("mul", {}, [(3, 4), (3, 4)]),
        ("scale", {"c": 1.7}, [(3, 4)]),
        ("relu", {}, [(3, 5)]),
        ("gelu", {}, [(3, 5)]),
        ("layer_norm", {"eps": 1e-5}, [(b, n, c), (c,), (c,)]),
        ("softmax", {}, [(3, 5)]),
        ("add_causal_mask", {}, [(1, heads, n, n)]),
        ("gather_tokens", {"idx": (0, 2), "axis": 1}, [(b, n, c)]),
        ("select_token", {"i": 1}, [(b, n, c)]),
        ("stack_tokens", {}, [(b, c), (b, c), (b, c)]),
        ("split_heads", {"h": heads}, [(b, n, c)]),
        ("merge_heads", {}, [(b, heads, n, c // heads)]),
        ("mean_tokens", {}, [(b, n, c)]),
        ("sum_all", {}, [(3, 4)]),
        ("cross_entropy", {"labels": labels}, [(4, 3)]),
    ]


def _record_probe(op_name, attrs, arrays, check_idx, perturbed):
    """Build a tape applying the op (softmax chained after the causal mask so
    its -inf entries stay clear of the numerics); returns (tape, out, leaves)."""
    tape = Tape(counting=False, charging=False)
    leaves = []
    for j, arr in enumerate(arrays):
        val = perturbed if j == check_idx else arr
        leaves.append(tape.leaf(val, requires_grad=(j == check_idx), kind="data"))
    out = tape.record(op_name, leaves, dict(attrs), cache=FULL)
    if op_name == "add_causal_mask":
        out = tape.record("softmax", [out], cache=FULL)
    return tape, out, leaves


def op_gradient_checks(trials: int = 10, seed: int = 1234, eps: float = 1e-3,
                       tolerance: float = 1e-4) -> list[CheckResult]:
    """Central-difference validation of every differentiable op.

    The scalar probe is a fixed random projection of the op output, so every
    output coordinate participates in the gradient being checked.
    """
    results = []
    rng = Rng(seed)
    covered = {name for name, _, _ in _op_cases(Rng(0))}
    missing = set(DIFFERENTIABLE_OPS) - covered
    if missing:
        raise AssertionError(f"ops without a gradient-check case: {sorted(missing)}")
    for case_num, (op_name, attrs, shapes) in enumerate(_op_cases(rng)):
        case_rng = rng.derive(case_num)
        worst = 0.0
        for _ in range(trials):
            arrays = [case_rng.normal(s) for s in shapes]
            if op_name == "relu":
                # keep samples away from the kink
                arrays = [a + 0.2 * np.sign(a) for a in arrays]
            _, probe_out, _ = _record_probe(op_name, attrs, arrays, -1, None)
            proj = case_rng.normal(probe_out.shape)
            for check_idx in range(len(shapes)):
                tape, out, leaves = _record_probe(op_name, attrs, arrays,
                                                  check_idx, arrays[check_idx])
                prod = tape.record("mul", [out, tape.leaf(proj, kind="data")], cache=FULL)
                loss = tape.record("sum_all", [prod], cache=FULL)
                g_ad = backward(tape, loss)[leaves[check_idx]]

                def f(x, _i=check_idx):
                    _, o, _lv = _record_probe(op_name, attrs, arrays, _i, x)
                    return float((o.value * proj).sum())

                g_fd = finite_difference_grad(f, arrays[check_idx], eps=eps)
                worst = max(worst, relative_error(g_ad, g_fd))
        results.append(CheckResult(op_name, worst, tolerance))
    return results


def random_transformer_config(rng: Rng) -> dict:
    heads = int(rng.integers(1, 5))
    head_dim = int(rng.integers(2, 9))
    depth = int(rng.integers(1, 7))
    t = int(rng.integers(2, 9))
    s = int(rng.integers(1, 3))
    while t * s * s > 32:
        t = max(2, t // 2)
    return {
        "heads": heads,
        "head_dim": head_dim,
        "depth": depth,
        "grid": (t, s, s),
        "in_dim": int(rng.integers(3, 10)),
        "n_classes": int(rng.integers(2, 5)),
    }


def sbp_oracle_checks(n_configs: int = 20, seed: int = 7, tolerance: float = 1e-9
                      ) -> list[CheckResult]:
    """Wrapped-model gradients vs the masked dense-backprop oracle."""
    results = []
    rng = Rng(seed)
    for i in range(n_configs):
        cfg_rng = rng.derive(i)
        cfg = random_transformer_config(cfg_rng)
        depth = cfg["depth"]
        boundary = int(cfg_rng.integers(0, depth + 1))
        model = MiniVideoTransformer(boundary=boundary, seed=int(cfg_rng.integers(0, 2**31)), **cfg)
        n = model.n_tokens
        batch = int(cfg_rng.integers(1, 3))
        x = cfg_rng.normal((batch, n, cfg["in_dim"]))
        labels = np.asarray(cfg_rng.integers(0, cfg["n_classes"], size=batch))
        k = mask_size(n, float(cfg_rng.uniform((1,), 0.2, 1.0)[0]))
        mask = SampleMask(tuple(cfg_rng.choice_sorted(n, k)), n)

        tape_sbp = Tape(counting=False)
        trace_sbp = model.forward(tape_sbp, x, ForwardSpec(mode="sbp", masks=[mask]), labels)
        grads_sbp = backward(tape_sbp, trace_sbp.loss)
        by_name_sbp = {name: grads_sbp[node]
                       for name, node in trace_sbp.param_leaves.items()}

        tape_ref = Tape(counting=False)
        trace_ref = model.forward(tape_ref, x, ForwardSpec(mode="e2e"), labels)
        grads_ref = masked_backward(tape_ref, trace_ref.loss, mask.kept,
                                    trace_ref.boundary_nodes)
        by_name_ref = {name: grads_ref[node]
                       for name, node in trace_ref.param_leaves.items()}

        worst = max(relative_error(by_name_sbp[k2], by_name_ref[k2]) for k2 in by_name_sbp)
        desc = (f"L={depth} b={boundary} h={cfg['heads']} d={cfg['head_dim']} "
                f"n={n} |mask|={len(mask)}")
        results.append(CheckResult(desc, worst, tolerance))
    return results
