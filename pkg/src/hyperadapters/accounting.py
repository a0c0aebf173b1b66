"""Closed-form trainable-parameter counts and the mode comparison table.

Counting convention (matching the formulas exactly): adapter weights and
adapter biases are included, whether learnt directly or generated;
hypernetwork-internal biases (the bottleneck bias and the four head
biases) and pooling-MLP biases are excluded. The tests hold these
formulas equal to exact censuses of instantiated modules under the same
convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CountInputs:
    l: int          # layers on the side(s) being counted
    d: int          # model width
    a: int          # adapter bottleneck
    t: int = 1      # number of tasks
    b: int = 16     # hypernetwork bottleneck
    e_t: int = 8    # task-embedding width
    e_l: int = 8    # layer-embedding width

    def __post_init__(self):
        for name in ("l", "d", "a", "t", "b", "e_t", "e_l"):
            if getattr(self, name) < 1:
                raise ValueError(f"CountInputs.{name} must be >= 1")


def adapter_cost(a, d):
    """Parameters of one adapter: two projections plus their biases."""
    return 2 * a * d + a + d


def count_adapters(l, a, d):
    """Directly learnt adapters, one per layer."""
    return l * adapter_cost(a, d)


def count_task_hypernet_side(c: CountInputs):
    """One task-conditioned generator: task and layer embeddings, the
    bottleneck layer, and four heads emitting one adapter's parameters."""
    return c.t * c.e_t + c.l * c.e_l + (c.e_t + c.e_l) * c.b + c.b * adapter_cost(c.a, c.d)


def count_task_hypernet(c: CountInputs):
    """Task-conditioned generators for both sides (hence the doubling)."""
    return 2 * count_task_hypernet_side(c)


def count_input_hypernet_side(c: CountInputs):
    """One input-conditioned generator: pooling MLP, layer embeddings,
    bottleneck layer (fed the model width instead of a task embedding),
    and the four heads."""
    return 2 * c.d * c.d + c.l * c.e_l + (c.d + c.e_l) * c.b + c.b * adapter_cost(c.a, c.d)


def count_hyperdecoder(c: CountInputs):
    """Manual adapters in the encoder plus an input-conditioned generator
    for the decoder. Note: matches the published closed form, which
    leaves the decoder's layer-embedding table (l * e_l) out of its
    expression; the instantiation oracle in the tests documents this."""
    return count_adapters(c.l, c.a, c.d) + 2 * c.d * c.d + (c.d + c.e_l) * c.b + c.b * adapter_cost(c.a, c.d)


def trainable_fraction(trainable_count, base_count):
    """Percentage of the base model the trainable set amounts to."""
    if base_count <= 0:
        raise ValueError("trainable_fraction: base parameter count must be positive")
    return 100.0 * trainable_count / base_count


def census_count(named_arrays):
    """Exact parameter count of an instantiated set: sum of element counts.

    Unlike the closed forms above this includes every stored array
    (hypernet-internal biases, pooling-MLP biases, layer embeddings)."""
    return int(sum(int(np.prod(t.shape)) if t.shape else 1 for t in named_arrays.values()))


def side_count(mode, n_layers, c: CountInputs):
    """Formula count for one side of the model under an adaptation mode."""
    cc = CountInputs(l=n_layers, d=c.d, a=c.a, t=c.t, b=c.b, e_t=c.e_t, e_l=c.e_l)
    if mode == "none":
        return 0
    if mode == "manual":
        return count_adapters(cc.l, cc.a, cc.d)
    if mode == "task":
        return count_task_hypernet_side(cc)
    if mode == "generated":
        return count_input_hypernet_side(cc)
    raise ValueError(f"unknown adaptation mode {mode!r}")


def mode_trainable_count(enc_mode, dec_mode, n_enc_layers, n_dec_layers,
                         enc_inputs: CountInputs, dec_inputs: CountInputs):
    return side_count(enc_mode, n_enc_layers, enc_inputs) + side_count(
        dec_mode, n_dec_layers, dec_inputs
    )


def comparison_rows(mode_table, base_count):
    """Rows (label, trainable_count, fraction_pct) for a mode table of
    {label: (enc_mode, dec_mode, enc_inputs, dec_inputs, n_enc, n_dec)}."""
    rows = []
    for label, (enc_mode, dec_mode, enc_in, dec_in, n_enc, n_dec) in mode_table.items():
        if label == "full-finetune":
            count = base_count
        else:
            count = mode_trainable_count(enc_mode, dec_mode, n_enc, n_dec, enc_in, dec_in)
        rows.append((label, count, trainable_fraction(count, base_count)))
    return rows


def format_table(rows, headers):
    """Aligned text table for a list of row tuples."""
    cells = [[str(h) for h in headers]] + [
        [x if isinstance(x, str) else (f"{x:.4f}" if isinstance(x, float) else str(x)) for x in row]
        for row in rows
    ]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for r_i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if r_i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
