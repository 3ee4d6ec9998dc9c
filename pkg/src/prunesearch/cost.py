"""Differentiable compute-cost model for the toy transformer.

g maps the per-submodule architecture distributions to an expected FLOPs
fraction of the full model. The continuous extension evaluates the exact
closed-form MAC polynomial at expected widths (a product of expectations for
the bilinear patch-embed x channel and head x channel terms), so it is
smooth, cheap, and exactly equal to the discrete count whenever every
distribution is one-hot. FLOPs are multiply-accumulates in the weight
matmuls; normalizations, activations and residual adds are not counted.

An independent instrumented counter walks the materialized forward shape by
shape and is used both to validate calibration (zero residual required) and
as the discrete-cost oracle.
"""

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .space import KIND_HEADS, KIND_MLP, KIND_PATCH_EMBED, KIND_QKV


class CalibrationError(Exception):
    pass


@dataclass
class ArchWidths:
    """Concrete widths of one architecture: patch-embed channels, and
    per-layer (live heads, per-head qkv channels, mlp hidden)."""
    embed: int
    heads: list
    head_channels: list
    mlp: list


@dataclass
class CostCoefficients:
    tokens: int
    patch_dim: int
    classes: int
    depth: int
    heads_full: int
    full_flops: int
    full_params: int

    def polynomial(self, embed, attn_channels, mlp):
        """MACs as a function of widths; attn_channels[l] = heads*per-head.

        Inputs may be floats/Tensors (expected widths) or ints; the same
        expression serves both the differentiable and the discrete path.
        """
        n, p = self.tokens, self.patch_dim
        total = embed * (n * p + self.classes)
        for l in range(self.depth):
            total = total + attn_channels[l] * (4 * n) * embed \
                          + attn_channels[l] * (2 * n * n) \
                          + mlp[l] * (2 * n) * embed
        return total


def count_macs(widths, tokens, patch_dim, classes):
    """Instrumented MAC counter: walk the pruned forward one matmul at a time."""
    macs = 0
    sites = []

    def mm(a_rows, inner, b_cols, what):
        nonlocal macs
        macs += a_rows * inner * b_cols
        sites.append((what, a_rows, inner, b_cols))

    e = widths.embed
    mm(tokens, patch_dim, e, "patch_embed")
    for h, d, m in zip(widths.heads, widths.head_channels, widths.mlp):
        mm(tokens, e, 3 * h * d, "qkv_proj")
        for _ in range(h):
            mm(tokens, d, tokens, "attn_scores")
            mm(tokens, tokens, d, "attn_context")
        mm(tokens, h * d, e, "attn_out")
        mm(tokens, e, m, "mlp_in")
        mm(tokens, m, e, "mlp_out")
    mm(1, e, classes, "classifier")
    return macs


def count_params(widths, tokens, patch_dim, classes):
    """Exact parameter count of the pruned model (masks and decoder excluded)."""
    e = widths.embed
    params = patch_dim * e + e       # patch projection + bias
    params += tokens * e             # positional embedding
    for h, d, m in zip(widths.heads, widths.head_channels, widths.mlp):
        hd = h * d
        params += 3 * (e * hd + hd)  # q, k, v
        params += hd * e + e         # output projection
        params += e * m + m + m * e + e  # mlp in/out
        params += 4 * e              # two layer norms
    params += 2 * e                  # final layer norm
    params += e * classes + classes  # classifier
    return params


def full_widths(model_config):
    return ArchWidths(
        embed=model_config.embed_dim,
        heads=[model_config.heads] * model_config.depth,
        head_channels=[model_config.head_dim] * model_config.depth,
        mlp=[model_config.mlp_dim] * model_config.depth,
    )


def calibrate(model_config):
    """Derive coefficients from the closed form and prove them against the
    instrumented counter at a spread of discrete settings (zero residual)."""
    n = (model_config.image_size // model_config.patch_size) ** 2
    p = model_config.patch_size ** 2 * model_config.channels
    fw = full_widths(model_config)
    coeffs = CostCoefficients(
        tokens=n, patch_dim=p, classes=model_config.classes,
        depth=model_config.depth, heads_full=model_config.heads,
        full_flops=count_macs(fw, n, p, model_config.classes),
        full_params=count_params(fw, n, p, model_config.classes),
    )

    settings = [fw]
    half_pe = full_widths(model_config)
    half_pe.embed = model_config.embed_dim // 2
    settings.append(half_pe)
    one_head = full_widths(model_config)
    one_head.heads = [model_config.heads - 1] + one_head.heads[1:]
    settings.append(one_head)
    low_mlp = full_widths(model_config)
    low_mlp.mlp = [m // 4 for m in low_mlp.mlp]
    settings.append(low_mlp)
    low_qkv = full_widths(model_config)
    low_qkv.head_channels = [max(1, d // 4) for d in low_qkv.head_channels]
    settings.append(low_qkv)
    mixed = ArchWidths(embed=model_config.embed_dim // 2,
                       heads=[max(1, h - 2) for h in fw.heads],
                       head_channels=[max(1, d // 2) for d in fw.head_channels],
                       mlp=[m // 2 for m in fw.mlp])
    settings.append(mixed)

    for w in settings:
        counted = count_macs(w, n, p, model_config.classes)
        predicted = coeffs.polynomial(w.embed, [h * d for h, d in zip(w.heads, w.head_channels)], w.mlp)
        if counted != predicted:
            raise CalibrationError(
                f"polynomial {predicted} != instrumented count {counted} at setting {w}")
    return coeffs


def expected_width(state, p=None):
    """Differentiable expected kept-unit count: sum_k width_k * p_k."""
    p = state.p() if p is None else p
    w = E.constant(np.asarray(state.widths_live, dtype=np.float64))
    return E.tsum(E.mul(w, p))


def g_of_v(space, coeffs, p_map=None):
    """Expected FLOPs fraction of the full model; differentiable in every alpha."""
    if coeffs.full_flops <= 0:
        raise CalibrationError("cost coefficients are not calibrated")
    p_map = p_map or {}
    embed = None
    qkv = {}
    heads = {}
    mlp = {}
    for state in space.submodules:
        ew = expected_width(state, p=p_map.get(state.sid))
        if state.spec.kind == KIND_PATCH_EMBED:
            embed = ew
        elif state.spec.kind == KIND_QKV:
            qkv[state.spec.layer_index] = ew
        elif state.spec.kind == KIND_HEADS:
            heads[state.spec.layer_index] = ew
        elif state.spec.kind == KIND_MLP:
            mlp[state.spec.layer_index] = ew
    # heads x per-head channels: expected qkv units are spread evenly over
    # the full head count, so live-head channels = heads * (qkv / H_full)
    attn_channels = [E.mul(heads[l], E.mul(qkv[l], E.constant(1.0 / coeffs.heads_full)))
                     for l in range(coeffs.depth)]
    flops = coeffs.polynomial(embed, attn_channels, [mlp[l] for l in range(coeffs.depth)])
    return E.mul(flops, E.constant(1.0 / coeffs.full_flops))


def widths_from_export(export, model_config):
    """Concrete ArchWidths from an architecture export document."""
    embed = model_config.embed_dim
    heads = [model_config.heads] * model_config.depth
    head_ch = [model_config.head_dim] * model_config.depth
    mlp = [model_config.mlp_dim] * model_config.depth
    for sub in export["submodules"]:
        kept = len(sub["kept_units"])
        if sub["kind"] == KIND_PATCH_EMBED:
            embed = kept
        elif sub["kind"] == KIND_HEADS:
            heads[sub["layer"]] = kept
        elif sub["kind"] == KIND_QKV:
            head_ch[sub["layer"]] = kept // model_config.heads
        elif sub["kind"] == KIND_MLP:
            mlp[sub["layer"]] = kept
    return ArchWidths(embed=embed, heads=heads, head_channels=head_ch, mlp=mlp)


def discrete_cost(export, model_config):
    """Exact (flops, params) of the architecture described by an export."""
    n = (model_config.image_size // model_config.patch_size) ** 2
    p = model_config.patch_size ** 2 * model_config.channels
    w = widths_from_export(export, model_config)
    return (count_macs(w, n, p, model_config.classes),
            count_params(w, n, p, model_config.classes))


def cost_report(export, model_config, coeffs):
    flops, params = discrete_cost(export, model_config)
    return {
        "flops": flops,
        "params": params,
        "flops_fraction": flops / coeffs.full_flops,
        "params_fraction": params / coeffs.full_params,
    }
