"""Toy vision transformer supernet with multiplicative prunability masks.

Mask insertion points: the patch-embedding mask multiplies everything that
enters or re-enters the residual stream (input tokens, layer-norm outputs,
attention and MLP block outputs), the joint Q-K-V channel mask multiplies
q/k/v per head-dim slot, the head mask multiplies per-head context, and the
MLP mask multiplies post-GELU hidden units. With this placement a unit whose
mask is zero contributes exactly nothing downstream, which is what makes
hard masking equal to physical removal.

The one non-trivial equality is layer norm: its statistics run over the full
channel width (zeros included), so the materialized model reproduces them
from the kept channels plus two constants (full width, number of removed
channels) — see _compensated_layer_norm.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .space import KIND_HEADS, KIND_MLP, KIND_PATCH_EMBED, KIND_QKV, kept_units_for_width


@dataclass
class ToyViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 1
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    head_dim: int = 8
    mlp_dim: int = 64
    classes: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.embed_dim != self.heads * self.head_dim:
            raise ValueError(f"embed_dim {self.embed_dim} != heads*head_dim {self.heads * self.head_dim}")

    @property
    def tokens(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size ** 2 * self.channels


@dataclass
class MaskedForwardOutput:
    logits: E.Tensor
    reconstruction: E.Tensor          # (B, K, patch_dim) or None when nothing masked
    mask_positions: np.ndarray        # (B, N) bool
    mask_indices: np.ndarray          # (B, K) int


class MaskAlignmentError(Exception):
    pass


def patchify(images, patch_size):
    """(B, C, H, W) -> (B, N, patch_size^2 * C), row-major patch order."""
    b, c, h, w = images.shape
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.transpose(0, 2, 4, 3, 5, 1)  # b, gh, gw, ph, pw, c
    return np.ascontiguousarray(x.reshape(b, gh * gw, patch_size * patch_size * c))


def expand_mask(values, live_ids, full_width):
    """Scatter live-unit mask values into a full-width vector (zeros at
    removed positions) via a constant 0/1 matrix, keeping gradients."""
    scatter = np.zeros((full_width, len(live_ids)))
    scatter[np.asarray(live_ids), np.arange(len(live_ids))] = 1.0
    return E.reshape(E.matmul(E.constant(scatter), E.reshape(values, (len(live_ids), 1))),
                     (full_width,))


class Supernet:
    """Full-width transformer whose prunable units are soft-masked."""

    def __init__(self, config, rng):
        self.config = config
        c = config
        p = {}

        def w(name, shape, std=0.02):
            p[name] = E.parameter(rng.normal(0.0, std, size=shape), name=name)

        def zeros(name, shape):
            p[name] = E.parameter(np.zeros(shape), name=name)

        def ones(name, shape):
            p[name] = E.parameter(np.ones(shape), name=name)

        w("patch_w", (c.patch_dim, c.embed_dim))
        zeros("patch_b", (c.embed_dim,))
        w("pos", (c.tokens, c.embed_dim))
        w("mask_token", (c.embed_dim,))
        for l in range(c.depth):
            ones(f"ln1_g.{l}", (c.embed_dim,)); zeros(f"ln1_b.{l}", (c.embed_dim,))
            w(f"wq.{l}", (c.embed_dim, c.embed_dim)); zeros(f"bq.{l}", (c.embed_dim,))
            w(f"wk.{l}", (c.embed_dim, c.embed_dim)); zeros(f"bk.{l}", (c.embed_dim,))
            w(f"wv.{l}", (c.embed_dim, c.embed_dim)); zeros(f"bv.{l}", (c.embed_dim,))
            w(f"wo.{l}", (c.embed_dim, c.embed_dim)); zeros(f"bo.{l}", (c.embed_dim,))
            ones(f"ln2_g.{l}", (c.embed_dim,)); zeros(f"ln2_b.{l}", (c.embed_dim,))
            w(f"w1.{l}", (c.embed_dim, c.mlp_dim)); zeros(f"b1.{l}", (c.mlp_dim,))
            w(f"w2.{l}", (c.mlp_dim, c.embed_dim)); zeros(f"b2.{l}", (c.embed_dim,))
        ones("lnf_g", (c.embed_dim,)); zeros("lnf_b", (c.embed_dim,))
        w("head_w", (c.embed_dim, c.classes)); zeros("head_b", (c.classes,))
        w("dec_w", (c.embed_dim, c.patch_dim)); zeros("dec_b", (c.patch_dim,))
        self.params = p

    def encoder_param_names(self):
        return [n for n in self.params if not n.startswith("dec_")]

    def full_masks(self, bimasks, space):
        """Expand per-submodule live-order masks to full-width vectors."""
        full = {}
        for state in space.submodules:
            snap = bimasks.get(state.sid)
            if snap is None:
                raise MaskAlignmentError(f"no mask supplied for site {state.sid}")
            if snap.values.shape != (state.w_live,):
                raise MaskAlignmentError(
                    f"mask for {state.sid} has shape {snap.values.shape}, expected ({state.w_live},)")
            full[state.sid] = expand_mask(snap.values, state.live_unit_ids, state.spec.full_width)
        return full

    def forward(self, images, bimasks, space, mask_positions=None):
        """Masked forward pass.

        images: (B, C, H, W) constant array. bimasks: sid -> BiMaskSnapshot.
        mask_positions: (B, N) bool; masked patches are swapped for the
        learned token and reconstructed by the decoder.
        """
        c = self.config
        p = self.params
        masks = self.full_masks(bimasks, space)
        m_pe = masks[KIND_PATCH_EMBED]

        patches = patchify(np.asarray(images, dtype=np.float64), c.patch_size)
        b, n, _ = patches.shape
        tokens = E.add(E.matmul(E.constant(patches), p["patch_w"]), p["patch_b"])

        if mask_positions is None:
            mask_positions = np.zeros((b, n), dtype=bool)
        mask_positions = np.asarray(mask_positions, dtype=bool)
        k_masked = int(mask_positions[0].sum()) if b else 0
        if mask_positions.any():
            tokens = E.where(mask_positions[:, :, None], p["mask_token"], tokens)

        x = E.mul(E.add(tokens, p["pos"]), m_pe)
        for l in range(c.depth):
            x = self._block(x, l, masks, m_pe, b, n)
        xf = E.mul(E.layer_norm(x, p["lnf_g"], p["lnf_b"]), m_pe)

        pooled = E.tmean(xf, axis=1)
        logits = E.add(E.matmul(pooled, p["head_w"]), p["head_b"])

        reconstruction = None
        mask_idx = np.zeros((b, 0), dtype=np.int64)
        if k_masked > 0:
            counts = mask_positions.sum(axis=1)
            if not np.all(counts == k_masked):
                raise MaskAlignmentError("uneven masked-patch counts across the batch")
            mask_idx = np.stack([np.flatnonzero(row) for row in mask_positions])
            zm = E.gather_rows(xf, mask_idx)
            reconstruction = E.add(E.matmul(zm, p["dec_w"]), p["dec_b"])
        return MaskedForwardOutput(logits, reconstruction, mask_positions, mask_idx)

    def _block(self, x, l, masks, m_pe, b, n):
        c = self.config
        p = self.params
        m_qkv = E.reshape(masks[f"{KIND_QKV}{l}"], (c.heads, 1, c.head_dim))
        # attention scale folded into q's tiny mask vector instead of the
        # (B, H, N, N) score array
        m_q = E.mul(m_qkv, E.constant(1.0 / math.sqrt(c.head_dim)))
        m_head = E.reshape(masks[f"{KIND_HEADS}{l}"], (c.heads, 1, 1))
        m_mlp = masks[f"{KIND_MLP}{l}"]

        h = E.mul(E.layer_norm(x, p[f"ln1_g.{l}"], p[f"ln1_b.{l}"]), m_pe)

        def split_heads(t):
            return E.transpose(E.reshape(t, (b, n, c.heads, c.head_dim)), (0, 2, 1, 3))

        q = E.mul(split_heads(E.add(E.matmul(h, p[f"wq.{l}"]), p[f"bq.{l}"])), m_q)
        k = E.mul(split_heads(E.add(E.matmul(h, p[f"wk.{l}"]), p[f"bk.{l}"])), m_qkv)
        v = E.mul(split_heads(E.add(E.matmul(h, p[f"wv.{l}"]), p[f"bv.{l}"])), m_qkv)

        scores = E.matmul(q, E.transpose(k, (0, 1, 3, 2)))
        ctx = E.mul(E.matmul(E.softmax(scores, axis=-1), v), m_head)
        ctx = E.reshape(E.transpose(ctx, (0, 2, 1, 3)), (b, n, c.embed_dim))
        attn_out = E.mul(E.add(E.matmul(ctx, p[f"wo.{l}"]), p[f"bo.{l}"]), m_pe)
        x = E.add(x, attn_out)

        h2 = E.mul(E.layer_norm(x, p[f"ln2_g.{l}"], p[f"ln2_b.{l}"]), m_pe)
        hid = E.mul(E.gelu(E.add(E.matmul(h2, p[f"w1.{l}"]), p[f"b1.{l}"])), m_mlp)
        mlp_out = E.mul(E.add(E.matmul(hid, p[f"w2.{l}"]), p[f"b2.{l}"]), m_pe)
        return E.add(x, mlp_out)


def reconstruct_loss(output, images, patch_size):
    """Mean absolute error per pixel over masked patches only (0 if none)."""
    if output.reconstruction is None:
        return E.constant(0.0)
    patches = patchify(np.asarray(images, dtype=np.float64), patch_size)
    bidx = np.arange(patches.shape[0])[:, None]
    target = E.constant(patches[bidx, output.mask_indices])
    return E.tmean(E.tabs(E.sub(output.reconstruction, target)))


# -- materialization -----------------------------------------------------------


def _compensated_layer_norm(x, gain, bias, full_width, n_removed, eps=1e-6):
    """Layer norm matching full-width statistics from kept channels only.

    The removed channels were exactly zero in the supernet, so the full
    mean is sum(kept)/C and the full variance picks up n_removed copies of
    mu^2 from the centered zeros.
    """
    mu = E.mul(E.tsum(x, axis=-1, keepdims=True), E.constant(1.0 / full_width))
    centered = E.sub(x, mu)
    ss = E.add(E.tsum(E.mul(centered, centered), axis=-1, keepdims=True),
               E.mul(E.mul(mu, mu), E.constant(float(n_removed))))
    inv = E.powf(E.add(E.mul(ss, E.constant(1.0 / full_width)), E.constant(eps)), -0.5)
    return E.add(E.mul(E.mul(centered, inv), gain), bias)


class NotFinishedError(Exception):
    pass


class PrunedModel:
    """Dense standalone model holding only kept units.

    Forward equals the hard-masked supernet within float tolerance: matmul
    contributions of removed units were exactly zero, layer-norm statistics
    are width-compensated, and the attention scale keeps the full head_dim.
    """

    def __init__(self, config, kept, params):
        self.config = config
        self.kept = kept          # sid -> sorted np.ndarray of kept unit ids
        self.params = params      # name -> Tensor (already sliced)
        self.embed_kept = kept[KIND_PATCH_EMBED]
        self.e = len(self.embed_kept)

    @classmethod
    def from_supernet(cls, model, kept):
        c = model.config
        src = {name: t.data for name, t in model.params.items()}
        return cls._build(c, kept, src)

    @classmethod
    def from_weights(cls, config, kept, weights, already_sliced=True):
        if not already_sliced:
            return cls._build(config, kept, weights)
        params = {name: E.parameter(np.array(w), name=name) for name, w in weights.items()}
        return cls(config, kept, params)

    @classmethod
    def _build(cls, config, kept, src):
        c = config
        pe = np.asarray(kept[KIND_PATCH_EMBED], dtype=np.int64)
        p = {}

        def put(name, arr):
            p[name] = E.parameter(np.ascontiguousarray(arr), name=name)

        put("patch_w", src["patch_w"][:, pe])
        put("patch_b", src["patch_b"][pe])
        put("pos", src["pos"][:, pe])
        for l in range(c.depth):
            heads_kept = np.asarray(kept[f"{KIND_HEADS}{l}"], dtype=np.int64)
            qkv_kept = np.asarray(kept[f"{KIND_QKV}{l}"], dtype=np.int64)
            cols = np.concatenate([qkv_kept[qkv_kept // c.head_dim == h] for h in heads_kept]) \
                if heads_kept.size else np.zeros(0, dtype=np.int64)
            mlp_kept = np.asarray(kept[f"{KIND_MLP}{l}"], dtype=np.int64)
            put(f"ln1_g.{l}", src[f"ln1_g.{l}"][pe]); put(f"ln1_b.{l}", src[f"ln1_b.{l}"][pe])
            for nm in ("wq", "wk", "wv"):
                put(f"{nm}.{l}", src[f"{nm}.{l}"][np.ix_(pe, cols)])
            for nm in ("bq", "bk", "bv"):
                put(f"{nm}.{l}", src[f"{nm}.{l}"][cols])
            put(f"wo.{l}", src[f"wo.{l}"][np.ix_(cols, pe)])
            put(f"bo.{l}", src[f"bo.{l}"][pe])
            put(f"ln2_g.{l}", src[f"ln2_g.{l}"][pe]); put(f"ln2_b.{l}", src[f"ln2_b.{l}"][pe])
            put(f"w1.{l}", src[f"w1.{l}"][np.ix_(pe, mlp_kept)])
            put(f"b1.{l}", src[f"b1.{l}"][mlp_kept])
            put(f"w2.{l}", src[f"w2.{l}"][np.ix_(mlp_kept, pe)])
            put(f"b2.{l}", src[f"b2.{l}"][pe])
        put("lnf_g", src["lnf_g"][pe]); put("lnf_b", src["lnf_b"][pe])
        put("head_w", src["head_w"][pe, :])
        put("head_b", src["head_b"])
        return cls(config, kept, p)

    def _kept_per_head(self, l):
        heads_kept = np.asarray(self.kept[f"{KIND_HEADS}{l}"], dtype=np.int64)
        qkv_kept = np.asarray(self.kept[f"{KIND_QKV}{l}"], dtype=np.int64)
        if heads_kept.size == 0:
            return heads_kept, 0
        per_head = qkv_kept.size // self.config.heads
        return heads_kept, per_head

    def forward(self, images):
        c = self.config
        p = self.params
        d_removed = c.embed_dim - self.e

        def ln(x, g, bias):
            return _compensated_layer_norm(x, g, bias, c.embed_dim, d_removed)

        patches = patchify(np.asarray(images, dtype=np.float64), c.patch_size)
        b, n, _ = patches.shape
        x = E.add(E.add(E.matmul(E.constant(patches), p["patch_w"]), p["patch_b"]), p["pos"])
        for l in range(c.depth):
            heads_kept, dh = self._kept_per_head(l)
            nh = heads_kept.size
            h = ln(x, p[f"ln1_g.{l}"], p[f"ln1_b.{l}"])
            if nh > 0 and dh > 0:
                def split(t):
                    return E.transpose(E.reshape(t, (b, n, nh, dh)), (0, 2, 1, 3))
                q = split(E.add(E.matmul(h, p[f"wq.{l}"]), p[f"bq.{l}"]))
                k = split(E.add(E.matmul(h, p[f"wk.{l}"]), p[f"bk.{l}"]))
                v = split(E.add(E.matmul(h, p[f"wv.{l}"]), p[f"bv.{l}"]))
                scores = E.mul(E.matmul(q, E.transpose(k, (0, 1, 3, 2))),
                               E.constant(1.0 / math.sqrt(c.head_dim)))
                ctx = E.matmul(E.softmax(scores, axis=-1), v)
                ctx = E.reshape(E.transpose(ctx, (0, 2, 1, 3)), (b, n, nh * dh))
                x = E.add(x, E.add(E.matmul(ctx, p[f"wo.{l}"]), p[f"bo.{l}"]))
            h2 = ln(x, p[f"ln2_g.{l}"], p[f"ln2_b.{l}"])
            if p[f"w1.{l}"].shape[1] > 0:
                hid = E.gelu(E.add(E.matmul(h2, p[f"w1.{l}"]), p[f"b1.{l}"]))
                x = E.add(x, E.add(E.matmul(hid, p[f"w2.{l}"]), p[f"b2.{l}"]))
        xf = ln(x, p["lnf_g"], p["lnf_b"])
        pooled = E.tmean(xf, axis=1)
        return E.add(E.matmul(pooled, p["head_w"]), p["head_b"])


def materialize(model, space, force=False):
    """Collapse the supernet into a dense pruned model of the live units.

    Requires a finished space (every submodule decided); force bypasses that
    check and keeps whatever is currently live.
    """
    if not force and not all(s.decided for s in space.submodules):
        undecided = [s.sid for s in space.submodules if not s.decided]
        raise NotFinishedError(f"submodules still undecided: {undecided}")
    kept = {s.sid: np.asarray(s.live_unit_ids, dtype=np.int64) for s in space.submodules}
    return PrunedModel.from_supernet(model, kept)


def hardened_masks(space):
    """Constant all-ones masks over live units (the hard {0,1} limit)."""
    from .scores import BiMaskSnapshot
    snaps = {}
    for s in space.submodules:
        snaps[s.sid] = BiMaskSnapshot(sid=s.sid,
                                      values=E.constant(np.ones(s.w_live)),
                                      permutation=np.arange(s.w_live))
    return snaps


# -- checkpoint io ---------------------------------------------------------------


def save_checkpoint(weights, bin_path, manifest_path, extra=None):
    """Flat little-endian float64 blob plus a JSON manifest of offsets."""
    names = sorted(weights)
    manifest = {"dtype": "<f8", "tensors": [], "extra": extra or {}}
    offset = 0
    with open(bin_path, "wb") as fh:
        for name in names:
            arr = np.ascontiguousarray(np.asarray(weights[name], dtype="<f8"))
            fh.write(arr.tobytes())
            manifest["tensors"].append({"name": name, "shape": list(arr.shape),
                                        "offset": offset, "nbytes": arr.nbytes})
            offset += arr.nbytes
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(bin_path, manifest_path):
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    raw = open(bin_path, "rb").read()
    weights = {}
    for t in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype="<f8", count=t["nbytes"] // 8,
                            offset=t["offset"]).reshape(t["shape"])
        weights[t["name"]] = np.array(arr)
    return weights, manifest.get("extra", {})
