"""Occlusion-invariant pretraining objective.

Each sample gets N distinct random masks. Visible tokens are encoded on
their own, a decoder fills hidden slots with one shared learnable mask
token plus positional information, and the pooled decoder outputs are
pulled toward the pooled full-view representation by negative cosine
similarity while a total-coding-rate term keeps the view batches from
collapsing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .backbone import Backbone, EncoderConfig, Linear, TransformerEncoder, positional_encoding, trunc_normal
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor, as_tensor, expand, parameter, reshape, scatter_rows, swapaxes, take_batch, take_rows


@dataclass
class MaskConfig:
    ratio: float = 0.8
    count: int = 20
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"mask ratio must lie strictly inside (0, 1), got {self.ratio}")
        if self.count < 1:
            raise ConfigError(f"mask count must be positive, got {self.count}")


@dataclass
class TCRConfig:
    """Distortion and balance settings for the coding-rate regularizer.

    `epsilon` is the distortion scale (default sqrt(0.2), i.e. epsilon^2 = 0.2).
    `lam` multiplies the similarity term by default; `lambda_target` flips it
    onto the coding-rate term instead. `tcr_weight` scales the coding-rate
    term and setting it to zero removes the term for ablations.
    """

    epsilon: float = math.sqrt(0.2)
    lam: float = 100.0
    lambda_target: str = "sim"
    tcr_weight: float = 1.0

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.lam < 0.0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.lambda_target not in ("sim", "tcr"):
            raise ConfigError(f"lambda_target must be 'sim' or 'tcr', got {self.lambda_target!r}")
        if self.tcr_weight < 0.0:
            raise ConfigError(f"tcr_weight must be nonnegative, got {self.tcr_weight}")


@dataclass
class MaskSet:
    """N boolean masks over p patch positions; True marks a hidden patch."""

    masks: np.ndarray            # (N, p) bool
    visible: np.ndarray          # (N, v) int, ascending
    hidden: np.ndarray           # (N, h) int, ascending

    @property
    def count(self) -> int:
        return self.masks.shape[0]

    @property
    def positions(self) -> int:
        return self.masks.shape[1]


def hidden_count(p: int, ratio: float) -> int:
    """round(ratio * p), clamped so at least one patch stays on each side."""
    h = int(round(ratio * p))
    return min(max(h, 1), p - 1)


def sample_masks(p: int, cfg: MaskConfig, rng: np.random.Generator | None = None) -> MaskSet:
    """Draw N distinct uniform h-subsets of positions, resampling duplicates."""
    if p < 2:
        raise ConfigError(f"masking needs at least 2 patch positions, got {p}")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    h = hidden_count(p, cfg.ratio)
    limit = math.comb(p, h)
    if cfg.count > limit:
        raise ConfigError(
            f"{cfg.count} distinct masks requested but only C({p},{h})={limit} exist"
        )
    chosen: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    attempts = 0
    while len(chosen) < cfg.count:
        attempts += 1
        if attempts > 1000 * cfg.count + 1000:
            raise ConfigError(f"mask sampling failed to find {cfg.count} distinct masks")
        pick = tuple(sorted(rng.choice(p, size=h, replace=False).tolist()))
        if pick in seen:
            continue
        seen.add(pick)
        chosen.append(pick)
    masks = np.zeros((cfg.count, p), dtype=bool)
    for i, pick in enumerate(chosen):
        masks[i, list(pick)] = True
    hidden = np.array(chosen, dtype=np.int64)
    visible = np.array([np.flatnonzero(~m) for m in masks], dtype=np.int64)
    return MaskSet(masks=masks, visible=visible, hidden=hidden)


class Decoder:
    """Transformer decoder with a shared learnable mask token.

    The block configuration mirrors the encoder's; depth defaults to 4.
    An optional d->d reconstruction head supports the masked-autoencoder
    baseline objective.
    """

    def __init__(self, encoder_cfg: EncoderConfig, depth: int = 4,
                 with_recon_head: bool = False, seed: int = 0):
        cfg = EncoderConfig(
            model_dim=encoder_cfg.model_dim,
            heads=encoder_cfg.heads,
            depth=depth,
            ffn_multiplier=encoder_cfg.ffn_multiplier,
            dropout=encoder_cfg.dropout,
            pre_norm=encoder_cfg.pre_norm,
        )
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.mask_token = parameter(trunc_normal(rng, (cfg.model_dim,)))
        self.blocks = TransformerEncoder(cfg, rng)
        self.recon_head = Linear(cfg.model_dim, cfg.model_dim, rng) if with_recon_head else None

    def __call__(self, x: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        return self.blocks(x, training, rng)

    def named_params(self) -> dict[str, Tensor]:
        out = {"mask_token": self.mask_token}
        out.update(self.blocks.named_tensors(""))
        if self.recon_head is not None:
            out.update(self.recon_head.named_tensors("recon."))
        return out


# -- single-view operations ---------------------------------------------


def _mask_indices(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = np.asarray(mask, dtype=bool)
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def encode_visible(tokens_pe: Tensor, mask: np.ndarray, backbone: Backbone,
                   training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Run the encoder on visible token rows only; hidden tokens never enter it."""
    visible, _ = _mask_indices(mask)
    if tokens_pe.data.shape[-2] != mask.shape[-1]:
        raise ShapeError(f"mask length {mask.shape[-1]} != patch count {tokens_pe.data.shape[-2]}")
    return backbone.encode(take_rows(tokens_pe, visible), training, rng)


def assemble_decoder_input(z_vis: Tensor, mask: np.ndarray, decoder: Decoder) -> Tensor:
    """Scatter encoded visible rows, fill hidden slots with the shared mask
    token, and add the positional table over all positions."""
    visible, hidden = _mask_indices(mask)
    p = mask.shape[-1]
    d = decoder.cfg.model_dim
    placed = scatter_rows(z_vis, visible, p)
    if hidden.size:
        token_block = expand(reshape(decoder.mask_token, (1, d)), (hidden.size, d))
        placed = placed + scatter_rows(token_block, hidden, p)
    pe = positional_encoding(p, d, dtype=z_vis.data.dtype)
    return placed + as_tensor(pe, z_vis)


def decode_full(z_vis: Tensor, mask: np.ndarray, decoder: Decoder,
                training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Decode the assembled p-length sequence; output has one row per patch."""
    return decoder(assemble_decoder_input(z_vis, mask, decoder), training, rng)


def masked_view_representation(x: Tensor, mask: np.ndarray, backbone: Backbone,
                               decoder: Decoder, training: bool = False,
                               rng: np.random.Generator | None = None) -> Tensor:
    """Pooled decoder output for one masked view of one sample."""
    tokens_pe = backbone.tokens_with_pe(x, training)
    z_vis = encode_visible(tokens_pe, mask, backbone, training, rng)
    return ops.mean_pool(decode_full(z_vis, mask, decoder, training, rng))


# -- losses ---------------------------------------------------------------


def sim_loss(z: Tensor, views) -> Tensor:
    """Negative mean cosine similarity between z and each view."""
    views = list(views)
    if not views:
        raise ConfigError("sim_loss needs at least one view")
    zn = ops.l2_normalize(z)
    total = None
    for view in views:
        dot = (zn * ops.l2_normalize(view)).sum()
        total = dot if total is None else total + dot
    return total * (-1.0 / len(views))


def _tcr_from_normalized(zn: Tensor, epsilon: float) -> Tensor:
    """Coding rate of row batches that are already unit-normalized.

    Accepts (b, d) or a stack (N, b, d); returns a scalar (mean over the
    stack). The Gram matrix is d x d: I + (d / (b * eps^2)) Z^T Z.
    """
    batched = zn.data.ndim == 3
    b = zn.data.shape[-2]
    d = zn.data.shape[-1]
    scale = d / (b * epsilon * epsilon)
    zt = swapaxes(zn, -1, -2)
    gram = zt @ zn * scale + as_tensor(np.eye(d, dtype=zn.data.dtype), zn)
    half_logdet = ops.logdet_psd(gram) * 0.5
    return half_logdet.mean() if batched else half_logdet


def tcr_loss(zbatch: Tensor, cfg: TCRConfig) -> Tensor:
    """Total coding rate of a (b, d) batch of pooled representations."""
    if zbatch.data.ndim != 2:
        raise ShapeError(f"tcr_loss expects a (b, d) batch, got {zbatch.data.shape}")
    if not np.isfinite(zbatch.data).all():
        raise NumericError("tcr_loss received non-finite representations")
    return _tcr_from_normalized(ops.l2_normalize(zbatch), cfg.epsilon)


def masked_mse(recon: Tensor, target: np.ndarray, hidden: np.ndarray) -> Tensor:
    """Squared error averaged over hidden-row entries only; zero when nothing is hidden."""
    if hidden.size == 0:
        return as_tensor(np.zeros((), dtype=recon.data.dtype), recon)
    diff = take_rows(recon, hidden) - as_tensor(target[hidden], recon)
    return (diff * diff).mean()


def _stack_masksets(masksets: list[MaskSet]) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-sample mask indices into (b*N, v) and (b*N, h) arrays."""
    visible = np.stack([ms.visible for ms in masksets])   # (b, N, v)
    hidden = np.stack([ms.hidden for ms in masksets])     # (b, N, h)
    b, n, v = visible.shape
    return visible.reshape(b * n, v), hidden.reshape(b * n, hidden.shape[2])


def lof_loss(x: Tensor, backbone: Backbone, decoder: Decoder,
             maskcfg: MaskConfig, tcrcfg: TCRConfig,
             rng: np.random.Generator | None = None,
             masks: list[MaskSet] | None = None,
             training: bool = True) -> tuple[Tensor, dict]:
    """Full pretraining objective over a batch.

    Per sample: one full-view pooled representation and N masked-view
    representations from a fresh MaskSet. The loss combines the negative
    cosine similarity between full and masked views with the mean
    per-view coding rate of the masked-view batches (maximized), weighted
    per the TCRConfig switches. Returns (loss, metrics).
    """
    if x.data.ndim != 3:
        raise ShapeError(f"lof_loss expects a (b, m, t) batch, got {x.data.shape}")
    b = x.data.shape[0]
    tokens_pe = backbone.tokens_with_pe(x, training)
    p, d = tokens_pe.data.shape[-2], tokens_pe.data.shape[-1]

    if masks is None:
        if rng is None:
            rng = np.random.default_rng(maskcfg.rng_seed)
        # Splittable per-sample streams: batches could be prepared concurrently.
        masks = [sample_masks(p, maskcfg, r) for r in rng.spawn(b)]
    n = masks[0].count
    vis_idx, hid_idx = _stack_masksets(masks)
    h = hid_idx.shape[1]

    # Full view: plain encoder path.
    z_full = ops.mean_pool(backbone.encode(tokens_pe, training, rng))       # (b, d)

    # Masked views, all samples and masks stacked into one batch axis.
    tok_rep = reshape(expand(reshape(tokens_pe, (b, 1, p, d)), (b, n, p, d)), (b * n, p, d))
    z_vis = backbone.encode(take_rows(tok_rep, vis_idx), training, rng)     # (b*n, v, d)
    placed = scatter_rows(z_vis, vis_idx, p)
    if h:
        token_block = expand(reshape(decoder.mask_token, (1, 1, d)), (b * n, h, d))
        placed = placed + scatter_rows(token_block, hid_idx, p)
    pe = positional_encoding(p, d, dtype=placed.data.dtype)
    dec_out = decoder(placed + as_tensor(pe, placed), training, rng)        # (b*n, p, d)
    views = ops.mean_pool(dec_out)                                          # (b*n, d)

    zn_full = ops.l2_normalize(z_full)
    zn_views = ops.l2_normalize(views)
    cos = (reshape(zn_full, (b, 1, d)) * reshape(zn_views, (b, n, d))).sum(axis=-1)  # (b, n)
    loss_sim = -cos.mean()

    if not np.isfinite(views.data).all():
        raise NumericError("lof_loss produced non-finite masked-view representations")
    loss_tcr = _tcr_from_normalized(swapaxes(reshape(zn_views, (b, n, d)), 0, 1), tcrcfg.epsilon)

    sim_weight = tcrcfg.lam if tcrcfg.lambda_target == "sim" else 1.0
    tcr_weight = tcrcfg.tcr_weight * (tcrcfg.lam if tcrcfg.lambda_target == "tcr" else 1.0)
    total = loss_sim * sim_weight - loss_tcr * tcr_weight

    metrics = {
        "sim_loss": float(loss_sim.data),
        "tcr_mean": float(loss_tcr.data),
        "cos_mean": float(cos.data.mean()),
        "cos_min": float(cos.data.min()),
        "cos_max": float(cos.data.max()),
    }
    return total, metrics


def mae_recon_loss(x: Tensor, backbone: Backbone, decoder: Decoder,
                   maskcfg: MaskConfig, rng: np.random.Generator | None = None,
                   masks: list[np.ndarray] | None = None,
                   training: bool = True) -> Tensor:
    """Masked-autoencoder baseline: reconstruct hidden patch tokens.

    One mask per sample; the target is the patcher output (token space,
    no positional table), treated as constant. The error is averaged over
    hidden token entries only.
    """
    if decoder.recon_head is None:
        raise ConfigError("mae_recon_loss needs a decoder built with a reconstruction head")
    if x.data.ndim != 3:
        raise ShapeError(f"mae_recon_loss expects a (b, m, t) batch, got {x.data.shape}")
    b = x.data.shape[0]
    tokens = backbone.patcher(x, training)                                   # (b, p, d)
    p, d = tokens.data.shape[-2], tokens.data.shape[-1]
    pe = positional_encoding(p, d, dtype=tokens.data.dtype)
    tokens_pe = tokens + as_tensor(pe, tokens)
    target = tokens.data.copy()

    if masks is None:
        if rng is None:
            rng = np.random.default_rng(maskcfg.rng_seed)
        one = MaskConfig(ratio=maskcfg.ratio, count=1, rng_seed=maskcfg.rng_seed)
        masks = [sample_masks(p, one, r).masks[0] for r in rng.spawn(b)]

    total = None
    hidden_entries = 0
    for j in range(b):
        visible, hidden = _mask_indices(masks[j])
        sample_tokens = reshape(take_batch(tokens_pe, np.array([j])), (p, d))
        z_vis = backbone.encode(take_rows(sample_tokens, visible), training, rng)
        dec = decode_full(z_vis, masks[j], decoder, training, rng)
        recon = decoder.recon_head(dec)
        if hidden.size == 0:
            continue
        diff = take_rows(recon, hidden) - as_tensor(target[j][hidden], recon)
        err = (diff * diff).sum()
        total = err if total is None else total + err
        hidden_entries += hidden.size * d
    if total is None:
        return as_tensor(np.zeros((), dtype=tokens.data.dtype), tokens)
    return total * (1.0 / hidden_entries)
