"""Contrastive and segmentation losses.

Three families: a per-level NT-Xent over global embeddings, a dense
supervised contrastive loss over local feature maps, and soft Dice with
deep supervision. Multi-scale variants are weighted sums over the three
head levels, weights ordered like the levels (last entry = deepest
encoder / finest decoder level, which carries the 0.6 default).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import derive_seed

DEFAULT_TEMPERATURE = 0.07
DEFAULT_LEVEL_WEIGHTS = (0.2, 0.2, 0.6)
DENOMINATOR_MODES = ("standard", "as-written")
DICE_EPS = 1e-5


class DegenerateBatchWarning(UserWarning):
    """A contrastive input had too little class diversity to form a loss."""


def normalize_portfolio(spec) -> tuple[float, float, float]:
    """Turn 'a:b:c' (or a 3-sequence) into a normalized weight triple."""
    if isinstance(spec, str):
        parts = [float(p) for p in spec.split(":")]
    else:
        parts = [float(p) for p in spec]
    if len(parts) != 3:
        raise ValueError(f"expected three weights, got {spec!r}")
    if any(p < 0 for p in parts):
        raise ValueError(f"weights must be non-negative, got {spec!r}")
    total = sum(parts)
    if total <= 0:
        raise ValueError(f"weights must not all be zero, got {spec!r}")
    return tuple(p / total for p in parts)


@dataclass
class ContrastiveConfig:
    temperature: float = DEFAULT_TEMPERATURE
    denominator_mode: str = "standard"
    max_points_per_class: int = 512

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ValueError(
                f"denominator_mode must be one of {DENOMINATOR_MODES}, "
                f"got {self.denominator_mode!r}"
            )
        if self.max_points_per_class < 1:
            raise ValueError("max_points_per_class must be >= 1")


@dataclass
class LossWeights:
    """Per-level weight triples; each must be a convex combination."""

    lambda_global: tuple[float, float, float] = DEFAULT_LEVEL_WEIGHTS
    lambda_local: tuple[float, float, float] = DEFAULT_LEVEL_WEIGHTS
    lambda_dice: tuple[float, float, float] = DEFAULT_LEVEL_WEIGHTS

    def __post_init__(self):
        for name in ("lambda_global", "lambda_local", "lambda_dice"):
            w = tuple(float(x) for x in getattr(self, name))
            if len(w) != 3:
                raise ValueError(f"{name} must have three entries, got {w}")
            if any(x < 0 for x in w):
                raise ValueError(f"{name} entries must be non-negative, got {w}")
            if abs(sum(w) - 1.0) > 1e-6:
                raise ValueError(f"{name} must sum to 1, got {w} (sum {sum(w)})")
            setattr(self, name, w)


def cosine_sim(u, v) -> torch.Tensor:
    u = torch.as_tensor(u, dtype=torch.float32)
    v = torch.as_tensor(v, dtype=torch.float32)
    nu = torch.linalg.norm(u)
    nv = torch.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity undefined for zero-norm input")
    return (u @ v) / (nu * nv)


def default_pairing(n: int) -> np.ndarray:
    """Partner map for a [first views | second views] stacked batch."""
    if n % 2:
        raise ValueError(f"pairing needs an even batch, got {n}")
    b = n // 2
    idx = np.arange(n)
    return (idx + b) % n


def _check_pairing(pairing: np.ndarray, n: int) -> np.ndarray:
    pairing = np.asarray(pairing, dtype=np.int64)
    if pairing.shape != (n,):
        raise ValueError(f"pairing must have shape ({n},), got {pairing.shape}")
    if np.any(pairing < 0) or np.any(pairing >= n):
        raise ValueError("pairing index out of range")
    if np.any(pairing == np.arange(n)) or np.any(pairing[pairing] != np.arange(n)):
        raise ValueError("pairing must be a perfect matching without fixed points")
    return pairing


def global_contrastive_level_loss(
    embeddings: torch.Tensor,
    pairing,
    cfg: ContrastiveConfig | None = None,
) -> torch.Tensor:
    """NT-Xent over one level's batch of 2b embeddings.

    Mean over anchors i of -log( exp(sim(i, j)/t) / sum_k exp(sim(i, k)/t) )
    with j the partner of i. In "standard" mode the denominator runs over
    k != i (the usual formulation); in "as-written" mode it runs over
    k != j, so it includes the anchor's self-similarity.
    """
    cfg = cfg or ContrastiveConfig()
    z = torch.as_tensor(embeddings, dtype=torch.float32)
    if z.dim() != 2:
        raise ValueError(f"embeddings must be (2b, dim), got {tuple(z.shape)}")
    n = z.shape[0]
    if n < 4 or n % 2:
        raise ValueError(f"need an even batch of at least 4 embeddings, got {n}")
    pairing = _check_pairing(pairing, n)

    zn = F.normalize(z, dim=1, eps=1e-8)
    sim = (zn @ zn.T) / cfg.temperature
    partner = torch.as_tensor(pairing, dtype=torch.long, device=z.device)
    pos = sim.gather(1, partner[:, None]).squeeze(1)

    mask = torch.ones(n, n, dtype=torch.bool, device=z.device)
    if cfg.denominator_mode == "standard":
        mask.fill_diagonal_(False)
    else:  # as-written: drop the positive, keep the self term
        mask[torch.arange(n, device=z.device), partner] = False
    denom = sim.masked_fill(~mask, float("-inf")).logsumexp(dim=1)
    return (denom - pos).mean()


def _weighted_sum(per_level, weights):
    if len(per_level) != len(weights):
        raise ValueError(
            f"got {len(per_level)} level losses for {len(weights)} weights"
        )
    total = None
    for loss, w in zip(per_level, weights):
        term = loss * w
        total = term if total is None else total + term
    return total


def multiscale_global_loss(per_level, weights=DEFAULT_LEVEL_WEIGHTS):
    """Weighted sum of per-encoder-level losses."""
    return _weighted_sum(per_level, weights)


def multiscale_local_loss(per_level, weights=DEFAULT_LEVEL_WEIGHTS):
    """Weighted sum of per-decoder-level losses."""
    return _weighted_sum(per_level, weights)


def subsample_points_per_class(labels: np.ndarray, cap: int, seed: int) -> np.ndarray:
    """Indices keeping at most `cap` points per class, seeded.

    The returned index array is sorted so the point order stays stable;
    classes at or under the cap keep all their points.
    """
    labels = np.asarray(labels).ravel()
    rng = np.random.default_rng(seed)
    keep = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) > cap:
            idx = rng.choice(idx, size=cap, replace=False)
        keep.append(idx)
    return np.sort(np.concatenate(keep))


def local_supervised_level_loss(
    features: torch.Tensor,
    mask,
    cfg: ContrastiveConfig | None = None,
    seed: int = 0,
) -> torch.Tensor:
    """Dense supervised contrastive loss over one feature map.

    features: (c, h, w), unit-norm per location. mask: (h, w) integer
    classes. For each anchor i, positives P(i) are other points of the
    same class and negatives N(i) the points of any other class; the
    per-anchor term is (1/|P(i)|) log( sum_P exp(f_i.f_p/t) /
    sum_N exp(f_i.f_n/t) ), and the loss is minus the mean over anchors.
    Anchors with no positive or no negative drop out of the mean. With
    fewer than two classes present the loss is defined empty: 0, with a
    DegenerateBatchWarning.
    """
    cfg = cfg or ContrastiveConfig()
    f = torch.as_tensor(features, dtype=torch.float32)
    if f.dim() != 3:
        raise ValueError(f"features must be (c, h, w), got {tuple(f.shape)}")
    labels = np.asarray(mask)
    if labels.shape != f.shape[1:]:
        raise ValueError(
            f"mask shape {labels.shape} does not match feature grid {tuple(f.shape[1:])}"
        )

    flat = f.reshape(f.shape[0], -1).T  # (n, c)
    labels = labels.ravel()
    keep = subsample_points_per_class(labels, cfg.max_points_per_class, seed)
    flat = flat[torch.as_tensor(keep, device=flat.device)]
    labels = labels[keep]

    if len(np.unique(labels)) < 2:
        warnings.warn(
            "local contrastive loss needs at least 2 classes in the mask; returning 0",
            DegenerateBatchWarning,
            stacklevel=2,
        )
        return flat.sum() * 0.0

    lab = torch.as_tensor(labels, dtype=torch.long, device=flat.device)
    sim = (flat @ flat.T) / cfg.temperature  # raw dot products: features arrive normalized
    same = lab[:, None] == lab[None, :]
    n = sim.shape[0]
    eye = torch.eye(n, dtype=torch.bool, device=sim.device)
    pos_mask = same & ~eye
    neg_mask = ~same

    pos_count = pos_mask.sum(dim=1)
    valid = (pos_count > 0) & neg_mask.any(dim=1)
    if not bool(valid.any()):
        warnings.warn(
            "every anchor lacked a positive or a negative; returning 0",
            DegenerateBatchWarning,
            stacklevel=2,
        )
        return flat.sum() * 0.0

    lse_pos = sim.masked_fill(~pos_mask, float("-inf")).logsumexp(dim=1)
    lse_neg = sim.masked_fill(~neg_mask, float("-inf")).logsumexp(dim=1)
    terms = (lse_pos - lse_neg) / pos_count.clamp(min=1)
    return -terms[valid].mean()


def local_supervised_batch_loss(
    feature_maps,
    masks,
    cfg: ContrastiveConfig | None = None,
    seed: int = 0,
) -> torch.Tensor:
    """Mean per-sample local loss over an augmented batch.

    Degenerate samples contribute 0 but stay in the denominator, so a
    batch's value never jumps when one slice happens to be single-class.
    """
    if len(feature_maps) != len(masks):
        raise ValueError("feature map and mask counts differ")
    if len(feature_maps) == 0:
        raise ValueError("empty batch")
    for m in masks:
        if m is None:
            raise ValueError("local supervised loss requires a mask for every sample")
    terms = [
        local_supervised_level_loss(f, m, cfg, seed=derive_seed(seed, i))
        for i, (f, m) in enumerate(zip(feature_maps, masks))
    ]
    return torch.stack([torch.as_tensor(t, dtype=torch.float32) for t in terms]).mean()


def dice_loss(logits: torch.Tensor, mask, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice over foreground classes.

    logits: (k, h, w) or (b, k, h, w); mask: matching (h, w) / (b, h, w)
    integer classes. Per class c >= 1, dice = (2 sum p_c g_c + eps) /
    (sum p_c + sum g_c + eps) with p = softmax(logits). Classes absent
    from both the ground truth and the argmax prediction are skipped; the
    loss is 1 minus the mean dice of the remaining classes (0 when none
    remain).
    """
    batched = logits.dim() == 4
    if not batched:
        if logits.dim() != 3:
            raise ValueError(f"logits must be (k, h, w) or (b, k, h, w), got {tuple(logits.shape)}")
        logits = logits[None]
        mask = np.asarray(mask)[None] if not torch.is_tensor(mask) else mask[None]
    m = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask, dtype=torch.long)
    if m.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(
            f"mask shape {tuple(m.shape)} does not match logits {tuple(logits.shape)}"
        )
    k = logits.shape[1]
    if int(m.min()) < 0 or int(m.max()) >= k:
        raise ValueError(f"mask classes outside [0, {k - 1}]")

    p = torch.softmax(logits, dim=1)
    pred = logits.argmax(dim=1)
    losses = []
    for b in range(logits.shape[0]):
        dices = []
        for c in range(1, k):
            g = (m[b] == c)
            in_pred = bool((pred[b] == c).any())
            if not in_pred and not bool(g.any()):
                continue
            pc = p[b, c]
            gf = g.to(pc.dtype)
            inter = (pc * gf).sum()
            dices.append((2 * inter + eps) / (pc.sum() + gf.sum() + eps))
        if dices:
            losses.append(1.0 - torch.stack(dices).mean())
        else:
            losses.append(torch.zeros((), dtype=p.dtype))
    out = torch.stack(losses).mean()
    return out if batched else out.squeeze()


def deep_supervised_loss(
    logits_per_level,
    mask,
    weights=DEFAULT_LEVEL_WEIGHTS,
    eps: float = DICE_EPS,
) -> torch.Tensor:
    """Weighted sum of dice_loss across the supervision heads."""
    if len(logits_per_level) != len(weights):
        raise ValueError(
            f"got {len(logits_per_level)} logit levels for {len(weights)} weights"
        )
    return _weighted_sum([dice_loss(lg, mask, eps) for lg in logits_per_level], weights)
