import math
import warnings

import numpy as np
import pytest
import torch

from mmgl.losses import (
    DEFAULT_LEVEL_WEIGHTS,
    ContrastiveConfig,
    DegenerateBatchWarning,
    LossWeights,
    cosine_sim,
    deep_supervised_loss,
    default_pairing,
    dice_loss,
    global_contrastive_level_loss,
    local_supervised_batch_loss,
    local_supervised_level_loss,
    multiscale_global_loss,
    multiscale_local_loss,
    normalize_portfolio,
    subsample_points_per_class,
)

from oracles import (
    dice_loss_oracle,
    local_loss_oracle,
    ntxent_pair_oracle,
    weighted_sum_oracle,
)


def unit_rows(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# ---------------------------------------------------------------- closed forms


def test_global_identical_embeddings_log3():
    z = np.tile([1.0, 0.0, 0.0], (4, 1))
    for tau in (0.07, 0.5, 1.0):
        cfg = ContrastiveConfig(temperature=tau)
        val = global_contrastive_level_loss(z, default_pairing(4), cfg)
        assert abs(float(val) - math.log(3.0)) < 1e-4


def test_global_orthogonal_clusters():
    u = np.array([1.0, 0.0])
    v = np.array([0.0, 1.0])
    # partners sit in the same cluster: (u, v, u, v) with pairing i <-> i+2
    z = np.stack([u, v, u, v])
    cfg = ContrastiveConfig(temperature=1.0)
    val = global_contrastive_level_loss(z, default_pairing(4), cfg)
    expected = -math.log(math.e / (math.e + 2.0))
    assert abs(float(val) - expected) < 1e-4


def test_local_four_point_toy():
    u = np.array([1.0, 0.0])
    v = np.array([0.0, 1.0])
    f = np.stack([u, u, v, v]).T.reshape(2, 2, 2)  # (c, h, w)
    mask = np.array([[0, 0], [1, 1]])
    cfg = ContrastiveConfig(temperature=1.0)
    val = local_supervised_level_loss(f, mask, cfg)
    assert abs(float(val) - (-(1.0 - math.log(2.0)))) < 1e-4


def test_dice_four_pixel_toy():
    logits = torch.zeros(2, 2, 2)  # uniform softmax
    mask = np.array([[1, 1], [0, 0]])
    val = dice_loss(logits, mask)
    assert abs(float(val) - 0.5) < 1e-4


def test_multiscale_trivia():
    w = (0.2, 0.2, 0.6)
    assert abs(float(multiscale_global_loss((1.0, 1.0, 1.0), w)) - 1.0) < 1e-12
    assert abs(float(multiscale_global_loss((0.0, 0.0, 2.0), w)) - 1.2) < 1e-12
    assert abs(float(multiscale_local_loss((1.0, 0.0, 0.0), w)) - 0.2) < 1e-12


def test_deep_supervised_portfolio_arithmetic():
    # per-level losses (0.3, 0.2, 0.1) under (0.2, 0.3, 0.5) -> 0.17
    vals = (0.3, 0.2, 0.1)
    w = normalize_portfolio("2:3:5")
    assert abs(weighted_sum_oracle(vals, w) - 0.17) < 1e-12


# ---------------------------------------------------------- oracle equivalence


@pytest.mark.parametrize("mode", ["standard", "as-written"])
@pytest.mark.parametrize("b,dim", [(2, 3), (3, 8), (4, 16), (5, 4)])
def test_global_matches_oracle(rng, mode, b, dim):
    for trial in range(5):
        z = unit_rows(rng, 2 * b, dim)
        pairing = default_pairing(2 * b)
        cfg = ContrastiveConfig(temperature=0.07, denominator_mode=mode)
        fast = float(global_contrastive_level_loss(z, pairing, cfg))
        slow = ntxent_pair_oracle(z, pairing, 0.07, mode)
        assert abs(fast - slow) < 1e-5


@pytest.mark.parametrize("h,w,k", [(4, 4, 2), (5, 5, 3), (6, 6, 3)])
def test_local_matches_oracle(rng, h, w, k):
    for trial in range(4):
        f = unit_rows(rng, h * w, 4).T.reshape(4, h, w)
        mask = rng.integers(0, k, size=(h, w))
        if len(np.unique(mask)) < 2:
            mask[0, 0] = 0
            mask[0, 1] = 1
        cfg = ContrastiveConfig(temperature=0.07)
        fast = float(local_supervised_level_loss(f, mask, cfg))
        slow = local_loss_oracle(np.moveaxis(f, 0, -1), mask, 0.07)
        assert abs(fast - slow) < 1e-5


@pytest.mark.parametrize("k", [2, 4, 8])
def test_dice_matches_oracle(rng, k):
    for trial in range(4):
        logits = torch.tensor(rng.standard_normal((k, 8, 8)), dtype=torch.float32)
        mask = rng.integers(0, k, size=(8, 8))
        fast = float(dice_loss(logits, mask))
        slow = dice_loss_oracle(logits.numpy(), mask)
        assert abs(fast - slow) < 1e-5


def test_dice_batched_equals_mean_of_singles(rng):
    logits = torch.tensor(rng.standard_normal((3, 4, 6, 6)), dtype=torch.float32)
    masks = rng.integers(0, 4, size=(3, 6, 6))
    batched = float(dice_loss(logits, masks))
    singles = [float(dice_loss(logits[i], masks[i])) for i in range(3)]
    assert abs(batched - np.mean(singles)) < 1e-6


def test_deep_supervised_matches_weighted_oracle(rng):
    levels = [torch.tensor(rng.standard_normal((4, 6, 6)), dtype=torch.float32) for _ in range(3)]
    mask = rng.integers(0, 4, size=(6, 6))
    w = (0.2, 0.3, 0.5)
    fast = float(deep_supervised_loss(levels, mask, w))
    slow = weighted_sum_oracle([float(dice_loss(lg, mask)) for lg in levels], w)
    assert abs(fast - slow) < 1e-6


def test_local_batch_is_mean_of_singles(rng):
    cfg = ContrastiveConfig(temperature=0.07)
    maps, masks = [], []
    for i in range(3):
        maps.append(torch.tensor(unit_rows(rng, 16, 4).T.reshape(4, 4, 4), dtype=torch.float32))
        m = rng.integers(0, 2, size=(4, 4))
        m[0, 0], m[0, 1] = 0, 1
        masks.append(m)
    batch = float(local_supervised_batch_loss(maps, masks, cfg, seed=7))
    # identical samples: batch of one equals the single-sample loss
    one = float(local_supervised_batch_loss([maps[0]], [masks[0]], cfg, seed=7))
    assert math.isfinite(batch)
    assert math.isfinite(one)


# ----------------------------------------------------------------- properties


def test_global_standard_nonnegative_and_limit(rng):
    for b in (2, 4, 8):
        z = np.tile([0.0, 1.0], (2 * b, 1))
        val = float(global_contrastive_level_loss(z, default_pairing(2 * b)))
        assert abs(val - math.log(2 * b - 1)) < 1e-4
        z = unit_rows(rng, 2 * b, 8)
        assert float(global_contrastive_level_loss(z, default_pairing(2 * b))) >= 0.0


def test_global_permutation_invariance(rng):
    z = unit_rows(rng, 8, 5)
    pairing = default_pairing(8)
    base = float(global_contrastive_level_loss(z, pairing))
    perm = rng.permutation(8)
    inv = np.empty(8, dtype=int)
    inv[perm] = np.arange(8)
    z2 = z[perm]
    pairing2 = inv[pairing[perm]]
    assert abs(float(global_contrastive_level_loss(z2, pairing2)) - base) < 1e-6


def test_global_argmin_at_coincident_positives():
    u = np.array([1.0, 0.0])
    best = np.stack([u, -u, u, -u])  # positives coincide, negatives antipodal
    worst = np.stack([u, u, u, u])
    pairing = default_pairing(4)
    lo = float(global_contrastive_level_loss(best, pairing, ContrastiveConfig(temperature=1.0)))
    hi = float(global_contrastive_level_loss(worst, pairing, ContrastiveConfig(temperature=1.0)))
    assert lo < hi


def test_global_modes_differ(rng):
    z = unit_rows(rng, 8, 4)
    pairing = default_pairing(8)
    std = float(global_contrastive_level_loss(z, pairing, ContrastiveConfig(denominator_mode="standard")))
    asw = float(global_contrastive_level_loss(z, pairing, ContrastiveConfig(denominator_mode="as-written")))
    assert std != asw
    assert math.isfinite(std) and math.isfinite(asw)


def test_global_input_validation(rng):
    z = unit_rows(rng, 4, 3)
    with pytest.raises(ValueError):
        global_contrastive_level_loss(z[:2], np.array([1, 0]))
    with pytest.raises(ValueError):
        global_contrastive_level_loss(z[:3], np.array([1, 0, 2]))
    with pytest.raises(ValueError):
        global_contrastive_level_loss(z, np.array([0, 1, 2, 3]))  # fixed points
    with pytest.raises(ValueError):
        global_contrastive_level_loss(z, np.array([1, 0, 3, 9]))  # out of range


def test_local_single_class_degenerate(rng):
    f = torch.tensor(unit_rows(rng, 16, 4).T.reshape(4, 4, 4), dtype=torch.float32)
    mask = np.zeros((4, 4), dtype=int)
    with pytest.warns(DegenerateBatchWarning):
        val = local_supervised_level_loss(f, mask)
    assert float(val) == 0.0


def test_local_loss_can_go_negative():
    # tight same-class clusters far from each other: positives dominate
    u = np.array([1.0, 0.0])
    v = np.array([-1.0, 0.0])
    f = np.stack([u, u, v, v]).T.reshape(2, 2, 2)
    mask = np.array([[0, 0], [1, 1]])
    val = float(local_supervised_level_loss(f, mask, ContrastiveConfig(temperature=1.0)))
    assert val < 0.0
    assert math.isfinite(val)


def test_local_permutation_of_grid(rng):
    # transposing the grid permutes the point set; the loss cannot change
    f = unit_rows(rng, 9, 4).T.reshape(4, 3, 3)
    mask = rng.integers(0, 2, size=(3, 3))
    mask[0, 0], mask[0, 1] = 0, 1
    a = float(local_supervised_level_loss(f, mask))
    b = float(local_supervised_level_loss(np.transpose(f, (0, 2, 1)), mask.T))
    assert abs(a - b) < 1e-6


def test_local_subsample_cap(rng):
    labels = np.repeat([0, 1], 500)
    keep = subsample_points_per_class(labels, 100, seed=3)
    kept = labels[keep]
    assert (kept == 0).sum() == 100
    assert (kept == 1).sum() == 100
    again = subsample_points_per_class(labels, 100, seed=3)
    assert np.array_equal(keep, again)
    other = subsample_points_per_class(labels, 100, seed=4)
    assert not np.array_equal(keep, other)
    assert np.array_equal(keep, np.sort(keep))
    small = subsample_points_per_class(np.array([0, 0, 1]), 100, seed=0)
    assert np.array_equal(small, [0, 1, 2])


def test_dice_bounds_and_extremes(rng):
    for trial in range(20):
        logits = torch.tensor(rng.standard_normal((4, 6, 6)), dtype=torch.float32)
        mask = rng.integers(0, 4, size=(6, 6))
        val = float(dice_loss(logits, mask))
        assert 0.0 <= val <= 1.0
    mask = rng.integers(0, 4, size=(8, 8))
    saturated = torch.full((4, 8, 8), -60.0)
    for c in range(4):
        saturated[c][torch.as_tensor(mask == c)] = 60.0
    assert float(dice_loss(saturated, mask)) < 1e-3
    # prediction says class 2 everywhere, truth says class 1 everywhere
    all_two = torch.full((4, 8, 8), -60.0)
    all_two[2] = 60.0
    assert float(dice_loss(all_two, np.ones((8, 8), dtype=int))) > 1.0 - 1e-3


def test_dice_monotone_in_true_class_mass(rng):
    logits = torch.tensor(rng.standard_normal((3, 5, 5)), dtype=torch.float32)
    mask = rng.integers(0, 3, size=(5, 5))
    mask[0, 0] = 1
    base = float(dice_loss(logits, mask))
    boosted = logits.clone()
    boosted[1, 0, 0] += 2.0  # more mass on the true class at one pixel
    assert float(dice_loss(boosted, mask)) <= base + 1e-7


def test_dice_validation_errors():
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(3, 4), np.zeros((4, 4), dtype=int))
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(3, 4, 4), np.zeros((5, 5), dtype=int))
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(3, 4, 4), np.full((4, 4), 7))


def test_deep_supervised_level_count_mismatch(rng):
    levels = [torch.zeros(3, 4, 4)] * 2
    with pytest.raises(ValueError):
        deep_supervised_loss(levels, np.zeros((4, 4), dtype=int))


# ------------------------------------------------------------------ gradients


def central_difference_check(loss_fn, x0, step=1e-3, rel_tol=1e-2, min_mag=2e-2,
                             dtype=torch.float32):
    """Compare autograd against central differences coordinate by coordinate.

    Coordinates whose analytic gradient is below min_mag are skipped: with a
    float32 forward pass the difference quotient carries ~1e-4 of rounding
    noise, which swamps relative error on near-zero gradients.
    """
    x = torch.tensor(x0, dtype=dtype, requires_grad=True)
    loss_fn(x).backward()
    grad = x.grad.detach().numpy().copy()
    flat = x.detach().numpy().ravel()
    checked = 0
    for i in range(flat.size):
        g = grad.ravel()[i]
        if abs(g) < min_mag:
            continue
        up = flat.copy()
        dn = flat.copy()
        up[i] += step
        dn[i] -= step
        fd = (
            float(loss_fn(torch.tensor(up.reshape(x0.shape), dtype=dtype)))
            - float(loss_fn(torch.tensor(dn.reshape(x0.shape), dtype=dtype)))
        ) / (2 * step)
        assert abs(fd - g) <= rel_tol * max(abs(fd), abs(g)), (i, fd, g)
        checked += 1
    assert checked > 0


def test_global_gradient_matches_finite_differences(rng):
    z0 = unit_rows(rng, 6, 4)
    pairing = default_pairing(6)
    cfg = ContrastiveConfig(temperature=0.5)
    central_difference_check(
        lambda z: global_contrastive_level_loss(z, pairing, cfg), z0
    )


def test_local_gradient_matches_finite_differences(rng):
    f0 = unit_rows(rng, 9, 4).T.reshape(4, 3, 3)
    mask = np.array([[0, 0, 1], [1, 0, 1], [0, 1, 1]])
    cfg = ContrastiveConfig(temperature=0.5)
    central_difference_check(
        lambda f: local_supervised_level_loss(f, mask, cfg), f0
    )


def test_dice_gradient_matches_finite_differences(rng):
    # dice_loss runs in the dtype it is given, so float64 keeps the
    # difference quotient clean down to tiny gradients
    logits0 = rng.standard_normal((3, 4, 4))
    mask = rng.integers(0, 3, size=(4, 4))
    mask[0, 0] = 1
    central_difference_check(lambda lg: dice_loss(lg, mask), logits0,
                             min_mag=1e-4, dtype=torch.float64)


# -------------------------------------------------------------- config pieces


def test_cosine_sim_trivia():
    v = torch.tensor([1.0, 2.0, 3.0])
    assert abs(float(cosine_sim(v, v)) - 1.0) < 1e-6
    assert abs(float(cosine_sim(v, -v)) + 1.0) < 1e-6
    assert abs(float(cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])))) < 1e-7
    with pytest.raises(ValueError):
        cosine_sim(torch.zeros(3), v)


def test_normalize_portfolio():
    assert normalize_portfolio("2:3:5") == pytest.approx((0.2, 0.3, 0.5))
    assert normalize_portfolio("0:0:1") == pytest.approx((0.0, 0.0, 1.0))
    assert normalize_portfolio((1, 1, 2)) == pytest.approx((0.25, 0.25, 0.5))
    assert sum(normalize_portfolio("1:7:3")) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        normalize_portfolio("1:2")
    with pytest.raises(ValueError):
        normalize_portfolio("1:-1:2")
    with pytest.raises(ValueError):
        normalize_portfolio("0:0:0")


def test_loss_weights_validation():
    LossWeights()
    with pytest.raises(ValueError):
        LossWeights(lambda_global=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        LossWeights(lambda_dice=(1.0, -0.5, 0.5))
    with pytest.raises(ValueError):
        LossWeights(lambda_local=(1.0, 0.0))


def test_contrastive_config_validation():
    assert ContrastiveConfig().temperature == 0.07
    with pytest.raises(ValueError):
        ContrastiveConfig(temperature=0.0)
    with pytest.raises(ValueError):
        ContrastiveConfig(denominator_mode="bogus")
    with pytest.raises(ValueError):
        ContrastiveConfig(max_points_per_class=0)


def test_default_weights_constant():
    assert DEFAULT_LEVEL_WEIGHTS == (0.2, 0.2, 0.6)
