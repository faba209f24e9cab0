import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vitprune import arch
from vitprune.data import separable
from vitprune.losses import LossConfig
from vitprune.model import ViT
from vitprune.sparsity import apply_2to4, as_linear, mask_2to4, sparsify, verify_2to4, verify_model
from vitprune.train import TrainConfig, evaluate, train


def brute_force_keep(group):
    """Keep-pair maximising retained sum of squares; ties go to the higher indices."""
    best, best_val = None, -1.0
    for pair in itertools.combinations(range(4), 2):
        val = float(sum(group[i] ** 2 for i in pair))
        if val > best_val or (val == best_val and pair > best):
            best, best_val = pair, val
    return best


def test_examples():
    out, _ = apply_2to4(np.array([1.0, -3.0, 0.5, 2.0]))
    np.testing.assert_array_equal(out, [0.0, -3.0, 0.0, 2.0])
    out, mask = apply_2to4(np.ones(4))
    np.testing.assert_array_equal(out, [0.0, 0.0, 1.0, 1.0])
    np.testing.assert_array_equal(mask, [False, False, True, True])


def test_non_divisible_rejected():
    with pytest.raises(ValueError):
        mask_2to4(np.ones((2, 6)))


@pytest.mark.parametrize("seed", range(10))
def test_against_brute_force(seed):
    w = np.random.default_rng(seed).standard_normal((16, 16))
    mask = mask_2to4(w)
    for r in range(16):
        for j in range(4):
            grp = w[r, 4 * j:4 * j + 4]
            kept = tuple(np.flatnonzero(mask[r, 4 * j:4 * j + 4]))
            assert kept == brute_force_keep(grp)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 8), st.sampled_from([4, 8, 16, 32])),
              elements=st.floats(-4, 4, width=32)))
def test_laws(w):
    once, mask = apply_2to4(w)
    twice, _ = apply_2to4(once)
    np.testing.assert_array_equal(once, twice)
    assert mask.sum() * 2 == mask.size
    assert (mask.reshape(-1, 4).sum(1) == 2).all()
    # kept magnitudes dominate dropped ones in every group
    a = np.abs(w).reshape(-1, 4)
    m = mask.reshape(-1, 4)
    for row, keep in zip(a, m):
        assert row[keep].min() >= row[~keep].max()


def test_verify_examples():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((32, 64))
    assert verify_2to4(apply_2to4(w)[0]).ok
    assert verify_2to4(mask_2to4(w)).ok
    rep = verify_2to4(w)
    assert not rep.ok and rep.row == (0,) and rep.group == 0
    m = mask_2to4(w)
    m[5, 9] = True
    m[5, 8:12] = [True, True, True, False]
    rep = verify_2to4(m)
    assert not rep.ok and rep.row == (5,) and rep.group == 2
    assert "3 nonzeros" in rep.reason


def test_verify_divisibility():
    assert not verify_2to4(np.zeros((24, 16))).ok
    assert not verify_2to4(np.zeros((16, 6))).ok
    assert verify_2to4(np.zeros((16, 32))).ok


def test_as_linear_layouts():
    w = np.arange(2 * 3 * 4).reshape(2, 3, 4)
    assert as_linear("blocks.0.q_w", w).shape == (6, 4)
    p = as_linear("blocks.0.proj_w", w)
    assert p.shape == (3, 8)
    np.testing.assert_array_equal(p[1], np.concatenate([w[0, 1], w[1, 1]]))


def test_model_sparsify_verifies_and_halves():
    m = ViT.create(arch.desk(), seed=0)
    masks = sparsify(m)
    reports = verify_model(m)
    assert masks and all(r.ok for r in reports.values())
    for name, mk in masks.items():
        assert mk.mean() == 0.5
        assert not m.params[name].data[~mk].any()


def test_sparse_forward_uses_masks_after_updates():
    m = ViT.create(arch.desk(), seed=1)
    masks = sparsify(m)
    name = next(iter(masks))
    m.params[name].data[...] = 1.0       # a dense update must not leak through
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32)).astype(np.float32)
    a = m(x)["z_c"].data
    m.params[name].data[...] = masks[name].astype(np.float32)
    b = m(x)["z_c"].data
    np.testing.assert_array_equal(a, b)


def test_accuracy_drop_after_sparsify_and_finetune():
    spec = arch.desk(num_classes=2)
    ds = separable(256, 32, 3, seed=0)
    m = ViT.create(spec, seed=0)
    train(m, ds, TrainConfig(epochs=8, batch_size=32, lr=1e-3, warmup_epochs=1), LossConfig("ce_only"))
    dense = evaluate(m, ds)
    sparsify(m)
    train(m, ds, TrainConfig(epochs=2, batch_size=32, lr=1e-4, warmup_epochs=0), LossConfig("ce_only"))
    assert all(r.ok for r in verify_model(m).values())
    assert dense - evaluate(m, ds) <= 0.01
