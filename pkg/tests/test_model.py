import dataclasses

import numpy as np
import pytest

from ctmae import autodiff as ad
from ctmae import errors
from ctmae import model as M
from ctmae import training as T
from ctmae.patching import PatchGrid, patchify, sample_mask

from gradcheck import check_params, passes
from helpers import TINY, spread_params, synth_items


def test_presets():
    p = M.PRESETS["paper"]
    assert (p.side, p.patch, p.enc_dim, p.enc_layers, p.enc_heads) == (128, 16, 768, 12, 12)
    assert p.grid.n_patches == 512
    assert dataclasses.astuple(M.PRESETS["desk"])[:8] == (32, 8, 64, 2, 4, 32, 1, 4)
    with pytest.raises(errors.HeadDivisibility):
        M.ModelConfig(enc_dim=30, enc_heads=4)


def test_sincos_table():
    g = PatchGrid(32, 8)
    t = M.sincos_3d(g, 64)
    assert t.shape == (64, 64)
    assert np.all(t[:, 60:] == 0)  # 64 = 3 bands of 20 + 4 leftover columns
    assert len({r.tobytes() for r in t}) == 64  # distinct per patch
    np.testing.assert_allclose(t[:, 0:10] ** 2 + t[:, 10:20] ** 2, 1.0)


def test_init_params():
    a, b = M.init_params(TINY, 3), M.init_params(TINY, 3)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert all((a[k].data == 1).all() for k in a if k.endswith(".gain"))
    assert all((a[k].data == 0).all() for k in a if k.endswith("bias") and "norm" in k)
    big = M.init_params(M.ModelConfig(side=32, patch=16, enc_dim=32, enc_heads=4), 0)
    w = big["patch_embed.weight"].data
    assert w.size >= 10_000
    assert abs(w.std() - 0.02 * 0.8796) / 0.02 < 0.10  # std of a normal truncated at 2 sigma
    assert np.abs(w).max() <= 0.04


def test_encode_shapes():
    params = M.init_params(TINY, 0)
    rows = np.random.default_rng(0).random((8, 512)).astype(np.float32)
    assert M.encode(params, rows, np.arange(8), True).shape == (9, 16)
    sel = sample_mask(8, 0.75, 0)
    enc = M.encode(params, rows, sel.visible, False)
    assert enc.shape == (2, 16)
    assert M.decode_reconstruct(params, enc, sel).shape == (8, 512)
    with pytest.raises(errors.IndexOutOfRange):
        M.encode(params, rows, [3, 1], False)
    with pytest.raises(errors.IndexOutOfRange):
        M.encode(params, rows, [0, 8], False)


def test_full_scale_token_counts():
    sel = sample_mask(512, 0.75, 0)
    assert len(sel.visible) == 128 and 512 + 1 == 513


def test_masked_decoder_inputs_differ_only_by_position():
    params = M.init_params(TINY, 0)
    p = params.tensors
    sel = sample_mask(8, 0.75, 1)
    enc = M.encode(params, np.zeros((8, 512), np.float32), sel.visible, False)
    y = ad.linear(ad.reshape(enc, (1, 2, 16)), p["dec.embed.weight"], p["dec.embed.bias"])
    x = ad.scatter_rows(y, np.array([sel.visible]), p["mask_token"], 8).data[0]
    for k in sel.masked:
        assert np.array_equal(x[k], p["mask_token"].data)


def test_zero_layer_decoder_is_affine():
    cfg = dataclasses.replace(TINY, dec_layers=0)
    params = spread_params(cfg, 1)
    rng = np.random.default_rng(0)
    sel = sample_mask(8, 0.5, 0)
    e1, e2 = rng.normal(size=(4, 16)), rng.normal(size=(4, 16))
    f = lambda e: M.decode_reconstruct(params, ad.Tensor(e), sel).data
    # with a layernorm before the projection, scaling inputs leaves masked rows fixed
    assert np.allclose(f(e1)[list(sel.masked)], f(e2)[list(sel.masked)])


def test_classify_shapes_and_determinism():
    rows = np.random.default_rng(0).random((8, 512)).astype(np.float32)
    assert M.classify(M.init_params(TINY, 0), rows).shape == (4,)
    binary = M.init_params(dataclasses.replace(TINY, n_classes=2), 0)
    assert M.classify(binary, rows).shape == (2,)
    batch = M.classify_batch(binary, np.stack([rows, rows])).data
    assert batch[0].tobytes() == batch[1].tobytes()


def test_trainable_subsets():
    params = M.init_params(TINY, 0)
    lp, ft = set(M.trainable_subset(params, "LP")), set(M.trainable_subset(params, "FT"))
    assert lp == {"head.norm.gain", "head.norm.bias", "head.weight", "head.bias"}
    assert lp <= ft and ft == set(params.names()) - set(M.BUFFERS)
    with pytest.raises(errors.ConfigError):
        M.trainable_subset(params, "XX")


def test_cls_logits_permutation_invariant():
    params = spread_params(TINY, 2)
    p = params.tensors
    rows = np.random.default_rng(1).random((8, 512))
    perm = np.random.default_rng(2).permutation(8)
    pos = M.sincos_3d(TINY.grid, 16)
    x = ad.add(ad.linear(ad.Tensor(rows[perm]), p["patch_embed.weight"], p["patch_embed.bias"]), pos[perm])
    x = ad.concat([ad.reshape(p["cls_token"], (1, 16)), x], axis=0)
    x = M._block(params, "enc.0", x, TINY.enc_heads)
    x = ad.layernorm(x, p["enc.norm.gain"], p["enc.norm.bias"])
    permuted = M.head_logits(params, ad.reshape(ad.gather_rows(x, np.array([0])), (1, 16))).data[0]
    np.testing.assert_allclose(permuted, M.classify(params, rows).data, atol=1e-10)


def test_masked_only_gradients():
    params = spread_params(TINY, 3)
    grid = TINY.grid
    item = synth_items(16, 1, (0,))[0]
    rows = patchify(item.volume, grid)[None]
    sel = sample_mask(8, 0.75, 4)
    w = T.row_weights(sel, 8)[None]
    params.set_trainable(["dec.pred.weight", "dec.pred.bias"])

    def grad(target):
        params.zero_grad()
        recon = M.reconstruct_batch(params, rows, np.array([sel.visible]))
        ad.backward(T.weighted_reconstruction_loss(recon, target, w))
        return params["dec.pred.weight"].grad.copy(), params["dec.pred.bias"].grad.copy()

    garbage = rows.copy()
    garbage[0, list(sel.visible)] = 123.0
    for a, b in zip(grad(rows), grad(garbage)):
        assert a.tobytes() == b.tobytes()


def test_mask_after_encode_sees_masked_content():
    cfg = dataclasses.replace(TINY, mask_after_encode=True)
    params = spread_params(cfg, 4)
    rng = np.random.default_rng(0)
    rows = rng.random((1, 8, 512))
    vis = np.array([[0, 5]])
    other = rows.copy()
    other[0, 3] += 1.0  # a masked patch
    a = M.reconstruct_batch(params, rows, vis).data
    b = M.reconstruct_batch(params, other, vis).data
    assert not np.allclose(a, b)
    base = spread_params(TINY, 4)
    assert np.array_equal(M.reconstruct_batch(base, rows, vis).data, M.reconstruct_batch(base, other, vis).data)


# -- composed gradient checks on the tiny config --------------------------------

# softmax is shift-invariant per query, so key biases get an exactly zero gradient
ZERO_GRAD = ".attn.bk"


def _pretrain_loss(cfg, variant):
    items = synth_items(16, 1, (0, 3))
    run = T.RunConfig("PT", 2, 1e-3, 0.0, 10, 0.1, loss_variant=variant, alpha=0.1, augmentation=False)
    return lambda params: T.pretrain_step_loss(params, items, run, 0, [0, 1])


@pytest.mark.parametrize("variant", ["standard_mae", "lung_aware"])
@pytest.mark.parametrize("after", [False, True])
def test_gradcheck_pretraining(variant, after):
    cfg = dataclasses.replace(TINY, mask_after_encode=after)
    params = spread_params(cfg, 5)
    names = [n for n in params.names() if not n.startswith("head.") and n != "cls_token"
             and not n.endswith(ZERO_GRAD)]
    errs = check_params(_pretrain_loss(cfg, variant), params, names, n_coords=240, seed=3)
    assert passes(errs), np.sort(errs)[-5:]


def test_gradcheck_classification():
    params = spread_params(TINY, 6)
    items = synth_items(16, 1)
    rows = np.stack([patchify(it.volume, TINY.grid) for it in items]).astype(np.float64)
    labels = [it.label for it in items]
    weights = T.class_weights([1, 1, 1, 1]).weights
    loss = lambda p: ad.cross_entropy_weighted(M.classify_batch(p, rows), labels, weights)
    # decoder tensors do not reach the logits; check the encoder and head
    names = [n for n in M.trainable_subset(params, "FT")
             if not n.startswith("dec.") and n != "mask_token" and not n.endswith(ZERO_GRAD)]
    errs = check_params(loss, params, names, n_coords=240, seed=4)
    assert passes(errs), np.sort(errs)[-5:]


def test_key_bias_gradient_is_zero():
    params = spread_params(TINY, 6)
    items = synth_items(16, 1)
    rows = np.stack([patchify(it.volume, TINY.grid) for it in items]).astype(np.float64)
    params.set_trainable(["enc.0.attn.bk", "enc.0.attn.bq"])
    ad.backward(ad.cross_entropy_weighted(M.classify_batch(params, rows), [0, 1, 2, 3], np.ones(4)))
    assert np.abs(params["enc.0.attn.bk"].grad).max() < 1e-12
    assert np.abs(params["enc.0.attn.bq"].grad).max() > 1e-3
