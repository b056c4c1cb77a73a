import math

import numpy as np
import pytest

from latrack import tensor as T
from latrack.backbone import Backbone, BackboneConfig, TransformerLayer, paper_config, toy_config
from latrack.rng import stream
from latrack.tensor import Tensor, backward


def _images(seed=0, cfg=None):
    cfg = cfg or toy_config()
    rng = np.random.default_rng(seed)
    z = rng.uniform(0, 1, (*cfg.template_size, 3))
    s = rng.uniform(0, 1, (*cfg.search_size, 3))
    return z, s


def test_token_counts_paper_preset():
    cfg = paper_config()
    assert (cfg.n_template, cfg.n_search, cfg.n_tokens) == (64, 256, 320)


def test_token_counts_toy_preset():
    cfg = toy_config()
    assert (cfg.n_template, cfg.n_search, cfg.n_tokens) == (16, 64, 80)


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(template_size=(30, 32))
    with pytest.raises(ValueError):
        BackboneConfig(embed_dim=33, num_heads=2)


def test_embed_shapes_and_order():
    bb = Backbone(toy_config(), seed=0)
    z, s = _images()
    seq = bb.embed(z, s)
    assert seq.tokens.shape == (80, 32)
    assert seq.split == 16


def test_embed_size_mismatch():
    bb = Backbone(toy_config(), seed=0)
    z, s = _images()
    with pytest.raises(ValueError, match="template"):
        bb.embed(s, s)


def test_embed_affine_zero_case():
    # midpoint-gray images standardize to 0; with zero bias and zero positional
    # tables the tokens vanish for any projection weight
    bb = Backbone(toy_config(), seed=0)
    bb.patch_b.data[:] = 0.0
    bb.pos_z.data[:] = 0.0
    bb.pos_s.data[:] = 0.0
    z = np.full((32, 32, 3), 0.5)
    s = np.full((64, 64, 3), 0.5)
    assert np.allclose(bb.embed(z, s).tokens.data, 0.0)


def _zero_layer(layer):
    for _, p in layer.named_params():
        p.data[:] = 0.0


def test_layer_all_zero_weights_is_identity():
    bb = Backbone(toy_config(), seed=0)
    _zero_layer(bb.layers[0])
    x = Tensor(np.random.default_rng(3).uniform(-1, 1, (80, 32)))
    out, _ = bb.layer_forward(x, 1)
    assert np.array_equal(out.data, x.data)


def test_layer_preserves_shape():
    bb = Backbone(toy_config(), seed=1)
    x = Tensor(np.random.default_rng(4).uniform(-1, 1, (80, 32)))
    out, _ = bb.layer_forward(x, 3)
    assert out.shape == (80, 32)


def test_layer_index_out_of_range():
    bb = Backbone(toy_config(), seed=0)
    x = Tensor(np.zeros((80, 32)))
    with pytest.raises(IndexError):
        bb.layer_forward(x, 0)
    with pytest.raises(IndexError):
        bb.layer_forward(x, 9)


def _gelu_scalar(v):
    return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3)))


def test_single_token_layer_hand_computed():
    # one token, dim 1, one head: attention collapses to softmax of a single
    # logit, i.e. exactly 1, so the block is a closed-form scalar function
    layer = TransformerLayer(1, 1, 4.0, stream(0, "t"))
    vals = {
        "ln1_b": 0.3, "bq": 0.1, "bk": -0.2, "bv": 0.4, "wo": 0.5, "bo": 0.05,
        "ln2_b": -0.6, "b2": 0.02,
    }
    layer.ln1_g.data[:] = 0.7  # gain is irrelevant: single-element rows normalize to 0
    layer.ln1_b.data[:] = vals["ln1_b"]
    layer.wq.data[:] = 2.0
    layer.bq.data[:] = vals["bq"]
    layer.wk.data[:] = -1.0
    layer.bk.data[:] = vals["bk"]
    layer.wv.data[:] = 3.0
    layer.bv.data[:] = vals["bv"]
    layer.wo.data[:] = vals["wo"]
    layer.bo.data[:] = vals["bo"]
    layer.ln2_g.data[:] = 1.1
    layer.ln2_b.data[:] = vals["ln2_b"]
    layer.w1.data[:] = np.array([[0.2, -0.3, 0.4, 0.6]])
    layer.b1.data[:] = np.array([0.01, 0.02, 0.03, 0.04])
    layer.w2.data[:] = np.array([[0.5], [-0.25], [0.75], [0.1]])
    layer.b2.data[:] = vals["b2"]

    x0 = 0.9
    out, _ = layer.forward(Tensor(np.array([[x0]])))

    ln1 = vals["ln1_b"]  # LN of a single element: zero times gain, plus bias
    v = 3.0 * ln1 + vals["bv"]  # attention weight is exactly 1 -> ctx == v
    x2 = x0 + vals["wo"] * v + vals["bo"]
    ln2 = vals["ln2_b"]
    hidden = [_gelu_scalar(w * ln2 + b) for w, b in zip([0.2, -0.3, 0.4, 0.6], [0.01, 0.02, 0.03, 0.04])]
    mlp = sum(h * w for h, w in zip(hidden, [0.5, -0.25, 0.75, 0.1])) + vals["b2"]
    assert np.allclose(out.data, x2 + mlp, atol=1e-12)


def test_forward_full_trace_length_and_composition():
    bb = Backbone(toy_config(), seed=2)
    z, s = _images(5)
    trace = bb.forward_full(z, s)
    assert len(trace.states) == bb.config.num_layers + 1
    x = trace.states[0]
    for i in range(1, bb.config.num_layers + 1):
        x, _ = bb.layer_forward(x, i)
    assert np.array_equal(x.data, trace.states[-1].data)


def test_forward_adaptive_executed_set():
    calls = []
    bb = Backbone(toy_config(), seed=2)
    orig = bb.layer_forward

    def spy(x, i, capture_attention=False):
        calls.append(i)
        return orig(x, i, capture_attention)

    bb.layer_forward = spy
    z, s = _images(6)
    bb.forward_adaptive(z, s, 4, 3)
    assert calls == [1, 2, 3, 4, 7]  # gap layers 5, 6 and tail 8 never run


def test_forward_adaptive_k1_equals_truncated_full():
    bb = Backbone(toy_config(), seed=7)
    z, s = _images(7)
    trace = bb.forward_full(z, s)
    for l_star in (1, 4, 7):
        out = bb.forward_adaptive(z, s, l_star, 1)
        assert np.array_equal(out.data, trace.states[l_star + 1].data)


def test_forward_adaptive_zero_weights_passthrough():
    bb = Backbone(toy_config(), seed=0)
    for layer in bb.layers:
        _zero_layer(layer)
    z, s = _images(8)
    emb = bb.embed(z, s).tokens
    out = bb.forward_adaptive(z, s, 4, 2)
    assert np.array_equal(out.data, emb.data)


def test_forward_adaptive_range_errors():
    bb = Backbone(toy_config(), seed=0)
    z, s = _images()
    with pytest.raises(IndexError):
        bb.forward_adaptive(z, s, 0, 1)
    with pytest.raises(IndexError):
        bb.forward_adaptive(z, s, 8, 1)
    with pytest.raises(IndexError):
        bb.forward_adaptive(z, s, 4, 5)


def test_template_rows_depend_on_search_pixels():
    # one-stream fusion: perturbing the search image must move template tokens
    bb = Backbone(toy_config(), seed=3)
    z, s = _images(9)
    x1 = bb.forward_full(z, s).states[1].data
    s2 = s.copy()
    s2[10:30, 10:30] = 1.0 - s2[10:30, 10:30]
    x2 = bb.forward_full(z, s2).states[1].data
    split = bb.config.n_template
    assert not np.allclose(x1[:split], x2[:split])


def test_adaptive_gradients_and_skipped_layers_get_none():
    cfg = BackboneConfig(num_layers=3, embed_dim=8, num_heads=2, patch_size=8,
                         template_size=(8, 8), search_size=(16, 16))
    bb = Backbone(cfg, seed=4)
    rng = np.random.default_rng(11)
    z = rng.uniform(0, 1, (8, 8, 3))
    s = rng.uniform(0, 1, (16, 16, 3))
    out = bb.forward_adaptive(z, s, 1, 2)  # runs layers 1 and 3; layer 2 skipped
    backward(T.tsum(T.mul(out, out)))
    executed = dict(bb.layers[0].named_params())
    skipped = dict(bb.layers[1].named_params())
    assert any(p.grad is not None and np.any(p.grad != 0) for p in executed.values())
    assert all(p.grad is None for p in skipped.values())

    # finite differences against one executed weight and the patch projection
    for target in (bb.layers[2].wq, bb.patch_w):
        target.zero_grad()

        def f(t):
            o = bb.forward_adaptive(z, s, 1, 2)
            return T.tsum(T.mul(o, o))

        from latrack.tensor import finite_diff_check
        # probe a few coordinates only: swap in sampled_grad_check for speed
        from latrack.tensor import sampled_grad_check
        coords = [(0, i) for i in np.random.default_rng(0).integers(0, target.size, 5)]
        assert sampled_grad_check(lambda: f(target), [target], coords) < 1e-4


def test_forward_full_deterministic():
    bb = Backbone(toy_config(), seed=5)
    z, s = _images(12)
    a = bb.forward_full(z, s).states[-1].data
    b = bb.forward_full(z, s).states[-1].data
    assert np.array_equal(a, b)
