import numpy as np
import pytest

from layerdecomp import tensor as T
from layerdecomp.errors import AlignmentError, ConfigError
from layerdecomp.imaging import BBox
from layerdecomp.mlca import (GuidanceSequence, build_guidance, condition_patches, encode_condition, fuse,
                              guidance_batch, guidance_for)
from layerdecomp.model import ModelConfig, ModelInput, forward_batch, init_params
from layerdecomp.synth import SynthConfig, synth_stack
from layerdecomp.tensor import Tensor
from layerdecomp.tokens import assemble_sequence

CFG = ModelConfig(d_model=32, n_heads=2, n_blocks=2, frame=32, max_layers=4)


@pytest.fixture
def params():
    return init_params(CFG, 0)


def test_encode_condition_shape_linearity_and_bias(params):
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(32, 32, 3)), rng.uniform(size=(32, 32, 3))
    za, zb, zab = (encode_condition(params, x).data for x in (a, b, a + b))
    z0 = encode_condition(params, np.zeros((32, 32, 3))).data
    assert za.shape == (4, 4, 32)
    np.testing.assert_allclose(zab - z0, (za - z0) + (zb - z0), atol=1e-12)
    np.testing.assert_array_equal(z0, np.broadcast_to(params["mlca.b"].data, z0.shape))


def test_encode_condition_rejects_wrong_frame(params):
    with pytest.raises(ConfigError):
        encode_condition(params, np.zeros((64, 64, 3)))


def test_build_guidance_examples(params):
    z = encode_condition(params, np.random.default_rng(1).uniform(size=(32, 32, 3)))
    full = build_guidance(z, [BBox.full(32, 32)], 8)
    np.testing.assert_array_equal(full.tokens.data, z.data.reshape(16, 32))
    box = BBox(8, 0, 24, 16)
    twice = build_guidance(z, [box, box], 8).tokens.data
    np.testing.assert_array_equal(twice[:4], twice[4:])
    with pytest.raises(AlignmentError):
        build_guidance(z, [BBox(3, 0, 24, 16)], 8)


@pytest.mark.parametrize("seed", range(10))
def test_guidance_aligns_with_sequence_cells(params, seed):
    stack = synth_stack(seed, SynthConfig(frame_size=32, n_layers=1 + seed % 4))
    seq = assemble_sequence(stack, 8, CFG.max_layers)
    g = guidance_for(params, stack.composite, seq)
    z = encode_condition(params, stack.composite).data
    assert g.tokens.shape == (len(seq), 32)
    for tok, (_, hh, ww) in zip(g.tokens.data, seq.positions):
        np.testing.assert_array_equal(tok, z[hh, ww])
    batched = guidance_batch(params, condition_patches(stack.composite, 8)[None], seq.positions[None])
    np.testing.assert_allclose(batched.data[0], g.tokens.data, atol=1e-15)


def test_fuse_is_exact_addition_and_checks_length():
    rng = np.random.default_rng(2)
    h = Tensor(rng.standard_normal((5, 4)))
    g = GuidanceSequence(Tensor(rng.standard_normal((5, 4))), [])
    np.testing.assert_array_equal(fuse(h, GuidanceSequence(Tensor(np.zeros((5, 4))), [])).data, h.data)
    np.testing.assert_array_equal(fuse(h, g).data, h.data + g.tokens.data)
    np.testing.assert_allclose(fuse(h, g).data - h.data, g.tokens.data, rtol=0, atol=1e-15)
    with pytest.raises(AlignmentError):
        fuse(h, GuidanceSequence(Tensor(np.zeros((4, 4))), []))


def test_fuse_gradient_flows_equally_to_both_inputs():
    rng = np.random.default_rng(3)
    h = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    g = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    out = fuse(h, GuidanceSequence(g, []))
    T.backward(T.sum_(T.tanh(out)))
    np.testing.assert_array_equal(h.grad, g.grad)


def test_disabled_mlca_equals_zero_guidance(params):
    stack = synth_stack(4, SynthConfig(frame_size=32, n_layers=3))
    seq = assemble_sequence(stack, 8, CFG.max_layers)
    inp = ModelInput(seq.tokens[None], seq.positions[None], np.ones((1, len(seq)), bool), np.array([0.3]), [[1]])
    off = forward_batch(params, inp, None).data
    zero = forward_batch(params, inp, Tensor(np.zeros((1, len(seq), 32)))).data
    np.testing.assert_array_equal(off, zero)


def test_mlca_every_block_changes_output():
    cfg = ModelConfig(d_model=32, n_heads=2, n_blocks=2, frame=32, max_layers=4, mlca_every_block=True)
    p_every, p_once = init_params(cfg, 0), init_params(CFG, 0)
    stack = synth_stack(4, SynthConfig(frame_size=32, n_layers=2))
    seq = assemble_sequence(stack, 8, CFG.max_layers)
    inp = ModelInput(seq.tokens[None], seq.positions[None], np.ones((1, len(seq)), bool), np.array([0.3]), [[1]])
    cond = condition_patches(stack.composite, 8)[None]
    a = forward_batch(p_every, inp, guidance_batch(p_every, cond, inp.positions)).data
    b = forward_batch(p_once, inp, guidance_batch(p_once, cond, inp.positions)).data
    assert not np.allclose(a, b)
