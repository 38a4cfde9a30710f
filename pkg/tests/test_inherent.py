import math

import numpy as np
import pytest
import torch

from dstf.inherent import GRUCell, InherentBlock, MultiHeadSelfAttention, gru_step, positional_encoding


@pytest.fixture(autouse=True)
def double_precision():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def zero_(module):
    for p in module.parameters():
        torch.nn.init.zeros_(p)
    return module


# GRU


def scalar_gru(x, h, wx, wh, b, prev_cand=None, literal=False):
    """d=1 GRU with gate order z, r, candidate."""
    z = sigmoid(wx[0] * x + wh[0] * h + b[0])
    r = sigmoid(wx[1] * x + wh[1] * h + b[1])
    cand = math.tanh(wx[2] * x + r * (wh[2] * h + b[2]))
    mix = (prev_cand or 0.0) if literal else h
    return (1 - z) * mix + z * cand, cand


def test_gru_zero_everything():
    cell = zero_(GRUCell(3))
    h, _ = cell(torch.zeros(2, 3), torch.zeros(2, 3))
    assert torch.equal(h, torch.zeros(2, 3))


def test_gru_saturated_update_gate_returns_candidate():
    cell = GRUCell(2)
    with torch.no_grad():
        cell.bias[:2] = 1e3
    x, h = torch.randn(4, 2), torch.randn(4, 2)
    new, cand = cell(x, h)
    torch.testing.assert_close(new, cand)


@pytest.mark.parametrize("literal", [False, True])
def test_gru_scalar_trace(literal):
    cell = GRUCell(1, "literal" if literal else "standard")
    wx, wh, b = [0.5, -0.3, 0.8], [0.2, 0.7, -0.4], [0.1, -0.2, 0.05]
    with torch.no_grad():
        cell.input_weight.copy_(torch.tensor([wx]))
        cell.hidden_weight.copy_(torch.tensor([wh]))
        cell.bias.copy_(torch.tensor(b))
    h, cand = torch.zeros(1, 1), None
    ref_h, ref_c = 0.0, None
    for x in (1.0, -0.5, 2.0):
        with torch.no_grad():
            h, cand = gru_step(torch.tensor([[x]]), h, cell, cand)
        ref_h, ref_c = scalar_gru(x, ref_h, wx, wh, b, ref_c, literal)
        assert float(h) == pytest.approx(ref_h, rel=1e-12)
        assert float(cand) == pytest.approx(ref_c, rel=1e-12)


def test_gru_update_mode_validated():
    with pytest.raises(ValueError):
        GRUCell(2, "other")


# positional encoding


def test_positional_encoding_values():
    pe = positional_encoding(12, 8)
    torch.testing.assert_close(pe[0], torch.tensor([0.0, 1.0] * 4))
    assert float(pe[1, 0]) == pytest.approx(0.841471, abs=1e-6)
    assert pe.abs().max() <= 1.0
    # odd index i=3: cos(t / 10000^(6/8))
    assert float(pe[5, 3]) == pytest.approx(math.cos(5 / 10000 ** (6 / 8)), rel=1e-6)
    with pytest.raises(ValueError):
        positional_encoding(3, 5)


def test_positional_encoding_not_trainable():
    block = InherentBlock(4, 2, 6, 2)
    assert "pos_table" not in dict(block.named_parameters())


# attention


def test_single_step_attention():
    attn = MultiHeadSelfAttention(3, 2)
    h = torch.randn(5, 1, 3)
    out, w = attn(h, return_weights=True)
    assert torch.equal(w, torch.ones(5, 2, 1, 1))
    v = torch.cat([h[:, 0] @ attn.value[s] for s in range(2)], dim=-1)
    torch.testing.assert_close(out[:, 0], v @ attn.output)


def test_attention_rows_stochastic():
    attn = MultiHeadSelfAttention(4, 3)
    _, w = attn(torch.randn(2, 5, 7, 4) * 10, return_weights=True)
    torch.testing.assert_close(w.sum(-1), torch.ones(2, 5, 3, 7))


def test_two_step_scalar_attention_oracle():
    attn = MultiHeadSelfAttention(1, 1)
    q, k, v, o = 0.7, -1.2, 0.4, 1.5
    with torch.no_grad():
        attn.query.fill_(q)
        attn.key.fill_(k)
        attn.value.fill_(v)
        attn.output.fill_(o)
    h = [0.3, -2.0]
    out = attn(torch.tensor([[[h[0]], [h[1]]]]))[0, :, 0]
    for i in range(2):
        scores = [(h[i] * q) * (h[j] * k) for j in range(2)]
        e = [math.exp(s) for s in scores]
        ref = sum(e[j] / sum(e) * h[j] * v for j in range(2)) * o
        assert out[i].item() == pytest.approx(ref, rel=1e-12)


def test_attend_last_matches_full_attention():
    attn = MultiHeadSelfAttention(6, 4)
    h = torch.randn(2, 3, 9, 6)
    full, wf = attn(h, return_weights=True)
    last, wl = attn.attend_last(h, return_weights=True)
    torch.testing.assert_close(last, full[..., -1, :])
    torch.testing.assert_close(wl, wf[..., -1, :])


# block


def test_block_shapes_and_node_independence():
    block = InherentBlock(4, 2, 6, 3)
    x = torch.randn(2, 6, 5, 4)
    h, f, b = block(x)
    assert h.shape == (2, 6, 5, 4) and f.shape == (2, 3, 5, 4) and b.shape == x.shape
    x2 = x.clone()
    x2[:, :, 1] = x[:, :, 3]
    h2, f2, _ = block(x2)
    torch.testing.assert_close(h2[:, :, 1], h2[:, :, 3])
    torch.testing.assert_close(f2[:, :, 1], f2[:, :, 3])
    # perturbing node 4 leaves node 0 untouched
    x3 = x.clone()
    x3[:, :, 4] += 10.0
    h3, f3, _ = block(x3)
    assert torch.equal(h3[:, :, 0], h[:, :, 0]) and torch.equal(f3[:, :, 0], f[:, :, 0])


def composed_hidden(block, series):
    """Hidden states for one node from the cell, the table and the attention module separately."""
    state, cand, outs = torch.zeros(1, series.shape[-1]), None, []
    for t in range(series.shape[0]):
        state, cand = block.gru(series[t : t + 1], state, cand)
        outs.append(state[0])
    seq = torch.stack(outs)
    pe = positional_encoding(series.shape[0], series.shape[-1])
    return block.attention(seq + pe), seq, state, cand


def test_single_node_trace():
    block = InherentBlock(2, 2, 2, 1)
    x = torch.randn(1, 2, 1, 2)
    h, _, _ = block(x)
    ref, _, _, _ = composed_hidden(block, x[0, :, 0])
    torch.testing.assert_close(h[0, :, 0], ref)


def test_one_slide_oracle():
    block = InherentBlock(2, 2, 3, 1)
    x = torch.randn(1, 3, 1, 2)
    _, f, _ = block(x)
    h, seq, state, cand = composed_hidden(block, x[0, :, 0])
    step = block.pseudo_input(h[-1:])
    state, _ = block.gru(step, state, cand)
    window = torch.cat([seq[1:], state]) + positional_encoding(3, 2)
    ref = block.attention(window)[-1]
    torch.testing.assert_close(f[0, 0, 0], ref)


def test_zero_params_zero_forecast():
    block = zero_(InherentBlock(4, 2, 5, 3))
    _, f, b = block(torch.zeros(1, 5, 2, 4))
    assert torch.equal(f, torch.zeros(1, 3, 2, 4))
    assert torch.equal(b, torch.zeros(1, 5, 2, 4))


def test_backcast_nonnegative_and_oracle():
    block = InherentBlock(4, 1, 4, 1)
    h = torch.randn(2, 4, 3, 4)
    b = block.backcast(h)
    assert (b >= 0).all()
    w, bias = block.backcast_fc.weight.detach().numpy(), block.backcast_fc.bias.detach().numpy()
    np.testing.assert_allclose(b.detach().numpy(), np.maximum(h.numpy() @ w.T + bias, 0.0), rtol=1e-12)


@pytest.mark.parametrize("use_gru,use_attention", [(False, True), (True, False), (False, False)])
def test_component_toggles(use_gru, use_attention):
    block = InherentBlock(4, 2, 6, 2, use_gru=use_gru, use_attention=use_attention)
    h, f, _ = block(torch.randn(1, 6, 3, 4))
    assert h.shape == (1, 6, 3, 4) and f.shape == (1, 2, 3, 4)
    assert hasattr(block, "gru") == use_gru and hasattr(block, "attention") == use_attention


def test_direct_head():
    block = InherentBlock(4, 2, 6, 5, autoregressive=False)
    _, f, _ = block(torch.randn(2, 6, 3, 4))
    assert f.shape == (2, 5, 3, 4)
