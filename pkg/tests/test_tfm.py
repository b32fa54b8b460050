import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stas.tfm import TemporalSelector, select_lag, truncate

from conftest import gradient_error


def _selector(rank=True, channels=3, in_channels=4, seed=0):
    torch.manual_seed(seed)
    return TemporalSelector(in_channels, channels=channels, rank_regressor=rank)


def _zero_heads(sel, bias=(0.0,) * 5):
    with torch.no_grad():
        sel.bank.head_weight.zero_()
        sel.bank.head_bias.copy_(torch.as_tensor(bias))
        if sel.bank.rain_head is not None:
            for p in sel.bank.rain_head.parameters():
                p.zero_()


def test_zero_plain_heads_give_zero():
    sel = _selector(rank=False)
    _zero_heads(sel)
    for ell in (1, 2, 3, 4):
        for i in range(5):
            out = sel.mtm_forward(torch.randn(2, 4, ell, 5, 5), i)
            assert torch.equal(out, torch.zeros(2))


def test_zero_rank_head_gives_mean_bin_center():
    # uniform softmax over 20 bins of 1.5 mm -> centre of mass at 15 mm
    sel = _selector()
    _zero_heads(sel)
    out = sel.mtm_forward(torch.randn(3, 4, 2, 5, 5), 0)
    torch.testing.assert_close(out, torch.full((3,), 15.0))


def test_length_outside_candidates_rejected():
    sel = _selector()
    with pytest.raises(ValueError, match="candidate"):
        sel.mtm_forward(torch.randn(1, 4, 5, 5, 5), 1)
    with pytest.raises(IndexError):
        sel.mtm_forward(torch.randn(1, 4, 2, 5, 5), 7)


def test_batch_permutation_permutes_outputs():
    sel = _selector()
    seq = torch.randn(6, 4, 3, 5, 5)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    full = sel.bank(seq)
    torch.testing.assert_close(sel.bank(seq[perm]), full[perm], rtol=0, atol=1e-6)


def test_mtm_gradient(double_precision):
    sel = _selector(channels=2, in_channels=2, seed=4).double()
    seq = torch.randn(2, 2, 2, 4, 4, requires_grad=True)
    params = list(sel.bank.parameters())

    def f():
        return sum(sel.mtm_forward(seq, i).pow(2).sum() for i in range(5))

    assert gradient_error(f, [seq, *params]) <= 1e-3


def test_truncate_takes_newest_steps_oldest_first():
    lat = torch.arange(4.0).view(1, 4, 1, 1, 1).expand(1, 4, 2, 3, 3)
    out = truncate(lat, 3)
    assert out.shape == (1, 2, 3, 3, 3)
    assert out[0, 0, :, 0, 0].tolist() == [2.0, 1.0, 0.0]
    with pytest.raises(ValueError):
        truncate(lat, 5)


def test_truncation_consistency():
    sel = _selector()
    lat = torch.randn(3, 4, 4, 5, 5)
    y = torch.randn(3, 5)
    for ell in (1, 2, 3, 4):
        a = sel.temporal_total_loss(lat, y, ell)
        b = sel.temporal_total_loss(lat[:, :ell].clone(), y, ell)
        torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_loss_zero_for_perfect_predictions():
    sel = _selector(rank=False)
    _zero_heads(sel, [1.2, 0.3, -0.4, 0.0, 2.0])
    labels = torch.tensor([[1.2, 0.3, -0.4, 0.0, 2.0]])
    assert sel.temporal_total_loss(torch.randn(1, 2, 4, 5, 5), labels, 2).item() == 0.0


def test_rain_residual_half_costs_one():
    sel = _selector()
    _zero_heads(sel)
    labels = torch.tensor([[14.5, 0.0, 0.0, 0.0, 0.0]])
    loss = sel.temporal_total_loss(torch.randn(1, 3, 4, 5, 5), labels, 3)
    assert loss.item() == pytest.approx(1.0, abs=1e-5)


def test_loss_matches_weighted_absolute_sum():
    rng = np.random.default_rng(9)
    sel = _selector(rank=False)
    mean, std = np.array([0, 288.0, 1008.0, 2.0, 280.0]), np.array([1, 4.0, 5.0, 1.0, 5.0])
    sel.set_label_stats(mean, std)
    for _ in range(20):
        r = rng.normal(size=5)
        _zero_heads(sel, r.astype(np.float32))
        y = mean + std * rng.normal(size=5)
        got = sel.temporal_total_loss(torch.randn(1, 4, 4, 5, 5),
                                      torch.tensor(y, dtype=torch.float32)[None], 4).item()
        t = (y - mean) / std
        assert got == pytest.approx(np.dot([2, 1, 1, 1, 1], np.abs(r - t)), rel=1e-5)


def test_loss_is_nonnegative_and_mae_based():
    sel = _selector(rank=False)
    _zero_heads(sel, [3.0, 0, 0, 0, 0])
    # MAE: residual 3 on rain costs 6, not 18
    assert sel.temporal_total_loss(torch.randn(2, 2, 4, 5, 5), torch.zeros(2, 5), 1).tolist() == [6.0, 6.0]


def test_select_lag_examples():
    assert select_lag({1: 0.9, 2: 0.4, 3: 0.6, 4: 0.7}) == 2
    assert select_lag({1: 0.5, 4: 0.5}) == 1
    with pytest.raises(ValueError):
        select_lag({})


@settings(max_examples=100, deadline=None)
@given(losses=st.lists(st.floats(0.01, 100), min_size=4, max_size=4, unique=True),
       c=st.floats(0.01, 100))
def test_select_lag_rescaling_invariant(losses, c):
    table = dict(zip((1, 2, 3, 4), losses))
    scaled = {k: v * c for k, v in table.items()}
    if len(set(scaled.values())) == 4:
        assert select_lag(table) == select_lag(scaled)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=4))
def test_selected_lag_is_minimal(losses):
    table = dict(enumerate(losses, start=1))
    best = select_lag(table)
    assert all(table[best] <= v for v in table.values())


def test_loss_table_covers_available_lengths():
    sel = _selector()
    assert set(sel.loss_table(torch.randn(2, 3, 4, 5, 5), torch.zeros(2, 5))) == {1, 2, 3}


def test_rigged_module_prefers_three_steps():
    """Constant-one sequences: the padded 3D conv sees more ones as the window grows.

    With all-positive weights the pooled value rises with ell, so a head bias that
    targets the ell=3 value makes ell=3 the unique minimiser.
    """
    sel = TemporalSelector(1, channels=1, rank_regressor=False)
    with torch.no_grad():
        for p in sel.parameters():
            p.fill_(0.1)
    ones = torch.ones(1, 4, 1, 5, 5)
    vals = {ell: sel.bank(truncate(ones, ell))[0] for ell in (1, 2, 3, 4)}
    assert vals[1][0] < vals[2][0] < vals[3][0] < vals[4][0]
    labels = vals[3][None].detach() * sel.label_std + sel.label_mean
    table = {k: v.item() for k, v in sel.loss_table(ones, labels).items()}
    assert select_lag(table) == 3
