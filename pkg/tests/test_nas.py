import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atrc.autodiff import Tensor, gradcheck, tsum
from atrc.autodiff.optim import AdamState
from atrc.contexts import CONTEXT_TYPES, ContextType
from atrc.nas import (
    ArchParams,
    SearchSchedule,
    entropy_per_block,
    entropy_regularizer,
    freeze_check,
    gumbel_softmax_sample,
    lambda_at,
    omega_h_at,
    probability_gap,
    read_arch_file,
    sample_gumbel,
    vote_final_config,
    write_arch_file,
)

G, L, T, S, N = (ContextType.GLOBAL, ContextType.LOCAL, ContextType.T_LABEL,
                 ContextType.S_LABEL, ContextType.NONE)


def test_schedule_endpoints_and_linearity():
    s = SearchSchedule(total_iters=40000)
    assert lambda_at(0, s) == 1.0
    assert lambda_at(40000, s) == pytest.approx(0.05, abs=1e-12)
    assert lambda_at(20000, s) == pytest.approx(0.525, abs=1e-12)
    assert omega_h_at(0, s) == pytest.approx(-0.02)
    assert omega_h_at(40000, s) == pytest.approx(0.06)
    assert omega_h_at(10000, s) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        lambda_at(40001, s)
    with pytest.raises(ValueError):
        SearchSchedule(total_iters=0)


def test_gumbel_noise_distribution():
    g = sample_gumbel(np.random.default_rng(0), 200_000)
    assert np.all(np.isfinite(g))
    assert g.mean() == pytest.approx(0.5772156649, abs=0.01)  # Euler-Mascheroni constant
    assert g.var() == pytest.approx(math.pi ** 2 / 6, abs=0.03)


def test_gumbel_softmax_zero_noise_is_softmax():
    alpha = np.array([[0.3, -1.0, 2.0, 0.0, 0.5]])
    z = gumbel_softmax_sample(Tensor(alpha), 0.5, gumbel=np.zeros_like(alpha)).data
    e = np.exp(alpha / 0.5)
    assert np.allclose(z, e / e.sum(), atol=1e-12)


def test_gumbel_softmax_low_temperature_picks_argmax_frequencies():
    rng = np.random.default_rng(1)
    alpha = np.log(np.array([0.1, 0.2, 0.3, 0.25, 0.15]))
    a = Tensor(np.tile(alpha, (40_000, 1)))
    z = gumbel_softmax_sample(a, 0.01, rng).data
    freq = np.bincount(z.argmax(axis=1), minlength=5) / 40_000
    assert np.abs(freq - np.exp(alpha)).max() < 0.01
    assert np.mean(z.max(axis=1) > 0.99) > 0.95


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=5, max_size=5), st.floats(0.05, 2.0), st.integers(0, 10**6))
def test_gumbel_softmax_on_simplex(alpha, lam, seed):
    z = gumbel_softmax_sample(Tensor(np.array([alpha])), lam, np.random.default_rng(seed)).data
    assert np.all(z >= 0) and abs(z.sum() - 1) < 1e-9


def test_gumbel_softmax_gradcheck():
    g = sample_gumbel(np.random.default_rng(2), (3, 5))
    proj = np.random.default_rng(3).normal(size=(3, 5))
    rep = gradcheck(lambda a: tsum(gumbel_softmax_sample(a, 0.7, gumbel=g) * Tensor(proj)),
                    [np.random.default_rng(4).normal(size=(3, 5))])
    assert rep.passed, rep


def test_entropy_values():
    assert entropy_per_block(np.zeros((1, 5)))[0] == pytest.approx(math.log(5), abs=1e-12)
    assert entropy_per_block(np.array([[1000.0, 0, 0, 0, 0]]))[0] < 1e-12
    p = np.array([0.5, 0.25, 0.125, 0.0625, 0.0625])
    assert entropy_per_block(np.log(p)[None])[0] == pytest.approx(-(p * np.log(p)).sum(), abs=1e-12)


def test_entropy_regularizer_excludes_frozen_rows():
    rng = np.random.default_rng(5)
    alpha = rng.normal(size=(4, 5))
    frozen = np.array([False, True, False, True])
    h = entropy_per_block(alpha)
    reg = entropy_regularizer(Tensor(alpha), frozen).data
    assert float(reg) == pytest.approx(h[[0, 2]].mean(), abs=1e-12)
    assert float(entropy_regularizer(Tensor(alpha), np.ones(4, bool)).data) == 0.0
    rep = gradcheck(lambda a: entropy_regularizer(a, frozen), [alpha])
    assert rep.passed, rep


def test_freeze_rule():
    # gap exactly 0.3 does not freeze; just above does
    p = np.array([0.5, 0.2, 0.1, 0.1, 0.1])
    assert probability_gap(np.log(p)) == pytest.approx(0.3)
    assert freeze_check(np.log(np.array([0.6, 0.2, 0.1, 0.05, 0.05]))) is G
    assert freeze_check(np.zeros(5)) is None
    assert freeze_check(np.log(np.array([0.1, 0.1, 0.15, 0.05, 0.6]))) is N


def test_arch_params_sample_and_freeze():
    arch = ArchParams(2)
    assert arch.alpha.shape == (4, 5) and arch.alpha.dtype == np.float32
    arch.alpha.data[1] = [0, 3.0, 0, 0, 0]
    newly = arch.update_freezes(7, 0.3)
    assert newly == [1] and arch.frozen[1] is L and arch.freeze_iter[1] == 7
    out = arch.sample(1.0, np.random.default_rng(0))
    assert out[1] is L and all(isinstance(o, Tensor) for j, o in enumerate(out) if j != 1)
    arch.fix_block(3, N)
    assert arch.frozen_mask.tolist() == [False, True, False, True]
    assert arch.selections()[1] is L and arch.selections()[3] is N


def test_sample_stream_independent_of_freeze_state():
    a = ArchParams(2)
    b = ArchParams(2)
    b.fix_block(0, N)
    za = a.sample(0.5, np.random.default_rng(9))
    zb = b.sample(0.5, np.random.default_rng(9))
    for j in range(1, 4):
        assert np.array_equal(za[j].data, zb[j].data)


def test_adam_skips_frozen_rows():
    arch = ArchParams(2)
    arch.alpha.data[:] = np.random.default_rng(1).normal(size=(4, 5))
    arch.frozen[2] = T
    before = arch.alpha.data.copy()
    arch.alpha.grad = np.ones_like(arch.alpha.data)
    state = AdamState(lr=0.01)
    arch.adam_step(state)
    after = arch.alpha.data
    assert np.array_equal(after[2], before[2])
    assert np.allclose(after[[0, 1, 3]], before[[0, 1, 3]] - 0.01, atol=1e-6)


def test_vote_plurality_and_ties():
    runs = [[G, T], [G, L], [L, S]]
    assert vote_final_config(runs) == [G, L]  # block 1: three-way tie -> earliest
    assert vote_final_config([[S], [N], [S]]) == [S]
    assert vote_final_config([[N], [L]]) == [L]
    with pytest.raises(ValueError):
        vote_final_config([])
    with pytest.raises(ValueError):
        vote_final_config([[G], [G, L]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.sampled_from(CONTEXT_TYPES), min_size=4, max_size=4), min_size=1, max_size=7))
def test_vote_winner_has_max_count(runs):
    final = vote_final_config(runs)
    for j, ct in enumerate(final):
        counts = {c: sum(r[j] == c for r in runs) for c in CONTEXT_TYPES}
        assert counts[ct] == max(counts.values())
        assert all(c.index >= ct.index for c in CONTEXT_TYPES if counts[c] == counts[ct])


def test_arch_file_round_trip(tmp_path):
    names = ["semseg", "depth", "normals"]
    runs = [[G, L, T, S, N, G, L, T, S], [G, G, T, S, N, N, L, T, T]]
    config = vote_final_config(runs)
    path = write_arch_file(tmp_path / "arch.txt", names, config, runs)
    assert read_arch_file(path, names) == (names, config)
    assert "semseg depth global global=1,local=1" in path.read_text()
    with pytest.raises(ValueError):
        read_arch_file(path, ["semseg", "depth"])
    bad = tmp_path / "bad.txt"
    bad.write_text("hello\n")
    with pytest.raises(ValueError):
        read_arch_file(bad)
    with pytest.raises(ValueError):
        write_arch_file(tmp_path / "x.txt", names, config[:4])
