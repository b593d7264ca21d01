import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from evtlight.pattern import (
    ConfigurationError,
    DomainError,
    GenerationError,
    PatternSizeError,
    PatternSpec,
    SignalSpec,
    SymbolGrid,
    assign_signals,
    check_dmd_budget,
    codeword_index,
    cyclic_windows,
    default_alphabet,
    generate_debruijn,
    generate_psm,
    load_pattern,
    load_statistics,
    make_stripe_pattern,
    save_pattern,
    square_wave_edges,
    verify_psm,
    window_codewords,
)


# --- De Bruijn ---------------------------------------------------------------


def _rotations(seq):
    return {tuple(seq[i:] + seq[:i]) for i in range(len(seq))}


def test_debruijn_k2_n2_is_rotation_of_0011():
    assert tuple(generate_debruijn(2, 2)) in _rotations([0, 0, 1, 1])


def test_debruijn_k2_n3_frozen_and_complete():
    seq = generate_debruijn(2, 3)
    assert seq == [0, 0, 0, 1, 0, 1, 1, 1]
    assert sorted(cyclic_windows(seq, 3)) == sorted(itertools.product(range(2), repeat=3))


@pytest.mark.parametrize("k,n", [(4, 3), (3, 4), (2, 8), (5, 2), (4, 1)])
def test_debruijn_every_word_once(k, n):
    seq = generate_debruijn(k, n)
    assert len(seq) == k**n
    wins = cyclic_windows(seq, n)
    assert len(set(wins)) == k**n


def test_debruijn_exhaustive_up_to_2_16():
    for k in range(2, 5):
        for n in range(1, 9):
            if k**n > 2**16:
                continue
            seq = generate_debruijn(k, n)
            assert len(set(cyclic_windows(seq, n))) == k**n == len(seq)


def test_debruijn_size_cap():
    with pytest.raises(PatternSizeError):
        generate_debruijn(4, 20, max_length=2**20)


def test_debruijn_bad_args():
    with pytest.raises(ValueError):
        generate_debruijn(1, 3)
    with pytest.raises(ValueError):
        generate_debruijn(2, 0)


# --- PSM -------------------------------------------------------------------------


def _brute_pairs(symbols, m, n):
    cw = window_codewords(symbols, (m, n)).reshape(-1, m * n)
    return min(int((a != b).sum()) for a, b in itertools.combinations(cw, 2))


def test_psm_paper_size_verifies():
    grid = generate_psm(20, 30, 4, (3, 3), 2, 42)
    rep = verify_psm(grid)
    assert rep.unique and rep.min_hamming >= 2 and rep.ok
    assert grid.symbols.shape == (20, 30)


def test_psm_single_window_trivial():
    grid = generate_psm(2, 2, 2, (2, 2), 1, 0)
    rep = verify_psm(grid)
    assert rep.unique and rep.min_hamming is None


def test_psm_4x4_binary_all_windows_distinct():
    grid = generate_psm(4, 4, 2, (2, 2), 1, 3)
    cw = window_codewords(grid.symbols, (2, 2)).reshape(-1, 4)
    assert len({tuple(c) for c in cw.tolist()}) == 9


def test_psm_deterministic():
    a = generate_psm(10, 12, 4, (3, 3), 2, 123)
    b = generate_psm(10, 12, 4, (3, 3), 2, 123)
    assert np.array_equal(a.symbols, b.symbols)
    assert not np.array_equal(a.symbols, generate_psm(10, 12, 4, (3, 3), 2, 124).symbols)


def test_psm_h3_matches_brute_force():
    grid = generate_psm(8, 10, 4, (3, 3), 3, 5)
    assert _brute_pairs(grid.symbols, 3, 3) >= 3
    assert verify_psm(grid).min_hamming == _brute_pairs(grid.symbols, 3, 3)


def test_psm_unsatisfiable_reports_attempts():
    # 6x6 binary 2x2 grid needs 25 distinct windows out of 16 possible.
    with pytest.raises(ValueError):
        generate_psm(6, 6, 2, (2, 2), 1, 0)
    with pytest.raises(GenerationError) as exc:
        generate_psm(4, 5, 2, (2, 2), 3, 0, max_shuffles=50, max_restarts=3)
    assert exc.value.restarts == 4 and exc.value.shuffles > 0


def test_codeword_index_base_k():
    assert codeword_index([1, 0, 2], 3) == 1 * 9 + 0 * 3 + 2
    assert codeword_index([3, 3], 4) == 15


def test_verify_two_identical_windows():
    sym = np.array([[0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1]])
    rep = verify_psm(sym, (2, 2), 1)
    assert not rep.unique
    pairs = {(a, b) for a, b, d in rep.violations if d == 0}
    assert ((0, 0), (0, 2)) in pairs


def test_verify_1x1_repeated_symbol():
    rep = verify_psm(np.array([[0, 1, 0]]), (1, 1), 1)
    assert not rep.unique and rep.n_violations == 1


@given(st.integers(0, 2**32))
def test_psm_generated_always_verifies(seed):
    grid = generate_psm(6, 7, 4, (2, 2), 2, seed)
    rep = verify_psm(grid)
    assert rep.ok and rep.min_hamming == _brute_pairs(grid.symbols, 2, 2)


# --- signals --------------------------------------------------------------------


def test_signal_spec_validation():
    with pytest.raises(ConfigurationError):
        SignalSpec(0, 0.5)
    with pytest.raises(ConfigurationError):
        SignalSpec(20, 1.0)
    with pytest.raises(ConfigurationError):
        SignalSpec(20, 0.5, 1.0)
    assert SignalSpec(20, 0.5).period_us == 50_000


def test_square_wave_20hz_half():
    t, p = square_wave_edges(SignalSpec(20, 0.5), 100_000, 700)
    # Edges at 0, 25, 50, 75 ms, each within half a step.
    assert p.tolist() == [1, -1, 1, -1]
    assert np.all(np.abs(t - [0, 25_000, 50_000, 75_000]) <= 350)


def test_square_wave_quarter_duty():
    t, p = square_wave_edges(SignalSpec(20, 0.25), 100_000, 1)
    assert t.tolist() == [0, 12_500, 50_000, 62_500]
    on = np.diff(t)[0::2]
    assert on.tolist() == [12_500, 12_500]


def test_square_wave_phase_shift_is_delay():
    base_t, base_p = square_wave_edges(SignalSpec(20, 0.5), 200_000, 1)
    sh_t, sh_p = square_wave_edges(SignalSpec(20, 0.5, 0.5), 200_000, 1)
    # Phase 0.5 delays by T/2 (the earliest rise moves to -T/2, outside the window).
    assert np.array_equal(sh_t[sh_t >= 25_000][1:] - 25_000, base_t[base_t < 175_000][1:])


def test_default_alphabet():
    a = default_alphabet()
    assert [a[s].dutycycle for s in range(4)] == [0.2, 0.4, 0.6, 0.8]
    assert {a[s].frequency for s in range(4)} == {20.0}


def test_assign_signals_single_dot():
    grid = SymbolGrid(np.zeros((1, 1), dtype=int), k=1, window=(1, 1))
    pat = assign_signals(grid, {0: SignalSpec(40, 0.3)}, seed=1)
    sig = pat.signal(0, 0)
    assert (sig.frequency, sig.dutycycle) == (40, 0.3)
    assert 0 <= sig.phase < 1


def test_assign_signals_missing_symbol():
    grid = generate_psm(5, 5, 4, (3, 3), 1, 0)
    with pytest.raises(ConfigurationError):
        assign_signals(grid, {0: SignalSpec(20, 0.5)})


def test_phases_uniform_ks():
    grid = generate_psm(20, 30, 4, (3, 3), 2, 42)
    pat = assign_signals(grid, seed=9)
    assert pat.phases.size == 600
    assert stats.kstest(pat.phases.reshape(-1), "uniform").pvalue > 0.01


def test_assign_signals_deterministic():
    grid = generate_psm(20, 30, 4, (3, 3), 2, 42)
    a, b = assign_signals(grid, seed=3), assign_signals(grid, seed=3)
    assert np.array_equal(a.phases, b.phases)


def test_pattern_spec_invariants():
    grid = generate_psm(5, 5, 4, (3, 3), 1, 0)
    with pytest.raises(ConfigurationError):
        PatternSpec(grid, default_alphabet(), np.zeros((5, 5)), dot_pitch=2, dot_size=3)


def test_pattern_origin_centred():
    grid = generate_psm(20, 30, 4, (3, 3), 2, 42)
    pat = assign_signals(grid)
    assert pat.origin == (36.0, 44.0)
    assert pat.projector_position(19, 29) == (36.0 + 29 * 8, 44.0 + 19 * 8)


# --- load statistics ---------------------------------------------------------------


def _uniform_pattern(n_by_period, shape):
    symbols, alphabet, s = [], {}, 0
    for n, period in n_by_period:
        alphabet[s] = SignalSpec(1e6 / period, 0.5)
        symbols += [s] * n
        s += 1
    grid = SymbolGrid(np.array(symbols).reshape(shape), k=s, window=(1, 1))
    return PatternSpec(grid, alphabet, np.zeros(shape), dot_pitch=1, dot_size=1)


def test_load_900_dots_20hz():
    pat = _uniform_pattern([(900, 50_000)], (30, 30))
    ls = load_statistics(pat, 1000)
    assert ls.mean == pytest.approx(36.0)
    assert ls.variance == pytest.approx(34.56)
    assert ls.classes == ((900, 50_000.0, 0.04),)


def test_load_two_class_mean():
    pat = _uniform_pattern([(100, 50_000), (300, 25_000)], (20, 20))
    ls = load_statistics(pat, 500)
    assert ls.mean == pytest.approx(14.0)
    assert ls.variance == pytest.approx(100 * 0.02 * 0.98 + 300 * 0.04 * 0.96)


def test_load_zero_window():
    pat = _uniform_pattern([(900, 50_000)], (30, 30))
    ls = load_statistics(pat, 0)
    assert ls.mean == 0 and ls.variance == 0


def test_load_variance_bounded_by_mean():
    pat = _uniform_pattern([(100, 50_000), (300, 25_000)], (20, 20))
    for dt in (0, 10, 100, 1000, 5000, 12_000):
        ls = load_statistics(pat, dt)
        assert ls.variance <= ls.mean + 1e-12


def test_load_domain_error():
    pat = _uniform_pattern([(900, 50_000)], (30, 30))
    with pytest.raises(DomainError):
        load_statistics(pat, 25_000)


# --- DMD budget ----------------------------------------------------------------------


def _in_phase(rows, cols, size):
    grid = SymbolGrid(np.zeros((rows, cols), dtype=int), k=1, window=(1, 1))
    return PatternSpec(grid, {0: SignalSpec(20, 0.5, 0.1)}, np.full((rows, cols), 0.1),
                       dot_pitch=size, dot_size=size, origin=(0, 0))


def test_budget_600_dots_4_mirrors():
    rep = check_dmd_budget(_in_phase(20, 30, 2))
    assert rep.max_changes == 2400 and rep.feasible
    assert sorted(set(rep.changes.tolist())) == [0, 2400]


def test_budget_empty():
    rep = check_dmd_budget(None)
    assert rep.max_changes == 0 and rep.feasible


def test_budget_infeasible_flagged():
    rep = check_dmd_budget(_in_phase(20, 30, 3))
    assert rep.max_changes == 5400 and not rep.feasible
    # Rising and falling edges both switch every mirror.
    assert len(rep.infeasible_steps) == 2 and rep.worst_step in rep.infeasible_steps
    assert all(rep.changes[i] == 5400 for i in rep.infeasible_steps)


def test_budget_step_floor():
    with pytest.raises(ValueError):
        check_dmd_budget(_in_phase(2, 2, 1), step_us=100)


# --- pattern file -------------------------------------------------------------------


def test_pattern_file_round_trip(tmp_path):
    grid = generate_psm(20, 30, 4, (3, 3), 2, 42)
    pat = assign_signals(grid, seed=1)
    path = tmp_path / "p.pat"
    save_pattern(pat, path)
    back = load_pattern(path)
    assert np.array_equal(back.grid.symbols, pat.grid.symbols)
    assert np.array_equal(back.phases, pat.phases)
    assert back.alphabet == pat.alphabet
    assert verify_psm(back.grid).ok
    save_pattern(back, tmp_path / "q.pat")
    assert path.read_bytes() == (tmp_path / "q.pat").read_bytes()


def test_pattern_file_key_order(tmp_path):
    import json

    path = tmp_path / "p.pat"
    save_pattern(make_stripe_pattern(2, 8, 4), path)
    keys = list(json.loads(path.read_text()))
    assert keys[:3] == ["format", "kind", "rows"]
    assert keys[-3:] == ["alphabet", "symbols", "phases"]


def test_bad_pattern_file(tmp_path):
    path = tmp_path / "bad.pat"
    path.write_text('{"rows": 2}')
    with pytest.raises(ConfigurationError):
        load_pattern(path)
