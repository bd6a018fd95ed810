"""Codec primitive tests: range coder, entropy model, quantization, SVD
embedding. Expected values come from independent oracles (Shannon entropy
of the empirical distribution, scipy singular values, exhaustive sweeps).
"""

import numpy as np
import pytest
import scipy.linalg

from splatstream.codec.embedding import DecoderWeights, decode_attributes, fit_embedding
from splatstream.codec.entropy import (
    TOTAL,
    EntropyModel,
    estimate_bits,
    fit_entropy_model,
)
from splatstream.codec.quantization import (
    QuantizationSpec,
    inject_noise,
    quantize,
    rd_select_step,
    symbols_for,
)
from splatstream.codec.rangecoder import RangeCoderError, ac_decode, ac_encode


def shannon_bits(symbols):
    """Oracle: empirical Shannon information content of a symbol stream."""
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / counts.sum()
    return -np.sum(counts * np.log2(p))


# ---------------------------------------------------------------------------
# range coder
# ---------------------------------------------------------------------------

def test_empty_stream_round_trip():
    model = EntropyModel.uniform(0, 3)
    data = ac_encode([], model)
    assert len(data) <= 8
    assert list(ac_decode(data, model, 0)) == []


def test_single_symbol_round_trip():
    model = EntropyModel.uniform(-2, 2)
    data = ac_encode([1], model)
    assert list(ac_decode(data, model, 1)) == [1]


def test_skewed_stream_length_matches_entropy_oracle():
    rng = np.random.default_rng(100)
    n = 100_000
    symbols = rng.choice(4, size=n, p=[0.7, 0.2, 0.05, 0.05])
    model = EntropyModel.from_pmf(0, [0.7, 0.2, 0.05, 0.05])
    data = ac_encode(symbols, model)
    assert np.array_equal(ac_decode(data, model, n), symbols)
    ideal = shannon_bits(symbols)          # ~= n * H(0.7,...) ~= 1.257 n
    assert len(data) * 8 <= ideal * 1.02 + 64
    assert len(data) * 8 >= ideal * 0.98


def test_fuzzed_round_trips_exact():
    rng = np.random.default_rng(101)
    total_symbols = 0
    streams = 0
    while total_symbols < 100_000:
        alpha = int(rng.integers(2, 40))
        lo = int(rng.integers(-50, 50))
        weights = rng.uniform(0.01, 1.0, alpha)
        model = EntropyModel.from_pmf(lo, weights / weights.sum())
        n = int(rng.integers(0, 2000))
        symbols = rng.integers(lo, lo + alpha, size=n)
        data = ac_encode(symbols, model)
        assert np.array_equal(ac_decode(data, model, n), symbols)
        total_symbols += n
        streams += 1
    assert streams > 20


def test_encode_rejects_out_of_alphabet():
    model = EntropyModel.uniform(0, 3)
    with pytest.raises(RangeCoderError):
        ac_encode([7], model)


def test_decode_truncated_stream_errors():
    model = EntropyModel.uniform(0, 255)
    rng = np.random.default_rng(5)
    symbols = rng.integers(0, 256, size=500)
    data = ac_encode(symbols, model)
    with pytest.raises(RangeCoderError):
        ac_decode(data[: len(data) // 2], model, 500)


def test_coded_length_vs_estimate():
    rng = np.random.default_rng(102)
    for _ in range(5):
        symbols = np.round(rng.laplace(0, 4, size=20_000)).astype(np.int64)
        model = fit_entropy_model(symbols)
        est = estimate_bits(symbols, model)
        coded_bits = len(ac_encode(symbols, model)) * 8
        assert coded_bits <= est * 1.02 + 64
        assert coded_bits >= est / 8 - 64  # sanity floor
        assert len(ac_encode(symbols, model)) >= est / 8 - 8


def test_rate_monotone_in_step():
    rng = np.random.default_rng(103)
    x = rng.normal(0, 1.0, size=5000)
    lengths = []
    for st in (0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64, 1.28, 2.56, 5.12):
        syms = np.round(x / st).astype(np.int64)
        model = fit_entropy_model(syms)
        lengths.append(len(ac_encode(syms, model)))
    inversions = sum(1 for a, b in zip(lengths, lengths[1:]) if b > a)
    assert inversions <= 1
    assert lengths[-1] < lengths[0]


def test_codec_determinism():
    rng = np.random.default_rng(104)
    symbols = rng.integers(-10, 10, size=3000)
    model = fit_entropy_model(symbols)
    assert ac_encode(symbols, model) == ac_encode(symbols, model)


# ---------------------------------------------------------------------------
# entropy model
# ---------------------------------------------------------------------------

def test_uniform_two_symbol_model_exact_bits():
    model = EntropyModel.uniform(0, 1)
    n = 777
    symbols = np.tile([0, 1], n)[:n]
    assert estimate_bits(symbols, model) == pytest.approx(n, abs=1e-9)


def test_certain_symbol_zero_bits():
    model = EntropyModel(0, np.array([TOTAL], dtype=np.uint32))
    assert estimate_bits(np.zeros(50, dtype=int), model) == pytest.approx(0.0)


def test_degenerate_fit_low_rate():
    symbols = np.full(1000, 7)
    model = fit_entropy_model(symbols)
    assert estimate_bits(symbols, model) / 1000 <= 0.1
    assert model.b == pytest.approx(1e-3)


def test_symmetric_symbols_centered():
    model = fit_entropy_model(np.array([-1, 1] * 500))
    assert model.mu == pytest.approx(0.0)


def test_laplace_fit_near_shannon():
    rng = np.random.default_rng(105)
    symbols = np.round(rng.laplace(3.0, 6.0, size=50_000)).astype(np.int64)
    model = fit_entropy_model(symbols)
    est = estimate_bits(symbols, model)
    ideal = shannon_bits(symbols)
    assert est <= ideal * 1.03
    assert est >= ideal * 0.97


def test_pmf_sums_to_one():
    rng = np.random.default_rng(106)
    model = fit_entropy_model(rng.integers(-30, 30, size=2000))
    assert model.pmf().sum() == pytest.approx(1.0, abs=1e-9)
    assert model.freqs.min() >= 1


def test_estimate_nonnegative_and_finite_outside_alphabet():
    model = EntropyModel.uniform(0, 3)
    bits = estimate_bits(np.array([100]), model)
    assert np.isfinite(bits) and bits == pytest.approx(32.0)


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

def test_quantize_example():
    spec = QuantizationSpec.uniform(0.5)
    assert quantize(np.array([1.23]), spec)[0] == pytest.approx(1.0)


def test_quantize_multiples_unchanged():
    spec = QuantizationSpec.uniform(0.25)
    x = np.array([-1.5, 0.0, 0.75, 2.25])
    assert np.array_equal(quantize(x, spec), x)


def test_quantize_error_bound_and_idempotence():
    rng = np.random.default_rng(107)
    x = rng.uniform(-100, 100, size=100_000)
    for st in (0.01, 0.3, 2.5):
        spec = QuantizationSpec.uniform(st)
        q = quantize(x, spec)
        assert np.max(np.abs(x - q)) <= st / 2 + 1e-12
        assert np.array_equal(quantize(q, spec), q)


def test_quantize_per_channel_steps():
    spec = QuantizationSpec(np.array([0.1, 1.0]))
    x = np.array([[0.26, 0.26], [1.74, 1.74]])
    assert np.allclose(quantize(x, spec), [[0.3, 0.0], [1.7, 2.0]])


def test_inject_noise_small_step_identity():
    rng_x = np.random.default_rng(1).uniform(-1, 1, 100)
    spec = QuantizationSpec.uniform(1e-12)
    assert np.max(np.abs(inject_noise(rng_x, spec, 0) - rng_x)) <= 1e-12


def test_inject_noise_deterministic():
    x = np.linspace(-1, 1, 50)
    spec = QuantizationSpec.uniform(0.2)
    assert np.array_equal(inject_noise(x, spec, 42), inject_noise(x, spec, 42))
    assert not np.array_equal(inject_noise(x, spec, 42),
                              inject_noise(x, spec, 43))


def test_inject_noise_moments():
    st = 0.4
    n = 1_000_000
    spec = QuantizationSpec.uniform(st)
    noise = inject_noise(np.zeros(n), spec, 7)
    sigma = st / np.sqrt(12)
    assert abs(noise.mean()) <= 3 * sigma / np.sqrt(n)
    assert abs(noise.var() - st ** 2 / 12) <= 0.05 * st ** 2 / 12
    assert noise.min() >= -st / 2 and noise.max() <= st / 2


# ---------------------------------------------------------------------------
# rd_select_step
# ---------------------------------------------------------------------------

def _rd_cost(F, st, distortion, lam):
    spec = QuantizationSpec.uniform(st, F.shape[-1] if F.ndim > 1 else 1)
    cols = F.reshape(-1, spec.steps.size)
    syms = symbols_for(cols, spec)
    bits = sum(estimate_bits(syms[:, c], fit_entropy_model(syms[:, c]))
               for c in range(spec.steps.size))
    return lam * bits + distortion(quantize(F, spec))


def test_rd_zero_lambda_picks_smallest():
    rng = np.random.default_rng(108)
    F = rng.normal(size=(200, 4))
    spec = rd_select_step(F, [0.01, 0.05, 0.2, 1.0],
                          lambda q: float(np.sum((q - F) ** 2)), 0.0)
    assert spec.steps[0] == pytest.approx(0.01)


def test_rd_zero_distortion_picks_largest():
    rng = np.random.default_rng(109)
    F = rng.normal(size=(200, 4))
    spec = rd_select_step(F, [0.01, 0.05, 0.2, 1.0], lambda q: 0.0, 0.0025)
    assert spec.steps[0] == pytest.approx(1.0)


def test_rd_matches_exhaustive_sweep():
    rng = np.random.default_rng(110)
    F = rng.normal(size=(300, 6))
    candidates = [0.02, 0.06, 0.1, 0.3, 0.9]
    lam = 0.001

    def distortion(q):
        return 50.0 * float(np.sum((q - F) ** 2))

    chosen = rd_select_step(F, candidates, distortion, lam).steps[0]
    costs = {st: _rd_cost(F, st, distortion, lam) for st in candidates}
    best = min(sorted(candidates, reverse=True), key=lambda s: costs[s])
    assert chosen == pytest.approx(best)


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def test_full_rank_embedding_exact():
    rng = np.random.default_rng(111)
    attrs = rng.normal(size=(40, 16))
    emb, w = fit_embedding(attrs, 16)
    rec = decode_attributes(emb, w)
    assert np.max(np.abs(rec - attrs)) < 1e-5


def test_rank_one_exact_at_d1():
    rng = np.random.default_rng(112)
    v = rng.normal(size=12)
    coeff = rng.normal(size=30)
    attrs = np.outer(coeff, v)
    emb, w = fit_embedding(attrs, 1)
    assert np.max(np.abs(decode_attributes(emb, w) - attrs)) < 1e-8


def test_embedding_error_matches_singular_value_oracle():
    rng = np.random.default_rng(113)
    attrs = rng.normal(size=(100, 80))
    centered = attrs - attrs.mean(axis=0)
    sv = scipy.linalg.svdvals(centered)
    prev_err = np.inf
    for d in (5, 10, 20, 40, 80):
        emb, w = fit_embedding(attrs, d)
        err = float(np.sum((decode_attributes(emb, w) - attrs) ** 2))
        expected = float(np.sum(sv[d:] ** 2))
        assert err == pytest.approx(expected, abs=1e-6, rel=1e-6)
        assert err <= prev_err + 1e-9
        prev_err = err


def test_embedding_halved_dimension_not_better():
    rng = np.random.default_rng(114)
    attrs = rng.normal(size=(60, 80))
    e50, w50 = fit_embedding(attrs, 50)
    e25, w25 = fit_embedding(attrs, 25)
    err50 = np.sum((decode_attributes(e50, w50) - attrs) ** 2)
    err25 = np.sum((decode_attributes(e25, w25) - attrs) ** 2)
    assert err25 >= err50 - 1e-9


def test_basis_orthonormal_and_deterministic():
    rng = np.random.default_rng(115)
    attrs = rng.normal(size=(10, 24))       # N < A exercises completion
    _, w = fit_embedding(attrs, 20)
    gram = w.basis.T @ w.basis
    assert np.max(np.abs(gram - np.eye(20))) < 1e-6
    _, w2 = fit_embedding(attrs, 20)
    assert np.array_equal(w.basis, w2.basis)


def test_zero_embedding_decodes_to_mean():
    rng = np.random.default_rng(116)
    attrs = rng.normal(size=(30, 8))
    _, w = fit_embedding(attrs, 4)
    assert np.allclose(decode_attributes(np.zeros(4), w), w.mean)


def test_embedding_input_validation():
    with pytest.raises(ValueError):
        fit_embedding(np.zeros((0, 8)), 2)
    with pytest.raises(ValueError):
        fit_embedding(np.zeros((5, 8)), 9)
