"""Cost model unit tests: frozen arithmetic plus shape invariants."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdsim.costs import (CostModelParams, NETWORK_PRESETS, chunk_cost,
                         decode_iter_latency, load_calibration,
                         mixed_iter_latency, pages_needed, prefill_latency,
                         transfer_latency)

# Explicit parameters for arithmetic tests (independent of shipped defaults).
REF = CostModelParams(t_chunk_us=50_000, t_prefill_overhead_us=5_000,
                      decode_a_us=2_000.0, decode_b_us=150.0,
                      decode_c_us_per_token=0.25)


def test_prefill_latency_at_saturation_point():
    assert prefill_latency(REF, 512, 1) == 55_000


def test_prefill_latency_two_chunks():
    # 1024 tokens = exactly two chunks of work plus one request's overhead.
    assert prefill_latency(REF, 1024, 1) == 105_000


def test_prefill_latency_flat_below_chunk_size():
    assert prefill_latency(REF, 1, 1) == prefill_latency(REF, 512, 1)
    assert prefill_latency(REF, 300, 2) == 60_000


def test_predictor_tax_is_exactly_ten_percent():
    off = prefill_latency(REF, 512, 1, predictor_on=False)
    on = prefill_latency(REF, 512, 1, predictor_on=True)
    assert on * 10 == off * 11


def test_decode_iter_base_case():
    assert decode_iter_latency(REF, 1, 0) == 2_150


def test_decode_iter_kv_linearity():
    #

    base = decode_iter_latency(REF, 1, 400)
    doubled = decode_iter_latency(REF, 1, 800)
    assert doubled - base == round(0.25 * 400)


def test_decode_batch_arithmetic():
    assert decode_iter_latency(REF, 2, 300) == 2_000 + 300 + 75


def test_heavy_kv_contention_calibration_band():
    # Batch of 128: half holding 512-token KV vs all holding 64-token KV must
    # show a 15%..33% per-iteration latency increase under shipped defaults.
    params = CostModelParams()
    kv_half = 64 * 512 + 64 * 64
    kv_light = 128 * 64
    heavy = decode_iter_latency(params, 128, kv_half)
    light = decode_iter_latency(params, 128, kv_light)
    ratio = heavy / light
    assert 1.15 <= ratio <= 1.33


def test_all_light_batch_throughput_advantage():
    params = CostModelParams()
    heavy = decode_iter_latency(params, 128, 64 * 512 + 64 * 64)
    light = decode_iter_latency(params, 128, 128 * 64)
    assert 128 / light >= 1.10 * (128 / heavy)


def test_mixed_degenerates_to_pure_functions():
    assert mixed_iter_latency(REF, 0, 4, 1000) == decode_iter_latency(REF, 4, 1000)
    assert mixed_iter_latency(REF, 700, 0, 0, n_prefill=2) == prefill_latency(REF, 700, 2)
    with pytest.raises(ValueError):
        mixed_iter_latency(REF, 0, 0, 0)


def test_one_prefill_inflates_light_decode_iteration():
    # A single saturating prompt joining a light decode batch must inflate the
    # iteration at least 3x under shipped defaults.
    params = CostModelParams()
    pure = decode_iter_latency(params, 8, 8 * 64)
    mixed = mixed_iter_latency(params, 512, 8, 8 * 64)
    assert mixed >= 3 * pure


def test_transfer_bytes_and_latency_examples():
    params = CostModelParams(bandwidth_bytes_per_s=25_000_000_000, transfer_fixed_us=0)
    assert 512 * params.kv_bytes_per_token == 419_430_400
    assert abs(transfer_latency(params, 512) - 16_777) <= 1
    nvlink = CostModelParams(bandwidth_bytes_per_s=300_000_000_000, transfer_fixed_us=0)
    assert abs(transfer_latency(nvlink, 512) - 1_398) <= 1


def test_pages_needed_ceiling():
    params = CostModelParams(page_size=16)
    assert pages_needed(params, 0) == 0
    assert pages_needed(params, 16) == 1
    assert pages_needed(params, 17) == 2


def test_prefill_throughput_plateau():
    # tokens/latency net of per-request overhead is constant at and beyond the
    # saturation point, and lower below it.
    def net_rate(tokens):
        return tokens / (prefill_latency(REF, tokens, 1) - REF.t_prefill_overhead_us)

    plateau = [net_rate(512 * k) for k in range(1, 6)]
    assert max(plateau) - min(plateau) < 1e-9
    assert net_rate(256) < plateau[0]


def test_decode_throughput_diminishing_returns():
    params = CostModelParams()
    kv = 4_096
    sizes = list(range(1, 257))
    rates = [b / decode_iter_latency(params, b, kv) for b in sizes]
    assert rates == sorted(rates)
    gains = [rates[i + 1] - rates[i] for i in range(len(rates) - 1)]
    # strictly diminishing marginal gain from each extra request
    assert all(gains[i + 1] <= gains[i] + 1e-12 for i in range(len(gains) - 1))
    # asymptote: throughput never exceeds 1/b and approaches it
    assert all(r < 1 / params.decode_b_us for r in rates)
    assert 8192 / decode_iter_latency(params, 8192, kv) > 0.9 / params.decode_b_us


@given(x=st.integers(1, 10_000), y=st.integers(1, 10_000))
def test_transfer_additivity(x, y):
    params = CostModelParams(transfer_fixed_us=37)
    lhs = transfer_latency(params, x) + transfer_latency(params, y) - params.transfer_fixed_us
    rhs = transfer_latency(params, x + y)
    assert lhs >= rhs
    # One concatenated transfer saves at most the ceiling rounding of one part.
    assert lhs - rhs <= params.transfer_fixed_us + 1


@settings(max_examples=200)
@given(tokens=st.integers(1, 50_000), more=st.integers(0, 50_000),
       n=st.integers(1, 256), extra=st.integers(0, 64),
       batch=st.integers(1, 512), kv=st.integers(0, 500_000))
def test_latency_monotonicity(tokens, more, n, extra, batch, kv):
    params = CostModelParams()
    assert prefill_latency(params, tokens + more, n) >= prefill_latency(params, tokens, n)
    assert prefill_latency(params, tokens, n + extra) >= prefill_latency(params, tokens, n)
    assert decode_iter_latency(params, batch + extra, kv) >= decode_iter_latency(params, batch, kv)
    assert decode_iter_latency(params, batch, kv + more) >= decode_iter_latency(params, batch, kv)
    assert transfer_latency(params, tokens + more) >= transfer_latency(params, tokens)


def test_chunk_cost_sums_to_batch_prefill_latency():
    # Charging per-chunk (overhead on the chunk where a request starts) must
    # reproduce the batch formula over a whole scheduling round.
    n_chunks, n_requests = 7, 5
    per_chunk = [chunk_cost(REF, 1, False) for _ in range(n_requests)]
    per_chunk += [chunk_cost(REF, 0, False) for _ in range(n_chunks - n_requests)]
    assert sum(per_chunk) == prefill_latency(REF, n_chunks * REF.chunk_size, n_requests)


def test_presets():
    assert NETWORK_PRESETS["roce200"][0] == 25_000_000_000
    assert NETWORK_PRESETS["nvlink300"][0] == 300_000_000_000
    indirect = load_calibration({"preset": "indirect"})
    roce = load_calibration({"preset": "roce200"})
    assert indirect.bandwidth_bytes_per_s == roce.bandwidth_bytes_per_s
    assert indirect.transfer_fixed_us > roce.transfer_fixed_us


def test_calibration_loading_and_validation(tmp_path):
    path = tmp_path / "cal.json"
    path.write_text('{"preset": "nvlink300", "t_chunk_us": 40000}')
    params = load_calibration(path)
    assert params.t_chunk_us == 40_000
    assert params.bandwidth_bytes_per_s == 300_000_000_000

    with pytest.raises(ValueError, match="unknown calibration key"):
        load_calibration({"nonsense": 1})
    with pytest.raises(ValueError, match="preset"):
        load_calibration({"preset": "modem56k"})
    with pytest.raises(ValueError, match="page_size must divide"):
        load_calibration({"mem_capacity_tokens": 1001, "page_size": 16})
    with pytest.raises(ValueError, match="bandwidth"):
        load_calibration({"bandwidth_bytes_per_s": 0})
