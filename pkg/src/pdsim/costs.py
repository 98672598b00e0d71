"""Parametric accelerator and network cost model.

All latencies are returned as integer microseconds. The functions are pure
given a CostModelParams, so one params object can be shared read-only by every
instance in a run.

Functional forms:
  prefill:   t_chunk * max(1, tokens / chunk_size) + n_requests * t_overhead,
             times a multiplicative tax when the length predictor co-runs.
             Flat up to chunk_size (the saturation point), linear beyond.
  decode:    a + b * batch_size + c * kv_tokens  (memory-bound phenomenology)
  transfer:  fixed + tokens * kv_bytes_per_token / bandwidth, rounded up.

The shipped defaults are calibration constants chosen so the model reproduces
the measured interference directions (saturation plateau, mixed-batch blowup,
heavy-KV contention); they are not hardware ground truth. kv_bytes_per_token
defaults to an OPT-13B-shaped cache: 2 (K and V) * 40 layers * 5120 hidden
* 2 bytes = 819,200 bytes per token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path


#: Network presets: (bandwidth bytes/s, per-transfer fixed cost us).
#: `indirect` models a bounce through host memory on the NIC-class link:
#: same bandwidth, doubled setup cost (2 x 100us nominal).
NETWORK_PRESETS: dict[str, tuple[int, int]] = {
    "roce200": (25_000_000_000, 0),
    "nvlink300": (300_000_000_000, 0),
    "indirect": (25_000_000_000, 200),
}


@dataclass(frozen=True)
class CostModelParams:
    chunk_size: int = 512
    t_chunk_us: int = 50_000
    t_prefill_overhead_us: int = 5_000
    decode_a_us: float = 6_000.0
    decode_b_us: float = 20.0
    decode_c_us_per_token: float = 0.07
    mem_capacity_tokens: int = 144_000
    page_size: int = 16
    swap_penalty_us_per_page: float = 500.0
    predictor_parallel_tax: float = 1.10
    predictor_sequential_divisor: int = 10
    kv_bytes_per_token: int = 819_200
    bandwidth_bytes_per_s: int = 25_000_000_000
    transfer_fixed_us: int = 0

    def validate(self) -> None:
        if self.chunk_size < 1:
            raise ValueError("cost_model.chunk_size: must be >= 1")
        for key in ("t_chunk_us", "t_prefill_overhead_us", "decode_a_us",
                    "decode_b_us", "swap_penalty_us_per_page"):
            if getattr(self, key) <= 0:
                raise ValueError(f"cost_model.{key}: must be > 0")
        if self.decode_c_us_per_token < 0:
            raise ValueError("cost_model.decode_c_us_per_token: must be >= 0")
        if self.page_size < 1:
            raise ValueError("cost_model.page_size: must be >= 1")
        if self.mem_capacity_tokens % self.page_size != 0:
            raise ValueError("cost_model.mem_capacity_tokens: page_size must divide it")
        if self.bandwidth_bytes_per_s <= 0:
            raise ValueError("cost_model.bandwidth_bytes_per_s: must be > 0")
        if self.kv_bytes_per_token < 1:
            raise ValueError("cost_model.kv_bytes_per_token: must be >= 1")
        if self.transfer_fixed_us < 0:
            raise ValueError("cost_model.transfer_fixed_us: must be >= 0")
        if self.predictor_parallel_tax < 1.0:
            raise ValueError("cost_model.predictor_parallel_tax: must be >= 1.0")

    @property
    def capacity_pages(self) -> int:
        return self.mem_capacity_tokens // self.page_size


def pages_needed(params: CostModelParams, tokens: int) -> int:
    """KV pages needed to hold `tokens` tokens (ceiling division)."""
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    return -(-tokens // params.page_size)


def prefill_latency(params: CostModelParams, total_tokens: int, n_requests: int,
                    predictor_on: bool = False) -> int:
    """Latency of one prefill batch of `total_tokens` across `n_requests`.

    predictor_on applies the parallel-mode co-run tax.
    """
    if total_tokens < 1:
        raise ValueError("total_tokens must be >= 1")
    chunks = max(1.0, total_tokens / params.chunk_size)
    base = params.t_chunk_us * chunks + n_requests * params.t_prefill_overhead_us
    if predictor_on:
        base *= params.predictor_parallel_tax
    return round(base)


def decode_iter_latency(params: CostModelParams, batch_size: int, kv_tokens: int) -> int:
    """Latency of one continuous-batching decode iteration."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return round(params.decode_a_us + params.decode_b_us * batch_size
                 + params.decode_c_us_per_token * kv_tokens)


def mixed_iter_latency(params: CostModelParams, prefill_tokens: int,
                       decode_batch: int, kv_tokens: int,
                       n_prefill: int = 1) -> int:
    """Latency of one coupled iteration mixing prefill and decode work.

    Degenerates to the pure prefill or pure decode cost when one side is
    empty. Only the coupled baseline uses this.
    """
    if prefill_tokens == 0 and decode_batch == 0:
        raise ValueError("mixed iteration needs prefill tokens or a decode batch")
    if prefill_tokens == 0:
        return decode_iter_latency(params, decode_batch, kv_tokens)
    if decode_batch == 0:
        return prefill_latency(params, prefill_tokens, n_prefill)
    return (prefill_latency(params, prefill_tokens, n_prefill)
            + decode_iter_latency(params, decode_batch, kv_tokens))


def transfer_latency(params: CostModelParams, tokens: int) -> int:
    """KV transfer latency for `tokens` tokens, rounded up to whole us.

    Integer arithmetic throughout so the ceiling never flips on float error.
    """
    if tokens < 1:
        raise ValueError("tokens must be >= 1")
    bytes_total = tokens * params.kv_bytes_per_token
    wire_us = -(-(bytes_total * 1_000_000) // params.bandwidth_bytes_per_s)
    return params.transfer_fixed_us + wire_us


def chunk_cost(params: CostModelParams, slices_starting: int, predictor_on: bool) -> int:
    """Cost of executing one fixed-size chunk.

    A padded chunk costs the same as a full one. Per-request overhead is
    charged once, on the chunk where a request's first slice begins, so a
    scheduling round's chunks sum to prefill_latency(padded_total, n).
    """
    base = params.t_chunk_us + slices_starting * params.t_prefill_overhead_us
    if predictor_on:
        base *= params.predictor_parallel_tax
    return round(base)


def sequential_predictor_cost(params: CostModelParams) -> int:
    """Extra latency per scheduling round when the predictor runs sequentially.

    The prediction model is roughly one order of magnitude faster than the
    main model, so one predictor pass costs t_chunk / divisor.
    """
    return params.t_chunk_us // params.predictor_sequential_divisor


def load_calibration(source: dict | str | Path) -> CostModelParams:
    """Build params from a JSON calibration file or an overrides dict.

    A `preset` key selects a network preset (roce200 | nvlink300 | indirect);
    any other key overrides the matching CostModelParams field.
    """
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            data = json.load(fh)
    else:
        data = dict(source)
    params = CostModelParams()
    preset = data.pop("preset", None)
    if preset is not None:
        if preset not in NETWORK_PRESETS:
            raise ValueError(f"cost_model.preset: unknown preset {preset!r} "
                             f"(choose from {sorted(NETWORK_PRESETS)})")
        bandwidth, fixed = NETWORK_PRESETS[preset]
        params = replace(params, bandwidth_bytes_per_s=bandwidth, transfer_fixed_us=fixed)
    valid = set(CostModelParams.__dataclass_fields__)
    for key, value in data.items():
        if key not in valid:
            raise ValueError(f"cost_model.{key}: unknown calibration key")
        params = replace(params, **{key: value})
    params.validate()
    return params
