"""Prefill-side unit tests: scheduler, chunker, predictor, dispatcher."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdsim.prefill import (DecodeLoadView, LengthBucket, PredictorModel,
                           PrefillPolicy, choose_decode_instance, chunkify,
                           schedule_round)
from pdsim.workload import Request


def _req(rid, prompt, decode=10, arrival=0):
    return Request(id=rid, arrival_us=arrival, prompt_len=prompt,
                   true_decode_len=decode)


# -- scheduler ---------------------------------------------------------------

def test_fcfs_keeps_arrival_order():
    raw = [_req(1, 300), _req(2, 18), _req(3, 512)]
    batch, rest = schedule_round(PrefillPolicy("fcfs", 16), raw)
    assert [r.id for r in batch] == [1, 2, 3]
    assert rest == []


def test_sjf_sorts_ascending():
    raw = [_req(1, 300), _req(2, 18), _req(3, 512)]
    batch, _ = schedule_round(PrefillPolicy("sjf", 16), raw)
    assert [r.id for r in batch] == [2, 1, 3]


def test_ljf_sorts_descending():
    raw = [_req(1, 300), _req(2, 18), _req(3, 512)]
    batch, _ = schedule_round(PrefillPolicy("ljf", 16), raw)
    assert [r.id for r in batch] == [3, 1, 2]


def test_sched_batch_bounds_starvation():
    # With a round of 2, the shortest request in the raw tail cannot jump
    # ahead of the first two arrivals.
    raw = [_req(1, 300), _req(2, 500), _req(3, 1)]
    batch, rest = schedule_round(PrefillPolicy("sjf", 2), raw)
    assert [r.id for r in batch] == [1, 2]
    assert [r.id for r in rest] == [3]


def test_ties_break_by_arrival_then_id():
    raw = [_req(5, 100, arrival=10), _req(2, 100, arrival=0), _req(1, 100, arrival=10)]
    batch, _ = schedule_round(PrefillPolicy("sjf", 16), raw)
    assert [r.id for r in batch] == [2, 1, 5]


# -- chunker -----------------------------------------------------------------

def test_chunkify_reference_example():
    # Prompts 18+100+512+900 = 1530 tokens -> 3 chunks of 512, 6 pad tokens.
    scheduled = [_req(0, 18), _req(1, 100), _req(2, 512), _req(3, 900)]
    chunks = chunkify(scheduled, 512)
    assert len(chunks) == 3
    assert chunks[0].slices == [(0, 0, 18), (1, 0, 100), (2, 0, 394)]
    assert chunks[1].slices == [(2, 394, 118), (3, 0, 394)]
    assert chunks[2].slices == [(3, 394, 506)]
    assert [c.padded for c in chunks] == [0, 0, 6]
    assert 3 * 512 - 1530 == 6


def test_chunkify_exact_fit_and_degenerate():
    assert chunkify([_req(0, 512)], 512)[0].padded == 0
    assert len(chunkify([_req(0, 512)], 512)) == 1
    single = chunkify([_req(0, 1)], 512)
    assert len(single) == 1 and single[0].padded == 511


@settings(max_examples=200)
@given(prompts=st.lists(st.integers(1, 1500), min_size=1, max_size=20),
       chunk_size=st.integers(1, 700))
def test_chunkify_permutation_safety(prompts, chunk_size):
    scheduled = [_req(i, p) for i, p in enumerate(prompts)]
    chunks = chunkify(scheduled, chunk_size)
    # slices concatenate back to the scheduled prompts, in order
    rebuilt = {}
    order = []
    for chunk in chunks:
        assert sum(s[2] for s in chunk.slices) + chunk.padded == chunk_size
        for rid, start, length in chunk.slices:
            assert rebuilt.get(rid, 0) == start
            rebuilt[rid] = start + length
            if not order or order[-1] != rid:
                order.append(rid)
    assert rebuilt == {r.id: r.prompt_len for r in scheduled}
    assert order == [r.id for r in scheduled]
    # every chunk is full except possibly the last
    assert all(c.padded == 0 for c in chunks[:-1])


# -- predictor ----------------------------------------------------------------

def test_oracle_prediction_uses_floor_bucket():
    model = PredictorModel(granularity=200, accuracy=1.0)
    rng = random.Random(0)
    assert model.predict(_req(0, 10, decode=130), rng) == LengthBucket(0, 200)


def test_bucket_boundary_is_half_open():
    model = PredictorModel(granularity=200, accuracy=1.0)
    bucket = model.predict(_req(0, 10, decode=200), random.Random(0))
    assert bucket.index == 1
    assert bucket.lower == 200 and bucket.upper == 400


def test_prediction_memoized_per_request():
    model = PredictorModel(granularity=200, accuracy=0.5)
    rng = random.Random(1)
    req = _req(7, 10, decode=450)
    assert model.predict(req, rng) is model.predict(req, rng)


def test_measured_accuracy_matches_configured():
    model = PredictorModel(granularity=200, accuracy=0.749)
    rng = random.Random(42)
    hits = 0
    n = 100_000
    for i in range(n):
        req = _req(i, 10, decode=(i % 1000) + 1)
        bucket = model.predict(req, rng)
        hits += bucket.index == req.true_decode_len // 200
    assert abs(hits / n - 0.749) <= 0.005


def test_wrong_buckets_stay_in_range_and_differ():
    model = PredictorModel(granularity=200, accuracy=1e-9, max_decode_len=2000)
    rng = random.Random(3)
    for i in range(500):
        req = _req(i, 10, decode=405)  # true bucket 2
        bucket = model.predict(req, rng)
        assert bucket.index != 2
        assert 0 <= bucket.index <= 9


def test_confusion_prefers_adjacent_buckets():
    model = PredictorModel(granularity=200, accuracy=1e-9, max_decode_len=2000)
    rng = random.Random(4)
    counts = {}
    for i in range(4000):
        bucket = model.predict(_req(i, 10, decode=1000), rng)  # true bucket 5
        counts[bucket.index] = counts.get(bucket.index, 0) + 1
    assert counts[4] + counts[6] > counts.get(3, 0) + counts.get(7, 0)


def test_default_accuracy_table():
    assert PredictorModel(granularity=100).effective_accuracy == 0.589
    assert PredictorModel(granularity=200).effective_accuracy == 0.749
    assert PredictorModel(granularity=400).effective_accuracy == 0.85


# -- dispatcher ----------------------------------------------------------------

def _view(instance, free_pages, heavy, light):
    return DecodeLoadView(instance=instance, free_pages=free_pages,
                          heavy=heavy, light=light, page_size=16)


def test_single_instance_always_chosen():
    loads = {"d0": _view("d0", 10, 5, 0)}
    dst, _ = choose_decode_instance(_req(0, 100), LengthBucket(3, 200), loads,
                                    random.Random(0))
    assert dst == "d0"


def test_ratio_rule_prefers_fewer_heavies():
    # A: 3 heavy/1 light -> 4:1 after accepting; B: 1 heavy/3 light -> 2:3.
    loads = {"A": _view("A", 10_000, 3, 1), "B": _view("B", 10_000, 1, 3)}
    for seed in range(10):
        dst, fell_back = choose_decode_instance(
            _req(0, 100), LengthBucket(3, 200), loads, random.Random(seed))
        assert dst == "B"
        assert not fell_back


def test_alpha_set_excludes_full_instances():
    # Only A has room for upper bound 800 + prompt 100 tokens.
    loads = {"A": _view("A", 1_000, 9, 0), "B": _view("B", 10, 0, 9)}
    dst, fell_back = choose_decode_instance(
        _req(0, 100), LengthBucket(3, 200), loads, random.Random(0))
    assert dst == "A" and not fell_back


def test_empty_alpha_falls_back_to_least_loaded():
    loads = {"A": _view("A", 5, 1, 1), "B": _view("B", 9, 1, 1)}
    dst, fell_back = choose_decode_instance(
        _req(0, 4_000), LengthBucket(3, 200), loads, random.Random(0))
    assert dst == "B" and fell_back


def _run_policy(policy, n_requests, n_instances, seed, heavy_every=2):
    rng = random.Random(seed)
    views = {f"d{i}": _view(f"d{i}", 100_000, 0, 0) for i in range(n_instances)}
    for i in range(n_requests):
        heavy = i % heavy_every == 0
        bucket = LengthBucket(2 if heavy else 0, 200)
        dst, _ = choose_decode_instance(_req(i, 50), bucket, views, rng, policy)
        views[dst].commit(_req(i, 50), bucket)
    return max(v.heavy for v in views.values())


def test_imbalance_concentrates_heavies_power_of_two_spreads():
    # All-heavy stream over 4 instances: the worst-case comparator pins every
    # heavy on one instance, strictly worse than power-of-two, any seed.
    # (The expected-max comparison against random needs live service decay and
    # is verified over full runs in the acceptance suite.)
    for seed in range(25):
        p2 = _run_policy("power_of_two", 32, 4, seed, heavy_every=1)
        imb = _run_policy("imbalance", 32, 4, seed, heavy_every=1)
        assert imb == 32
        assert imb > p2


def test_commit_applies_local_echo():
    view = _view("d0", 100, 0, 0)
    view.commit(_req(0, 100), LengthBucket(2, 200))
    # demand = upper 600 + prompt 100 = 700 tokens = 44 pages
    assert view.free_pages == 100 - 44
    assert (view.heavy, view.light) == (1, 0)


def test_policy_validation():
    with pytest.raises(ValueError, match="policy"):
        PrefillPolicy("srtf", 16).validate()
    with pytest.raises(ValueError, match="sched_batch"):
        PrefillPolicy("sjf", 0).validate()
