"""Prefill-only instance: local scheduler, chunker, length predictor, dispatcher.

A prefill instance pulls requests from its raw queue in scheduling rounds of at
most `sched_batch` (which bounds starvation under SJF/LJF), slices the sorted
prompts into fixed-size chunks, predicts each request's decode-length bucket,
and on prefill completion picks a decode instance and ships the KV cache.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field

from . import costs
from .costs import CostModelParams
from .engine import Engine, SimulationError
from .workload import HEAVY_DECODE_TOKENS, Request

PREFILL_POLICIES = ("fcfs", "sjf", "ljf")
DISPATCH_POLICIES = ("power_of_two", "random", "imbalance")

#: Measured top-1 accuracy of the bucket classifier by granularity.
DEFAULT_ACCURACY_BY_GRANULARITY = {100: 0.589, 200: 0.749, 400: 0.85}


@dataclass(frozen=True)
class PrefillPolicy:
    policy: str = "sjf"
    sched_batch: int = 16

    def validate(self) -> None:
        if self.policy not in PREFILL_POLICIES:
            raise ValueError(f"policies.prefill: unknown policy {self.policy!r}")
        if self.sched_batch < 1:
            raise ValueError("policies.sched_batch: must be >= 1")


@dataclass
class Chunk:
    """A fixed-size unit of prefill work: slices of one or more prompts."""

    index: int
    slices: list[tuple[int, int, int]]   # (request id, token start, token len)
    padded: int = 0


@dataclass(frozen=True)
class LengthBucket:
    """Predicted decode-length range [index*g, (index+1)*g)."""

    index: int
    granularity: int

    @property
    def lower(self) -> int:
        return self.index * self.granularity

    @property
    def upper(self) -> int:
        return (self.index + 1) * self.granularity

    @property
    def heavy(self) -> bool:
        return self.lower >= HEAVY_DECODE_TOKENS


@dataclass
class PredictorModel:
    """Statistical stand-in for the bucket classifier.

    Returns the true bucket with probability `accuracy`; otherwise a wrong
    bucket at geometric distance (ratio 0.5) from the true one, truncated at
    bucket 0 and the max bucket. One prediction per request, memoized.
    """

    granularity: int = 200
    accuracy: float | None = None
    mode: str = "parallel"            # parallel: latency tax | sequential: per-round cost
    max_decode_len: int = 8192
    enabled: bool = True
    _memo: dict[int, LengthBucket] = field(default_factory=dict, repr=False, init=False)

    def validate(self) -> None:
        if self.granularity < 1:
            raise ValueError("predictor.granularity: must be >= 1")
        p = self.effective_accuracy
        if not 0 < p <= 1:
            raise ValueError("predictor.accuracy: must be in (0, 1]")
        if self.mode not in ("parallel", "sequential"):
            raise ValueError(f"predictor.mode: unknown mode {self.mode!r}")

    @property
    def effective_accuracy(self) -> float:
        if self.accuracy is not None:
            return self.accuracy
        return DEFAULT_ACCURACY_BY_GRANULARITY.get(self.granularity, 0.749)

    def predict(self, req: Request, rng: random.Random) -> LengthBucket:
        if req.id in self._memo:
            return self._memo[req.id]
        true_index = req.true_decode_len // self.granularity
        max_index = max(true_index, (self.max_decode_len - 1) // self.granularity)
        index = true_index
        if max_index > 0 and rng.random() >= self.effective_accuracy:
            index = self._wrong_bucket(true_index, max_index, rng)
        bucket = LengthBucket(index, self.granularity)
        self._memo[req.id] = bucket
        return bucket

    def _wrong_bucket(self, true_index: int, max_index: int, rng: random.Random) -> int:
        candidates = [i for i in range(max_index + 1) if i != true_index]
        weights = [0.5 ** abs(i - true_index) for i in candidates]
        return rng.choices(candidates, weights)[0]


def default_bucket(granularity: int = 200) -> LengthBucket:
    """Bucket used when prediction is disabled: assume the shortest range."""
    return LengthBucket(0, granularity)


def schedule_round(policy: PrefillPolicy, raw: list[Request]) -> tuple[list[Request], list[Request]]:
    """Take one scheduling round off the head of the raw queue.

    Returns (ordered round, remaining raw). Only the first `sched_batch`
    requests in arrival order are sorted; later arrivals cannot jump ahead of
    them, which prevents starvation. Ties break by arrival time then id.
    """
    if not raw:
        raise ValueError("raw queue is empty")
    batch = list(raw[:policy.sched_batch])
    rest = list(raw[policy.sched_batch:])
    if policy.policy == "sjf":
        batch.sort(key=lambda r: (r.prompt_len, r.arrival_us, r.id))
    elif policy.policy == "ljf":
        batch.sort(key=lambda r: (-r.prompt_len, r.arrival_us, r.id))
    return batch, rest


def chunkify(scheduled: list[Request], chunk_size: int) -> list[Chunk]:
    """Slice and merge the scheduled prompts into fixed-size chunks, in order.

    Every chunk is full except possibly the last, which is padded with zeros;
    concatenating the slices reproduces the scheduled prompts exactly.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    chunks: list[Chunk] = []
    current = Chunk(index=0, slices=[])
    room = chunk_size
    for req in scheduled:
        cursor = 0  # last prefilled token position within this prompt
        while cursor < req.prompt_len:
            take = min(room, req.prompt_len - cursor)
            current.slices.append((req.id, cursor, take))
            cursor += take
            room -= take
            if room == 0:
                chunks.append(current)
                current = Chunk(index=len(chunks), slices=[])
                room = chunk_size
    if current.slices:
        current.padded = room
        chunks.append(current)
    return chunks


def choose_decode_instance(req: Request, bucket: LengthBucket,
                           loads: dict[str, "DecodeLoadView"],
                           rng: random.Random,
                           policy: str = "power_of_two") -> tuple[str, bool]:
    """Pick a decode instance for a prefilled request.

    power_of_two: split instances into those with enough free KV for the
    predicted worst case (bucket upper bound plus the prompt's KV) and the
    rest; sample two of the former and keep the one with the smaller
    heavy:light ratio after accepting this request. Returns (instance id,
    fell_back) where fell_back marks an empty adequate set.

    random: uniform over all instances. imbalance: worst case, every heavy
    request lands on the same instance.
    """
    if not loads:
        raise SimulationError("dispatch with no decode load snapshot")
    ids = sorted(loads)
    if policy == "random":
        return rng.choice(ids), False
    incoming_heavy = bucket.heavy
    if policy == "imbalance":
        if incoming_heavy:
            return ids[0], False
        return rng.choice(ids), False
    if policy != "power_of_two":
        raise ValueError(f"unknown dispatch policy {policy!r}")
    required = bucket.upper + req.prompt_len  # prefilled KV occupies decode memory too
    alpha = [i for i in ids if loads[i].free_tokens >= required]
    fell_back = False
    if not alpha:
        # No instance has room for the worst case; least-loaded fallback.
        fell_back = True
        best = max(ids, key=lambda i: (loads[i].free_tokens, i))
        return best, fell_back
    if len(alpha) == 1:
        return alpha[0], fell_back
    first, second = rng.sample(alpha, 2)
    return _lower_ratio(loads, first, second, incoming_heavy), fell_back


def _lower_ratio(loads: dict[str, "DecodeLoadView"], a: str, b: str,
                 incoming_heavy: bool) -> str:
    """Candidate whose heavy:light ratio after accepting the request is smaller."""
    ah, al = loads[a].counts_after(incoming_heavy)
    bh, bl = loads[b].counts_after(incoming_heavy)
    left = ah * bl
    right = bh * al
    if left != right:
        return a if left < right else b
    if loads[a].free_tokens != loads[b].free_tokens:
        return a if loads[a].free_tokens > loads[b].free_tokens else b
    return min(a, b)


@dataclass
class DecodeLoadView:
    """A prefill instance's working copy of one decode instance's load.

    Starts from the last monitor broadcast and is decremented locally as this
    dispatcher commits requests, so decisions between broadcasts account for
    our own in-flight sends (remote changes stay invisible until the next
    broadcast).
    """

    instance: str
    free_pages: int
    heavy: int
    light: int
    page_size: int

    @property
    def free_tokens(self) -> int:
        return self.free_pages * self.page_size

    def counts_after(self, incoming_heavy: bool) -> tuple[int, int]:
        return (self.heavy + 1, self.light) if incoming_heavy else (self.heavy, self.light + 1)

    def commit(self, req: Request, bucket: LengthBucket) -> None:
        demand_tokens = bucket.upper + req.prompt_len
        demand_pages = -(-demand_tokens // self.page_size)
        self.free_pages = max(0, self.free_pages - demand_pages)
        if bucket.heavy:
            self.heavy += 1
        else:
            self.light += 1


@dataclass
class _Round:
    requests: list[Request]
    chunks: list[Chunk]
    next_chunk: int
    prefilled_tokens: dict[int, int]   # request id -> tokens completed


class PrefillInstance:
    """Actor driven by engine events; interacts with peers only via events."""

    def __init__(self, instance_id: str, engine: Engine, params: CostModelParams,
                 policy: PrefillPolicy, predictor: PredictorModel,
                 dispatch_policy: str, rngs, control):
        self.id = instance_id
        self.engine = engine
        self.params = params
        self.policy = policy
        self.predictor = predictor
        self.dispatch_policy = dispatch_policy
        self.rng_predictor = rngs.stream("predictor")
        self.rng_dispatcher = rngs.stream("dispatcher")
        self.control = control
        self.role = "prefill"
        self.raw: deque[Request] = deque()
        self.requests: dict[int, Request] = {}
        self._round: _Round | None = None
        self._kick = None
        self._draining = False
        # stat counters exported to metrics
        self.chunks_executed = 0
        self.pad_tokens = 0
        self.rounds = 0
        self.dispatches: list[tuple[int, int, str, bool]] = []  # (t, req, dst, fell_back)
        self.loads: dict[str, DecodeLoadView] = {}
        self._excluded: set[str] = set()
        engine.register(instance_id, self.handle)

    # -- queue interface -----------------------------------------------------

    def accept(self, req: Request) -> None:
        if self.role != "prefill" or self._draining:
            raise SimulationError(f"{self.id}: routed a request while not accepting")
        self.raw.append(req)
        self.requests[req.id] = req
        self._request_kick()

    def _request_kick(self) -> None:
        # Rounds start via a same-timestamp kick so every arrival in a burst
        # lands in the raw queue before the round is cut.
        if self._round is None and self._kick is None:
            self._kick = self.engine.schedule(self.engine.now, self.id, "round_kick")

    def queued_prompt_tokens(self) -> int:
        tokens = sum(r.prompt_len for r in self.raw)
        if self._round is not None:
            done = self._round.prefilled_tokens
            tokens += sum(r.prompt_len - done.get(r.id, 0) for r in self._round.requests)
        return tokens

    # -- load snapshot from the cluster monitor ------------------------------

    def receive_broadcast(self, views: dict[str, DecodeLoadView]) -> None:
        # A fresh snapshot only lists current decode-role instances, so
        # mid-period flip exclusions can be dropped.
        self.loads = views
        self._excluded.clear()

    def exclude_decode(self, instance_id: str) -> None:
        self._excluded.add(instance_id)
        self.loads.pop(instance_id, None)

    # -- scheduling rounds ----------------------------------------------------

    def _start_round(self) -> None:
        if not self.raw:
            return
        batch, rest = schedule_round(self.policy, list(self.raw))
        self.raw = deque(rest)
        self.rounds += 1
        for req in batch:
            req.set_phase("prefilling")
            if self.predictor.enabled:
                self.predictor.predict(req, self.rng_predictor)
        chunks = chunkify(batch, self.params.chunk_size)
        self._round = _Round(requests=batch, chunks=chunks, next_chunk=0,
                             prefilled_tokens={r.id: 0 for r in batch})
        extra = 0
        if self.predictor.enabled and self.predictor.mode == "sequential":
            extra = costs.sequential_predictor_cost(self.params)
        self._schedule_next_chunk(extra)

    def _schedule_next_chunk(self, extra_cost: int = 0) -> None:
        rnd = self._round
        chunk = rnd.chunks[rnd.next_chunk]
        starting = sum(1 for _, start, _ in chunk.slices if start == 0)
        tax = self.predictor.enabled and self.predictor.mode == "parallel"
        cost = costs.chunk_cost(self.params, starting, tax) + extra_cost
        start = self.engine.now
        for req_id, token_start, _ in chunk.slices:
            if token_start == 0:
                self.control.note_prefill_start(self.requests[req_id], start)
        self.engine.schedule(start + cost, self.id, "chunk_done",
                             {"start": start})

    def handle(self, event) -> None:
        if event.kind == "chunk_done":
            self._on_chunk_done(event)
        elif event.kind == "round_kick":
            self._kick = None
            if self._round is None and self.raw:
                self._start_round()
        elif event.kind == "kv_arrival":
            # Stale-snapshot send landing after this instance left the decode
            # role; hand it back for re-dispatch.
            self.control.reroute(event.data["req"], event.data["bucket"], self.id)
        else:
            raise SimulationError(f"{self.id}: unexpected event kind {event.kind!r}")

    def _on_chunk_done(self, event) -> None:
        rnd = self._round
        chunk = rnd.chunks[rnd.next_chunk]
        self.chunks_executed += 1
        self.pad_tokens += chunk.padded
        self.control.note_busy(self.id, event.data["start"], self.engine.now)
        for req_id, _, length in chunk.slices:
            rnd.prefilled_tokens[req_id] += length
            req = self.requests[req_id]
            if rnd.prefilled_tokens[req_id] == req.prompt_len:
                self._finish_prefill(req)
        rnd.next_chunk += 1
        if rnd.next_chunk < len(rnd.chunks):
            self._schedule_next_chunk()
            return
        self._round = None
        if self.raw:
            self._request_kick()
        elif self._draining:
            self.control.prefill_drained(self.id)

    def _finish_prefill(self, req: Request) -> None:
        # The first token is produced at the end of the final prefill chunk.
        self.control.note_first_token(req, self.engine.now)
        bucket = (self.predictor.predict(req, self.rng_predictor)
                  if self.predictor.enabled
                  else default_bucket(self.predictor.granularity))
        del self.requests[req.id]
        self.dispatch(req, bucket)

    # -- dispatcher ------------------------------------------------------------

    def dispatch(self, req: Request, bucket: LengthBucket) -> None:
        views = {i: v for i, v in self.loads.items() if i not in self._excluded}
        if not views:
            self.control.park(req, bucket, self.id)
            return
        dst, fell_back = choose_decode_instance(req, bucket, views,
                                                self.rng_dispatcher,
                                                self.dispatch_policy)
        views[dst].commit(req, bucket)
        self.dispatches.append((self.engine.now, req.id, dst, fell_back))
        self.control.note_dispatch(req, dst, fell_back)
        self.send_kv(req, bucket, dst)

    def send_kv(self, req: Request, bucket: LengthBucket, dst: str) -> None:
        req.set_phase("transferring")
        latency = costs.transfer_latency(self.params, req.prompt_len)
        self.engine.schedule(self.engine.now + latency, dst, "kv_arrival",
                             {"req": req, "bucket": bucket})

    # -- instance flip ----------------------------------------------------------

    def begin_drain(self) -> None:
        self._draining = True
        if self._round is None and not self.raw:
            self.control.prefill_drained(self.id)

    def finish_flip(self, new_role: str) -> None:
        self._draining = False
        self.role = new_role
