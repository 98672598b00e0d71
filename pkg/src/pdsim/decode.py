"""Decode-only instance: KV receiver, paged memory, working-set-aware batching.

The iteration boundary is the only scheduling point: admissions, completions
and swaps all happen between decode steps. Three admission policies are
provided. `greedy` admits whenever the next token's page fits, which can
overcommit the working set and thrash. `reserve_static` admits only while the
sum of predicted whole-job footprints stays within capacity. `reserve_dynamic`
additionally credits the memory that the shortest predicted-remaining running
job will free, trading a little risk for batch occupancy.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from . import costs
from .costs import CostModelParams
from .engine import Engine, SimulationError
from .prefill import LengthBucket
from .workload import Request

DECODE_POLICIES = ("greedy", "reserve_static", "reserve_dynamic")


@dataclass(frozen=True)
class DecodePolicy:
    policy: str = "reserve_dynamic"
    max_batch: int | None = None
    admission_bound: str = "lower"    # which end of the bucket backs reservations

    def validate(self) -> None:
        if self.policy not in DECODE_POLICIES:
            raise ValueError(f"policies.decode: unknown policy {self.policy!r}")
        if self.max_batch is not None and self.max_batch < 1:
            raise ValueError("policies.max_batch: must be >= 1 when set")
        if self.admission_bound not in ("lower", "upper"):
            raise ValueError("policies.admission_bound: must be lower or upper")


class PagedKvStore:
    """Paged KV memory with whole-request swap granularity.

    A request's pages are either all resident or all swapped. Every mutation
    re-checks the capacity invariant, so a scheduling bug surfaces as an
    immediate abort rather than silent overcommit.
    """

    def __init__(self, capacity_pages: int, page_size: int):
        self.capacity_pages = capacity_pages
        self.page_size = page_size
        self.resident: dict[int, int] = {}
        self.swapped: dict[int, int] = {}

    @property
    def resident_pages(self) -> int:
        return sum(self.resident.values())

    @property
    def free_pages(self) -> int:
        return self.capacity_pages - self.resident_pages

    def _check(self) -> None:
        if self.resident_pages > self.capacity_pages:
            raise SimulationError(
                f"resident pages {self.resident_pages} exceed capacity {self.capacity_pages}")

    def allocate(self, req_id: int, pages: int) -> None:
        if req_id in self.resident or req_id in self.swapped:
            raise SimulationError(f"request {req_id} already holds KV pages")
        self.resident[req_id] = pages
        self._check()

    def grow_to(self, req_id: int, pages: int) -> int:
        """Grow a resident request's page count; returns pages added."""
        held = self.resident[req_id]
        if pages < held:
            raise SimulationError(f"request {req_id}: KV pages may not shrink")
        self.resident[req_id] = pages
        self._check()
        return pages - held

    def evict(self, req_id: int) -> int:
        pages = self.resident.pop(req_id)
        self.swapped[req_id] = pages
        return pages

    def swap_in(self, req_id: int) -> int:
        pages = self.swapped.pop(req_id)
        self.resident[req_id] = pages
        self._check()
        return pages

    def release(self, req_id: int) -> int:
        return self.resident.pop(req_id)


@dataclass
class DecodingRequest:
    """A request in its decode phase on one instance."""

    req: Request
    bucket: LengthBucket
    generated: int = 0
    was_swapped: bool = False
    swap_events: int = 0

    @property
    def kv_tokens(self) -> int:
        return self.req.prompt_len + self.generated

    @property
    def predicted_remaining(self) -> int:
        return max(0, self.bucket.lower - self.generated)


def _bound_tokens(bucket: LengthBucket, bound: str) -> int:
    return bucket.lower if bound == "lower" else bucket.upper


def reserve_pages(params: CostModelParams, dreq: DecodingRequest, bound: str) -> int:
    """Whole-job footprint a reservation policy charges for one request.

    At least the predicted final footprint, and never less than what the
    request already needs to take its next token (covers mispredicted-long
    jobs whose KV outgrew the prediction).
    """
    predicted = dreq.req.prompt_len + _bound_tokens(dreq.bucket, bound)
    return max(costs.pages_needed(params, predicted),
               costs.pages_needed(params, dreq.kv_tokens + 1))


def projected_free_pages(params: CostModelParams, store: PagedKvStore,
                         running: list[DecodingRequest]) -> int:
    """Free pages when the shortest predicted-remaining job completes.

    Projection charges every running job one page per page_size generated
    tokens up to that horizon. Nothing is credited for the completing job's
    release: memory peaks at the instant it finishes, and admitting against
    pages it has not yet freed is exactly the thrashing this policy avoids.
    """
    horizon = min(r.predicted_remaining for r in running)
    free = store.free_pages
    for r in running:
        grown = costs.pages_needed(params, r.kv_tokens + horizon)
        free -= max(0, grown - store.resident[r.req.id])
    return free


def admits(policy: DecodePolicy, params: CostModelParams, store: PagedKvStore,
           running: list[DecodingRequest], dreq: DecodingRequest) -> bool:
    """Admission decision for the queue head at an iteration boundary."""
    if policy.max_batch is not None and len(running) >= policy.max_batch:
        return False
    need_now = costs.pages_needed(params, dreq.kv_tokens + 1)
    if policy.policy == "greedy":
        return store.free_pages >= need_now
    requirement = reserve_pages(params, dreq, policy.admission_bound)
    if policy.policy == "reserve_static":
        reserved = sum(reserve_pages(params, r, policy.admission_bound) for r in running)
        return reserved + requirement <= store.capacity_pages
    # reserve_dynamic: admitting still has to be feasible right now
    if store.free_pages < need_now:
        return False
    if not running:
        return store.free_pages >= requirement
    return projected_free_pages(params, store, running) >= requirement


@dataclass
class IterationRecord:
    t_start: int
    batch_size: int
    kv_tokens: int
    latency_us: int
    swapped_out_pages: int = 0
    swapped_in_pages: int = 0


class DecodeInstance:
    """Actor for one decode instance; single-threaded via engine events."""

    def __init__(self, instance_id: str, engine: Engine, params: CostModelParams,
                 policy: DecodePolicy, control):
        self.id = instance_id
        self.engine = engine
        self.params = params
        self.policy = policy
        self.control = control
        self.role = "decode"
        self.store = PagedKvStore(params.capacity_pages, params.page_size)
        self.queue: deque[DecodingRequest] = deque()
        self.running: list[DecodingRequest] = []
        self._stepping = False
        self._kick = None
        self._draining = False
        self._pending_swap_in_pages = 0
        self.iteration_log: list[IterationRecord] = []
        self.swap_out_pages = 0
        self.swap_in_pages = 0
        self.swap_events = 0
        self.accepting = True
        engine.register(instance_id, self.handle)

    # -- load reporting --------------------------------------------------------

    def live_requests(self) -> list[DecodingRequest]:
        return self.running + list(self.queue)

    def heavy_light_counts(self) -> tuple[int, int]:
        heavy = sum(1 for r in self.live_requests() if r.bucket.heavy)
        return heavy, len(self.live_requests()) - heavy

    def free_pages(self) -> int:
        return self.store.free_pages

    # -- event handling ----------------------------------------------------------

    def handle(self, event) -> None:
        if event.kind == "kv_arrival":
            self._on_kv_arrival(event.data["req"], event.data["bucket"])
        elif event.kind == "decode_step_done":
            self._on_step_done(event)
        elif event.kind == "boundary_kick":
            self._kick = None
            if not self._stepping:
                self._boundary()
        else:
            raise SimulationError(f"{self.id}: unexpected event kind {event.kind!r}")

    def _request_kick(self) -> None:
        # Boundaries start via a same-timestamp kick so simultaneous KV
        # arrivals are batched into one iteration.
        if not self._stepping and self._kick is None:
            self._kick = self.engine.schedule(self.engine.now, self.id, "boundary_kick")

    def _on_kv_arrival(self, req: Request, bucket: LengthBucket) -> None:
        self.control.note_kv_arrival(self.id)
        if self.role != "decode" or not self.accepting:
            self.control.reroute(req, bucket, self.id)
            return
        req.set_phase("decoding")
        self.queue.append(DecodingRequest(req=req, bucket=bucket))
        self._request_kick()

    # -- the continuous-batching loop ---------------------------------------------

    def _boundary(self) -> None:
        swap_in_pages = self._admit_from_queue()
        if not self.running:
            self._stepping = False
            self._maybe_drained()
            return
        swap_out_pages = self._grow_batch()
        kv_tokens = sum(r.kv_tokens for r in self.running)
        latency = costs.decode_iter_latency(self.params, len(self.running), kv_tokens)
        penalty = round(self.params.swap_penalty_us_per_page
                        * (swap_out_pages + swap_in_pages))
        total = latency + penalty
        self.iteration_log.append(IterationRecord(
            t_start=self.engine.now, batch_size=len(self.running),
            kv_tokens=kv_tokens, latency_us=total,
            swapped_out_pages=swap_out_pages, swapped_in_pages=swap_in_pages))
        self._stepping = True
        self.engine.schedule(self.engine.now + total, self.id, "decode_step_done",
                             {"start": self.engine.now})

    def _admit_from_queue(self) -> int:
        """FIFO admission at a boundary; the head blocks (no queue jumping).

        An idle instance never sits on a waiting request: if the policy defers
        the head while nothing is running, it is admitted anyway as long as it
        physically fits (a reservation can overestimate a job that would run
        fine alone). A head that cannot fit at all is a misconfiguration.
        """
        swap_in = 0
        while self.queue:
            dreq = self.queue[0]
            if not admits(self.policy, self.params, self.store, self.running, dreq):
                if self.running:
                    break
                if costs.pages_needed(self.params, dreq.kv_tokens + 1) > self.store.capacity_pages:
                    raise SimulationError(
                        f"{self.id}: request {dreq.req.id} needs more KV than the whole "
                        f"instance holds (misconfiguration)")
            self.queue.popleft()
            if dreq.was_swapped:
                pages = self.store.swap_in(dreq.req.id)
                dreq.was_swapped = False
                swap_in += pages
                self.swap_in_pages += pages
            else:
                self.store.allocate(dreq.req.id,
                                    costs.pages_needed(self.params, dreq.kv_tokens))
            self.running.append(dreq)
        return swap_in

    def _grow_batch(self) -> int:
        """Allocate next-token page growth for every member, evicting on pressure."""
        swapped_out = 0
        for dreq in list(self.running):
            if dreq not in self.running:
                continue  # evicted by an earlier member's growth
            target = costs.pages_needed(self.params, dreq.kv_tokens + 1)
            held = self.store.resident[dreq.req.id]
            needed = target - held
            if needed > 0 and self.store.free_pages < needed:
                swapped_out += self.swap_out(needed, exclude=dreq)
            if needed > 0:
                self.store.grow_to(dreq.req.id, target)
        return swapped_out

    def swap_out(self, needed_pages: int, exclude: DecodingRequest) -> int:
        """Evict whole requests, largest resident first, until the need fits."""
        victims = sorted((r for r in self.running if r is not exclude),
                         key=lambda r: (-self.store.resident[r.req.id], r.req.id))
        freed = 0
        for victim in victims:
            if self.store.free_pages >= needed_pages:
                break
            pages = self.store.evict(victim.req.id)
            victim.was_swapped = True
            victim.swap_events += 1
            self.running.remove(victim)
            self.queue.append(victim)
            self.control.note_swap(victim.req, pages)
            self.swap_events += 1
            self.swap_out_pages += pages
            freed += pages
        if self.store.free_pages < needed_pages:
            raise SimulationError(
                f"{self.id}: request {exclude.req.id} cannot fit: needs {needed_pages} "
                f"pages beyond capacity {self.store.capacity_pages} (misconfiguration)")
        return freed

    def _on_step_done(self, event) -> None:
        self.control.note_busy(self.id, event.data["start"], self.engine.now)
        finished = []
        for dreq in self.running:
            dreq.generated += 1
            if dreq.generated >= dreq.req.true_decode_len:
                finished.append(dreq)
        for dreq in finished:
            self.running.remove(dreq)
            self.store.release(dreq.req.id)
            self.control.record_completion(dreq.req)
        self._stepping = False
        if self.running or self.queue:
            self._request_kick()
        else:
            self._maybe_drained()

    # -- instance flip ---------------------------------------------------------------

    def begin_drain(self) -> None:
        self._draining = True
        self._maybe_drained()

    def _maybe_drained(self) -> None:
        if (self._draining and not self.running and not self.queue
                and self.control.inflight_to(self.id) == 0):
            self.accepting = False
            self._draining = False
            self.control.decode_drained(self.id)
