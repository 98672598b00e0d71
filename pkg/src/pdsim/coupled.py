"""Coupled baseline instance: prefill and decode share one engine.

Models a conventional continuous-batching server: a fixed number of request
slots, whole prompts prefilled in the same iteration as running decodes, and
greedy memory admission with swap-on-pressure. Differences against the
disaggregated system therefore come only from scheduling structure, since both
run on the same cost model.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from . import costs
from .costs import CostModelParams
from .decode import DecodingRequest, IterationRecord, PagedKvStore
from .engine import Engine, SimulationError
from .prefill import PredictorModel, default_bucket
from .workload import Request


@dataclass(frozen=True)
class CoupledConfig:
    prefill_batch: int = 16    # waiting requests prefilled per iteration, at most
    max_batch: int | None = 16  # concurrent request slots (None: memory-bound only)

    def validate(self) -> None:
        if self.prefill_batch < 1:
            raise ValueError("coupled.prefill_batch: must be >= 1")
        if self.max_batch is not None and self.max_batch < 1:
            raise ValueError("coupled.max_batch: must be >= 1 when set")


class CoupledInstance:
    """One prefill+decode server driven by engine events."""

    def __init__(self, instance_id: str, engine: Engine, params: CostModelParams,
                 config: CoupledConfig, control):
        self.id = instance_id
        self.engine = engine
        self.params = params
        self.config = config
        self.control = control
        self.role = "coupled"
        self.store = PagedKvStore(params.capacity_pages, params.page_size)
        self.waiting: deque[Request] = deque()
        self.running: list[DecodingRequest] = []
        self._prefilling: list[Request] = []
        self._swap_queue: list[DecodingRequest] = []
        self._stepping = False
        self._kick = None
        self.iteration_log: list[IterationRecord] = []
        self.swap_out_pages = 0
        self.swap_in_pages = 0
        self.swap_events = 0
        engine.register(instance_id, self.handle)

    def accept(self, req: Request) -> None:
        self.waiting.append(req)
        self._request_kick()

    def _request_kick(self) -> None:
        if not self._stepping and self._kick is None:
            self._kick = self.engine.schedule(self.engine.now, self.id, "boundary_kick")

    def queued_prompt_tokens(self) -> int:
        return sum(r.prompt_len for r in self.waiting)

    def handle(self, event) -> None:
        if event.kind == "coupled_step_done":
            self._on_step_done(event)
        elif event.kind == "boundary_kick":
            self._kick = None
            if not self._stepping:
                self._boundary()
        else:
            raise SimulationError(f"{self.id}: unexpected event kind {event.kind!r}")

    # -- iteration loop ----------------------------------------------------------

    def _boundary(self) -> None:
        swap_in = self._admit_waiting()
        if not self._prefilling and not self.running:
            self._stepping = False
            return
        swap_out = self._grow_batch()
        prefill_tokens = sum(r.prompt_len for r in self._prefilling)
        kv_tokens = sum(r.kv_tokens for r in self.running)
        latency = costs.mixed_iter_latency(
            self.params, prefill_tokens, len(self.running), kv_tokens,
            n_prefill=len(self._prefilling))
        penalty = round(self.params.swap_penalty_us_per_page * (swap_out + swap_in))
        total = latency + penalty
        self.iteration_log.append(IterationRecord(
            t_start=self.engine.now, batch_size=len(self.running),
            kv_tokens=kv_tokens, latency_us=total,
            swapped_out_pages=swap_out, swapped_in_pages=swap_in))
        self._stepping = True
        self.engine.schedule(self.engine.now + total, self.id, "coupled_step_done",
                             {"start": self.engine.now})

    def _slots_free(self) -> int:
        if self.config.max_batch is None:
            return len(self.waiting)
        return self.config.max_batch - len(self.running) - len(self._prefilling)

    def _admit_waiting(self) -> int:
        """Greedy admission: slot free, prefill-batch room, next token fits.

        Returning swap victims resume ahead of fresh prompts.
        """
        swap_in = self._readmit_swapped()
        while self.waiting and self._slots_free() > 0 \
                and len(self._prefilling) < self.config.prefill_batch:
            req = self.waiting[0]
            need = costs.pages_needed(self.params, req.prompt_len + 1)
            if self.store.free_pages < need:
                if self.running or self._prefilling or self._swap_queue:
                    break
                raise SimulationError(
                    f"{self.id}: request {req.id} needs more KV than the instance "
                    f"holds (misconfiguration)")
            self.waiting.popleft()
            req.set_phase("prefilling")
            self.control.note_prefill_start(req, self.engine.now)
            self.store.allocate(req.id, costs.pages_needed(self.params, req.prompt_len))
            self._prefilling.append(req)
        return swap_in

    def _readmit_swapped(self) -> int:
        """Swapped-out decodes re-enter when their pages fit again."""
        swap_in = 0
        for dreq in list(self._swap_queue):
            if self.config.max_batch is not None and \
                    len(self.running) + len(self._prefilling) >= self.config.max_batch:
                break
            pages = self.store.swapped[dreq.req.id]
            if self.store.free_pages < pages + 1:
                break
            self.store.swap_in(dreq.req.id)
            dreq.was_swapped = False
            swap_in += pages
            self.swap_in_pages += pages
            self._swap_queue.remove(dreq)
            self.running.append(dreq)
        return swap_in

    def _grow_batch(self) -> int:
        swapped_out = 0
        for dreq in list(self.running):
            if dreq not in self.running:
                continue
            target = costs.pages_needed(self.params, dreq.kv_tokens + 1)
            held = self.store.resident[dreq.req.id]
            needed = target - held
            if needed > 0 and self.store.free_pages < needed:
                swapped_out += self._swap_out(needed, exclude=dreq)
            if needed > 0:
                self.store.grow_to(dreq.req.id, target)
        return swapped_out

    def _swap_out(self, needed_pages: int, exclude: DecodingRequest) -> int:
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
            self._swap_queue.append(victim)
            self.control.note_swap(victim.req, pages)
            self.swap_events += 1
            self.swap_out_pages += pages
            freed += pages
        if self.store.free_pages < needed_pages:
            raise SimulationError(
                f"{self.id}: request {exclude.req.id} cannot fit (misconfiguration)")
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
        # Requests prefilled this iteration produce their first token now and
        # decode from the next iteration on.
        for req in self._prefilling:
            self.control.note_first_token(req, self.engine.now)
            req.set_phase("decoding")
            self.running.append(DecodingRequest(req=req, bucket=default_bucket()))
        self._prefilling = []
        self._stepping = False
        if self.running or self.waiting or self._swap_queue:
            self._request_kick()
