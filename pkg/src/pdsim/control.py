"""Centralized control plane: global scheduler, cluster monitor, instance flips.

The control plane is simulated as a logically centralized, fault-free actor
set sharing the engine. The global scheduler routes each arriving request to
the least-loaded prefill instance and tracks its lifecycle in a status table;
the cluster monitor periodically aggregates decode loads and broadcasts them
to every prefill instance; a transition watcher flips chronically idle
instances between roles after draining them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .costs import CostModelParams
from .coupled import CoupledConfig, CoupledInstance
from .decode import DecodeInstance, DecodePolicy
from .engine import Engine, RngStreams, SimulationError
from .prefill import (DecodeLoadView, LengthBucket, PredictorModel,
                      PrefillInstance, PrefillPolicy)
from .workload import Request

logger = logging.getLogger("pdsim")

MONITOR_PERIOD_US = 100_000  # loads are reported every 100 ms by default


@dataclass(frozen=True)
class FlipPolicy:
    """Example flip trigger: utilization under a threshold for a full window."""

    enabled: bool = False
    threshold: float = 0.10
    window_us: int = 60_000_000

    def validate(self) -> None:
        if not 0 < self.threshold < 1:
            raise ValueError("flip.threshold: must be in (0, 1)")
        if self.window_us <= 0:
            raise ValueError("flip.window_us: must be > 0")


@dataclass
class InstanceLoad:
    """Load snapshot one instance reports to the cluster monitor."""

    instance: str
    role: str
    snapshot_us: int
    queued_prompt_tokens: int = 0
    free_kv_pages: int = 0
    heavy_decodes: int = 0
    light_decodes: int = 0


@dataclass
class RequestRecord:
    """Status table row: one per request, finalized at completion."""

    req: Request
    prefill_instance: str | None = None
    decode_instance: str | None = None
    prefill_start_us: int | None = None
    first_token_us: int | None = None
    done_us: int | None = None
    swap_events: int = 0
    rerouted: bool = False

    @property
    def wait_us(self) -> int | None:
        if self.prefill_start_us is None:
            return None
        return self.prefill_start_us - self.req.arrival_us

    @property
    def ttft_us(self) -> int | None:
        if self.first_token_us is None:
            return None
        return self.first_token_us - self.req.arrival_us

    @property
    def jct_us(self) -> int | None:
        if self.done_us is None:
            return None
        return self.done_us - self.req.arrival_us


@dataclass
class BusyEpisode:
    """Contiguous role episode of one instance, for resource accounting."""

    instance: str
    role: str
    first_work_start: int | None = None
    last_work_end: int | None = None
    busy_us: int = 0

    @property
    def span_us(self) -> int:
        if self.first_work_start is None:
            return 0
        return self.last_work_end - self.first_work_start


@dataclass
class FlipRecord:
    instance: str
    direction: str
    requested_us: int
    drained_us: int | None = None
    completed_us: int | None = None
    latency_us: int | None = None


class ControlPlane:
    """Global scheduler + cluster monitor + transition watcher."""

    def __init__(self, engine: Engine, rngs: RngStreams, params: CostModelParams,
                 *, prefill_policy: PrefillPolicy, decode_policy: DecodePolicy,
                 dispatch_policy: str, predictor: PredictorModel,
                 flip_policy: FlipPolicy, coupled_config: CoupledConfig,
                 monitor_period_us: int = MONITOR_PERIOD_US):
        self.engine = engine
        self.rngs = rngs
        self.params = params
        self.prefill_policy = prefill_policy
        self.decode_policy = decode_policy
        self.dispatch_policy = dispatch_policy
        self.predictor = predictor
        self.flip_policy = flip_policy
        self.coupled_config = coupled_config
        self.monitor_period_us = monitor_period_us
        self.rng_flip = rngs.stream("flip")

        self.instances: dict[str, object] = {}
        self.table: dict[int, RequestRecord] = {}
        self.injected = 0
        self.completed = 0
        self.parked: list[tuple[Request, LengthBucket]] = []
        self.route_parked: list[Request] = []
        self.parked_routes = 0
        self.rerouted_transfers = 0
        self.fallback_dispatches = 0
        self.swap_events_total = 0
        self.swap_pages_total = 0
        self._inflight: dict[str, int] = {}
        self._busy_spans: dict[str, list[tuple[int, int]]] = {}
        self._episodes: dict[str, list[BusyEpisode]] = {}
        self._role_start: dict[str, int] = {}
        self._prefill_load_view: dict[str, int] = {}
        self._flipping: dict[str, FlipRecord] = {}
        self.flip_records: list[FlipRecord] = []
        self.first_decode_start_us: int | None = None
        self.last_completion_us: int | None = None
        engine.register("control", self.handle)

    # -- cluster construction ---------------------------------------------------

    def add_prefill_instance(self, instance_id: str) -> PrefillInstance:
        inst = PrefillInstance(instance_id, self.engine, self.params,
                               self.prefill_policy, self.predictor,
                               self.dispatch_policy, self.rngs, self)
        self._register(inst)
        return inst

    def add_decode_instance(self, instance_id: str) -> DecodeInstance:
        inst = DecodeInstance(instance_id, self.engine, self.params,
                              self.decode_policy, self)
        self._register(inst)
        return inst

    def add_coupled_instance(self, instance_id: str) -> CoupledInstance:
        inst = CoupledInstance(instance_id, self.engine, self.params,
                               self.coupled_config, self)
        self._register(inst)
        return inst

    def _register(self, inst) -> None:
        self.instances[inst.id] = inst
        self._inflight.setdefault(inst.id, 0)
        self._busy_spans.setdefault(inst.id, [])
        self._episodes.setdefault(inst.id, []).append(
            BusyEpisode(instance=inst.id, role=inst.role))
        self._role_start[inst.id] = self.engine.now
        if inst.role == "prefill":
            self._prefill_load_view[inst.id] = 0

    def start(self) -> None:
        """Arm the periodic monitor tick (first broadcast at t=0)."""
        self.engine.schedule(self.engine.now, "control", "monitor_tick")

    def inject(self, requests: list[Request]) -> None:
        for req in requests:
            self.injected += 1
            self.engine.schedule(req.arrival_us, "control", "request_arrival",
                                 {"req": req})

    # -- roles ---------------------------------------------------------------------

    def _by_role(self, role: str) -> list:
        return [inst for inst in self.instances.values() if inst.role == role]

    def _serving(self, role: str) -> list:
        return [inst for inst in self._by_role(role)
                if inst.id not in self._flipping]

    # -- event handling ---------------------------------------------------------------

    def handle(self, event) -> None:
        if event.kind == "request_arrival":
            self.route_request(event.data["req"])
        elif event.kind == "monitor_tick":
            self.broadcast_loads()
            self._watch_flips()
            if self.route_parked and self._serving("prefill"):
                pending, self.route_parked = self.route_parked, []
                for req in pending:
                    self.route_request(req)
            self.engine.schedule(self.engine.now + self.monitor_period_us,
                                 "control", "monitor_tick")
        elif event.kind == "flip_role_change":
            self._complete_flip(event.data["instance"])
        else:
            raise SimulationError(f"control: unexpected event kind {event.kind!r}")

    # -- global scheduler ----------------------------------------------------------------

    def route_request(self, req: Request) -> None:
        """Send a request to the prefill instance with the least queued tokens.

        The scheduler refreshes its load view from the monitor each tick and
        echoes its own routing decisions in between, so any view it acts on is
        at most one period stale. Coupled clusters route the same way.
        """
        record = self.table.get(req.id)
        if record is None:
            record = RequestRecord(req=req)
            self.table[req.id] = record
        coupled = self._serving("coupled")
        if coupled:
            target = min(coupled, key=lambda i: (self._prefill_load_view.get(i.id, 0), i.id))
            record.prefill_instance = target.id
            record.decode_instance = target.id
            self._prefill_load_view[target.id] = \
                self._prefill_load_view.get(target.id, 0) + req.prompt_len
            target.accept(req)
            return
        candidates = self._serving("prefill")
        if not candidates:
            self.parked_routes += 1
            logger.info("parking request %d at the global scheduler: no prefill instance",
                        req.id)
            self.route_parked.append(req)
            return
        target = min(candidates, key=lambda i: (self._prefill_load_view.get(i.id, 0), i.id))
        record.prefill_instance = target.id
        self._prefill_load_view[target.id] = \
            self._prefill_load_view.get(target.id, 0) + req.prompt_len
        target.accept(req)

    # -- cluster monitor --------------------------------------------------------------------

    def collect_loads(self) -> list[InstanceLoad]:
        loads = []
        now = self.engine.now
        for inst in self.instances.values():
            if inst.role == "prefill":
                loads.append(InstanceLoad(inst.id, "prefill", now,
                                          queued_prompt_tokens=inst.queued_prompt_tokens()))
            elif inst.role == "decode":
                heavy, light = inst.heavy_light_counts()
                loads.append(InstanceLoad(inst.id, "decode", now,
                                          free_kv_pages=inst.free_pages(),
                                          heavy_decodes=heavy, light_decodes=light))
        return loads

    def broadcast_loads(self) -> None:
        """Aggregate decode loads and hand every prefill instance a fresh copy."""
        loads = self.collect_loads()
        decode_loads = [l for l in loads
                        if l.role == "decode" and l.instance not in self._flipping]
        for l in loads:
            if l.role == "prefill":
                self._prefill_load_view[l.instance] = l.queued_prompt_tokens
        for inst in self._by_role("prefill"):
            views = {l.instance: DecodeLoadView(
                instance=l.instance, free_pages=l.free_kv_pages,
                heavy=l.heavy_decodes, light=l.light_decodes,
                page_size=self.params.page_size) for l in decode_loads}
            inst.receive_broadcast(views)
        if decode_loads and self.parked:
            self._retry_parked()

    # -- dispatch bookkeeping ------------------------------------------------------------------

    def note_dispatch(self, req: Request, dst: str, fell_back: bool) -> None:
        record = self.table[req.id]
        record.decode_instance = dst
        if fell_back:
            self.fallback_dispatches += 1
        self._inflight[dst] = self._inflight.get(dst, 0) + 1

    def note_kv_arrival(self, instance_id: str) -> None:
        self._inflight[instance_id] -= 1

    def inflight_to(self, instance_id: str) -> int:
        return self._inflight.get(instance_id, 0)

    def park(self, req: Request, bucket: LengthBucket, origin: str) -> None:
        logger.info("parking request %d: no dispatchable decode instance", req.id)
        self.parked.append((req, bucket))

    def _retry_parked(self) -> None:
        parked, self.parked = self.parked, []
        for req, bucket in parked:
            self._control_dispatch(req, bucket)

    def reroute(self, req: Request, bucket: LengthBucket, landed_on: str) -> None:
        """A transfer landed on an instance that no longer decodes; re-dispatch."""
        self.rerouted_transfers += 1
        self.table[req.id].rerouted = True
        self._control_dispatch(req, bucket)

    def _control_dispatch(self, req: Request, bucket: LengthBucket) -> None:
        """Dispatch performed by the control plane itself (reroutes, unparking)."""
        from . import costs as _costs
        from .prefill import choose_decode_instance
        servers = self._serving("decode")
        if not servers:
            self.parked.append((req, bucket))
            return
        views = {inst.id: DecodeLoadView(
            instance=inst.id, free_pages=inst.free_pages(),
            heavy=inst.heavy_light_counts()[0], light=inst.heavy_light_counts()[1],
            page_size=self.params.page_size) for inst in servers}
        dst, fell_back = choose_decode_instance(
            req, bucket, views, self.rngs.stream("dispatcher"), self.dispatch_policy)
        self.note_dispatch(req, dst, fell_back)
        req.set_phase("transferring")
        latency = _costs.transfer_latency(self.params, req.prompt_len)
        self.engine.schedule(self.engine.now + latency, dst, "kv_arrival",
                             {"req": req, "bucket": bucket})

    # -- per-request lifecycle --------------------------------------------------------------------

    def note_prefill_start(self, req: Request, t: int) -> None:
        record = self.table[req.id]
        if record.prefill_start_us is None:
            record.prefill_start_us = t

    def note_first_token(self, req: Request, t: int) -> None:
        record = self.table[req.id]
        if record.first_token_us is not None:
            raise SimulationError(f"request {req.id}: first token produced twice")
        record.first_token_us = t

    def note_swap(self, req: Request, pages: int) -> None:
        self.swap_events_total += 1
        self.swap_pages_total += pages
        self.table[req.id].swap_events += 1

    def record_completion(self, req: Request) -> None:
        record = self.table[req.id]
        if record.done_us is not None:
            raise SimulationError(f"request {req.id}: completed twice")
        req.set_phase("done")
        record.done_us = self.engine.now
        self.completed += 1
        self.last_completion_us = self.engine.now
        if record.ttft_us is None or record.ttft_us > record.jct_us:
            raise SimulationError(f"request {req.id}: TTFT/JCT ordering violated")

    def all_done(self) -> bool:
        return self.completed >= self.injected

    # -- busy accounting ------------------------------------------------------------------------------

    def note_busy(self, instance_id: str, start: int, end: int) -> None:
        self._busy_spans[instance_id].append((start, end))
        episode = self._episodes[instance_id][-1]
        if episode.first_work_start is None:
            episode.first_work_start = start
        episode.last_work_end = end
        episode.busy_us += end - start
        inst = self.instances[instance_id]
        if inst.role == "decode" and self.first_decode_start_us is None:
            self.first_decode_start_us = start

    def utilization(self, instance_id: str, window_us: int) -> float:
        """Busy fraction of the trailing window for one instance."""
        now = self.engine.now
        lo = max(0, now - window_us)
        spans = self._busy_spans[instance_id]
        busy = 0
        for start, end in reversed(spans):
            if end <= lo:
                break
            busy += min(end, now) - max(start, lo)
        horizon = max(1, now - lo)
        return busy / horizon

    def episodes(self) -> list[BusyEpisode]:
        return [ep for eps in self._episodes.values() for ep in eps]

    # -- instance flip -----------------------------------------------------------------------------------

    def _watch_flips(self) -> None:
        """Flip at most one chronically idle instance per tick."""
        if not self.flip_policy.enabled:
            return
        now = self.engine.now
        for instance_id in sorted(self.instances):
            inst = self.instances[instance_id]
            if inst.role not in ("prefill", "decode"):
                continue
            if instance_id in self._flipping:
                continue
            if now - self._role_start[instance_id] < self.flip_policy.window_us:
                continue
            if len(self._serving(inst.role)) < 2:
                continue  # the last instance of a role cannot flip
            if self.utilization(instance_id, self.flip_policy.window_us) \
                    >= self.flip_policy.threshold:
                continue
            self.request_flip(instance_id)
            return

    def request_flip(self, instance_id: str) -> None:
        inst = self.instances[instance_id]
        if instance_id in self._flipping:
            logger.info("flip requested on already-flipping instance %s; ignored",
                        instance_id)
            return
        if len(self._serving(inst.role)) < 2:
            logger.info("flip of %s refused: last %s instance", instance_id, inst.role)
            return
        direction = "prefill_to_decode" if inst.role == "prefill" else "decode_to_prefill"
        record = FlipRecord(instance=instance_id, direction=direction,
                            requested_us=self.engine.now)
        self._flipping[instance_id] = record
        self.flip_records.append(record)
        if inst.role == "decode":
            # Stop all dispatchers from targeting it; in-flight sends still land.
            for p in self._by_role("prefill"):
                p.exclude_decode(instance_id)
        inst.begin_drain()

    def prefill_drained(self, instance_id: str) -> None:
        self._schedule_role_change(instance_id)

    def decode_drained(self, instance_id: str) -> None:
        self._schedule_role_change(instance_id)

    def _schedule_role_change(self, instance_id: str) -> None:
        record = self._flipping[instance_id]
        record.drained_us = self.engine.now
        # The actual flip is an internal variable change, a handful of ms.
        record.latency_us = self.rng_flip.randint(5_000, 7_000)
        self.engine.schedule(self.engine.now + record.latency_us, "control",
                             "flip_role_change", {"instance": instance_id})

    def _complete_flip(self, instance_id: str) -> None:
        record = self._flipping.pop(instance_id)
        record.completed_us = self.engine.now
        old = self.instances[instance_id]
        new_role = "decode" if old.role == "prefill" else "prefill"
        if new_role == "decode":
            inst = DecodeInstance(instance_id, _Reregister(self.engine), self.params,
                                  self.decode_policy, self)
        else:
            inst = PrefillInstance(instance_id, _Reregister(self.engine), self.params,
                                   self.prefill_policy, self.predictor,
                                   self.dispatch_policy, self.rngs, self)
        self.instances[instance_id] = inst
        self._episodes[instance_id].append(BusyEpisode(instance=instance_id, role=new_role))
        self._role_start[instance_id] = self.engine.now
        self._busy_spans[instance_id].clear()  # utilization window restarts with the role
        if new_role == "prefill":
            self._prefill_load_view[instance_id] = 0
        if new_role == "decode" and self.parked:
            self._retry_parked()


class _Reregister:
    """Engine facade that swaps the handler for an existing id on register()."""

    def __init__(self, engine: Engine):
        self._engine = engine

    def register(self, target, handler):
        self._engine.reregister(target, handler)

    def __getattr__(self, name):
        return getattr(self._engine, name)
