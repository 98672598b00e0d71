"""Request stream generation and trace I/O.

Five synthetic workload classes mirror common mixes of chat, summarization and
content-creation traffic: requests are classified heavy/light on both axes
(prompt > 512 tokens is heavy prefill; generated > 128 tokens is heavy
decode), and per-class token lengths follow bounded log-normal distributions
whose parameters live in the spec so a CSV trace can replace them entirely.
"""

from __future__ import annotations

import csv
import hashlib
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

from .engine import SimulationError

HEAVY_PROMPT_TOKENS = 512
HEAVY_DECODE_TOKENS = 128

PHASES = ("queued", "prefilling", "transferring", "decoding", "done")
_PHASE_INDEX = {name: i for i, name in enumerate(PHASES)}

WORKLOAD_CLASSES = ("LPLD", "LPHD", "HPLD", "HPHD", "Mixed", "Trace")
_PURE_CLASSES = ("LPLD", "LPHD", "HPLD", "HPHD")

TRACE_HEADER = ("arrival_us", "prompt_len", "decode_len")
TRACE_HEADER_SLA = TRACE_HEADER + ("sla_us",)


@dataclass
class Request:
    """One inference job. Lengths are fixed at creation; phase only advances."""

    id: int
    arrival_us: int
    prompt_len: int
    true_decode_len: int
    sla_us: int | None = None
    phase: str = "queued"

    def __post_init__(self):
        if self.prompt_len < 1 or self.true_decode_len < 1:
            raise ValueError("prompt_len and true_decode_len must be >= 1")
        if self.arrival_us < 0:
            raise ValueError("arrival_us must be >= 0")

    def set_phase(self, phase: str) -> None:
        if _PHASE_INDEX[phase] < _PHASE_INDEX[self.phase]:
            raise SimulationError(
                f"request {self.id}: phase may not move back ({self.phase} -> {phase})")
        self.phase = phase

    @property
    def heavy_prefill(self) -> bool:
        return self.prompt_len > HEAVY_PROMPT_TOKENS

    @property
    def heavy_decode(self) -> bool:
        return self.true_decode_len > HEAVY_DECODE_TOKENS

    @property
    def klass(self) -> str:
        return (("HP" if self.heavy_prefill else "LP")
                + ("HD" if self.heavy_decode else "LD"))


@dataclass(frozen=True)
class LengthModel:
    """Bounded log-normal over token counts: median, shape, inclusive range."""

    median: float
    sigma: float
    lo: int
    hi: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("lengths.sigma: must be >= 0")
        if not 1 <= self.lo <= self.hi:
            raise ValueError("lengths: need 1 <= lo <= hi")

    def sample(self, rng: random.Random) -> int:
        mu = math.log(self.median)
        for _ in range(64):
            value = round(rng.lognormvariate(mu, self.sigma))
            if self.lo <= value <= self.hi:
                return value
        return min(max(round(self.median), self.lo), self.hi)


# Default token-length models; heavy/light boundaries match the class
# thresholds above. The light-prompt median of 18 tokens matches the median
# short chat prompt in public conversation datasets.
DEFAULT_LENGTHS: dict[str, LengthModel] = {
    "light_prompt": LengthModel(median=18, sigma=1.0, lo=1, hi=512),
    "heavy_prompt": LengthModel(median=900, sigma=0.5, lo=513, hi=8192),
    "light_decode": LengthModel(median=64, sigma=0.7, lo=1, hi=128),
    "heavy_decode": LengthModel(median=450, sigma=0.6, lo=129, hi=2048),
}

DEFAULT_MIXTURE = {"LPLD": 0.25, "LPHD": 0.25, "HPLD": 0.25, "HPHD": 0.25}


@dataclass(frozen=True)
class WorkloadSpec:
    klass: str = "Mixed"
    n_requests: int = 128
    arrival: str = "burst"            # burst: all at t=0 | poisson: open loop
    rate_per_s: float = 0.0
    mixture: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MIXTURE))
    lengths: dict[str, LengthModel] = field(default_factory=lambda: dict(DEFAULT_LENGTHS))
    trace_path: str | None = None

    def validate(self) -> None:
        if self.klass not in WORKLOAD_CLASSES:
            raise ValueError(f"workload.class: unknown class {self.klass!r}")
        if self.klass == "Trace":
            if not self.trace_path:
                raise ValueError("workload.trace_path: required for class Trace")
            return
        if self.n_requests < 1:
            raise ValueError("workload.n_requests: must be >= 1")
        if self.arrival not in ("burst", "poisson"):
            raise ValueError(f"workload.arrival: unknown process {self.arrival!r}")
        if self.arrival == "poisson" and self.rate_per_s <= 0:
            raise ValueError("workload.rate_per_s: must be > 0 for poisson arrivals")
        if self.klass == "Mixed":
            if set(self.mixture) - set(_PURE_CLASSES):
                raise ValueError("workload.mixture: keys must be the four pure classes")
            total = sum(self.mixture.values())
            if total <= 0 or any(w < 0 for w in self.mixture.values()):
                raise ValueError("workload.mixture: weights must be >= 0 and sum > 0")


def _models_for(spec: WorkloadSpec, klass: str) -> tuple[LengthModel, LengthModel]:
    prompt = spec.lengths["heavy_prompt" if klass[:2] == "HP" else "light_prompt"]
    decode = spec.lengths["heavy_decode" if klass[2:] == "HD" else "light_decode"]
    return prompt, decode


def generate(spec: WorkloadSpec, rng: random.Random) -> list[Request]:
    """Generate a request list for the spec, sorted by arrival time.

    Every sampled length respects the owning class's heavy/light bound, so an
    LPHD request always has prompt_len <= 512 and true_decode_len > 128.
    """
    spec.validate()
    if spec.klass == "Trace":
        return load_trace(spec.trace_path)
    classes = list(spec.mixture) if spec.klass == "Mixed" else None
    weights = [spec.mixture[c] for c in classes] if classes else None
    requests = []
    clock_us = 0.0
    for i in range(spec.n_requests):
        klass = rng.choices(classes, weights)[0] if classes else spec.klass
        prompt_model, decode_model = _models_for(spec, klass)
        if spec.arrival == "poisson":
            clock_us += rng.expovariate(spec.rate_per_s) * 1_000_000
        arrival = int(clock_us)
        requests.append(Request(
            id=i, arrival_us=arrival,
            prompt_len=prompt_model.sample(rng),
            true_decode_len=decode_model.sample(rng)))
    requests.sort(key=lambda r: r.arrival_us)
    return requests


def load_trace(path: str | Path) -> list[Request]:
    """Load requests from a CSV trace, stably sorted by arrival time.

    Expected header: arrival_us,prompt_len,decode_len[,sla_us]. Malformed rows
    raise a ValueError naming the line number.
    """
    requests = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) not in (TRACE_HEADER, TRACE_HEADER_SLA):
            raise ValueError(f"{path}: line 1: expected header "
                             f"{','.join(TRACE_HEADER)}[,sla_us]")
        has_sla = tuple(header) == TRACE_HEADER_SLA
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno}: expected {len(header)} fields, "
                                 f"got {len(row)}")
            try:
                arrival, prompt, decode = int(row[0]), int(row[1]), int(row[2])
                sla = int(row[3]) if has_sla and row[3] != "" else None
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-integer field") from None
            if prompt < 1 or decode < 1:
                raise ValueError(f"{path}: line {lineno}: token counts must be >= 1")
            if arrival < 0:
                raise ValueError(f"{path}: line {lineno}: arrival_us must be >= 0")
            requests.append(Request(id=len(requests), arrival_us=arrival,
                                    prompt_len=prompt, true_decode_len=decode,
                                    sla_us=sla))
    requests.sort(key=lambda r: r.arrival_us)
    return requests


def export_trace(requests: list[Request], path: str | Path) -> None:
    """Write requests in the trace CSV format (round-trips with load_trace)."""
    any_sla = any(r.sla_us is not None for r in requests)
    header = TRACE_HEADER_SLA if any_sla else TRACE_HEADER
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in requests:
            row = [r.arrival_us, r.prompt_len, r.true_decode_len]
            if any_sla:
                row.append("" if r.sla_us is None else r.sla_us)
            writer.writerow(row)


def fingerprint(requests: list[Request]) -> str:
    """Stable digest of a request list, used to match runs over one workload."""
    h = hashlib.sha256()
    for r in requests:
        h.update(f"{r.arrival_us},{r.prompt_len},{r.true_decode_len},{r.sla_us};".encode())
    return h.hexdigest()
