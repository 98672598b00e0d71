"""Experiment runner: config parsing, cluster assembly, runs, summaries, compare.

A run is deterministic given (config, seed): two invocations produce
byte-identical summary.json and requests.csv. Outputs per run:

  summary.json   aggregate metrics (averages, percentiles, resource usage)
  requests.csv   one row per request (versioned header comment)
  events.jsonl   optional engine event trace, one {t, seq, target, kind}/line
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from . import costs, workload
from .control import MONITOR_PERIOD_US, ControlPlane, FlipPolicy
from .coupled import CoupledConfig
from .decode import DecodePolicy
from .engine import Engine, RngStreams, SimulationError, collecting_trace_sink
from .prefill import PredictorModel, PrefillPolicy
from .workload import LengthModel, Request, WorkloadSpec

CSV_HEADER_COMMENT = "# pdsim requests v1"
CSV_COLUMNS = ("id", "arrival_us", "prompt_len", "decode_len", "klass",
               "prefill_instance", "decode_instance", "wait_us", "ttft_us",
               "jct_us", "swap_events", "rerouted")


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending key."""


@dataclass(frozen=True)
class ExperimentConfig:
    system: str = "disaggregated"      # disaggregated | coupled
    n_prefill: int = 1
    n_decode: int = 1
    n_coupled: int = 0
    workload_spec: WorkloadSpec = field(default_factory=WorkloadSpec)
    prefill_policy: PrefillPolicy = field(default_factory=PrefillPolicy)
    decode_policy: DecodePolicy = field(default_factory=DecodePolicy)
    dispatch_policy: str = "power_of_two"
    predictor: PredictorModel = field(default_factory=PredictorModel)
    flip_policy: FlipPolicy = field(default_factory=FlipPolicy)
    coupled_config: CoupledConfig = field(default_factory=CoupledConfig)
    params: costs.CostModelParams = field(default_factory=costs.CostModelParams)
    monitor_period_us: int = MONITOR_PERIOD_US
    seed: int = 0
    events: bool = False
    max_events: int = 100_000_000

    def validate(self) -> None:
        if self.system not in ("disaggregated", "coupled"):
            raise ConfigError(f"system: must be disaggregated or coupled, got {self.system!r}")
        if self.system == "disaggregated":
            if self.n_prefill < 1 or self.n_decode < 1:
                raise ConfigError("cluster: disaggregated runs need prefill >= 1 and decode >= 1")
            if self.n_coupled != 0:
                raise ConfigError("cluster.coupled: must be 0 for a disaggregated run")
        else:
            if self.n_coupled < 1:
                raise ConfigError("cluster.coupled: coupled runs need coupled >= 1")
            if self.n_prefill != 0 or self.n_decode != 0:
                raise ConfigError("cluster: coupled runs take no prefill/decode instances")
        if self.monitor_period_us <= 0:
            raise ConfigError("monitor_period_us: must be > 0")
        try:
            self.workload_spec.validate()
            self.prefill_policy.validate()
            self.decode_policy.validate()
            self.predictor.validate()
            self.flip_policy.validate()
            self.coupled_config.validate()
            self.params.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.dispatch_policy not in ("power_of_two", "random", "imbalance"):
            raise ConfigError(f"policies.dispatcher: unknown policy {self.dispatch_policy!r}")


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from a parsed JSON object."""
    data = dict(data)
    known = {"system", "cluster", "workload", "policies", "predictor", "flip",
             "coupled", "cost_model", "monitor_period_us", "seed", "events",
             "max_events"}
    for key in data:
        if key not in known:
            raise ConfigError(f"{key}: unknown configuration key")
    cluster = data.get("cluster", {})
    policies = data.get("policies", {})
    predictor_cfg = data.get("predictor", {})
    flip_cfg = data.get("flip", {})
    try:
        spec = _workload_from_dict(data.get("workload", {}))
        params = costs.load_calibration(data.get("cost_model", {}))
        config = ExperimentConfig(
            system=data.get("system", "disaggregated"),
            n_prefill=cluster.get("prefill", 1 if data.get("system", "disaggregated")
                                  == "disaggregated" else 0),
            n_decode=cluster.get("decode", 1 if data.get("system", "disaggregated")
                                 == "disaggregated" else 0),
            n_coupled=cluster.get("coupled", 0 if data.get("system", "disaggregated")
                                  == "disaggregated" else 1),
            workload_spec=spec,
            prefill_policy=PrefillPolicy(
                policy=policies.get("prefill", "sjf"),
                sched_batch=policies.get("sched_batch", 16)),
            decode_policy=DecodePolicy(
                policy=policies.get("decode", "reserve_dynamic"),
                max_batch=policies.get("max_batch"),
                admission_bound=policies.get("admission_bound", "lower")),
            dispatch_policy=policies.get("dispatcher", "power_of_two"),
            predictor=PredictorModel(
                granularity=predictor_cfg.get("granularity", 200),
                accuracy=predictor_cfg.get("accuracy"),
                mode=predictor_cfg.get("mode", "parallel"),
                enabled=predictor_cfg.get("enabled", True)),
            flip_policy=FlipPolicy(
                enabled=flip_cfg.get("enabled", False),
                threshold=flip_cfg.get("threshold", 0.10),
                window_us=flip_cfg.get("window_us", 60_000_000)),
            coupled_config=CoupledConfig(
                prefill_batch=data.get("coupled", {}).get("prefill_batch", 16),
                max_batch=data.get("coupled", {}).get("max_batch", 16)),
            params=params,
            monitor_period_us=data.get("monitor_period_us", MONITOR_PERIOD_US),
            seed=data.get("seed", 0),
            events=data.get("events", False),
            max_events=data.get("max_events", 100_000_000),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    config.validate()
    return config


def _workload_from_dict(data: dict) -> WorkloadSpec:
    data = dict(data)
    lengths = dict(workload.DEFAULT_LENGTHS)
    for name, override in data.pop("lengths", {}).items():
        if name not in lengths:
            raise ConfigError(f"workload.lengths.{name}: unknown length model")
        base = lengths[name]
        lengths[name] = LengthModel(
            median=override.get("median", base.median),
            sigma=override.get("sigma", base.sigma),
            lo=override.get("lo", base.lo),
            hi=override.get("hi", base.hi))
    return WorkloadSpec(
        klass=data.get("class", "Mixed"),
        n_requests=data.get("n_requests", 128),
        arrival=data.get("arrival", "burst"),
        rate_per_s=data.get("rate_per_s", 0.0),
        mixture=data.get("mixture", dict(workload.DEFAULT_MIXTURE)),
        lengths=lengths,
        trace_path=data.get("trace_path"))


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return config_from_dict(data)


@dataclass
class RunResult:
    summary: dict
    rows: list[dict]
    events: list[dict] | None = None
    control: object | None = None  # live control plane, for inspection in tests


def _percentile(sorted_values: list[int], q: float) -> int:
    """Nearest-rank percentile over a pre-sorted list."""
    if not sorted_values:
        return 0
    rank = max(1, math.ceil(q * len(sorted_values)))
    return sorted_values[rank - 1]


def _stats(values: list[int]) -> dict:
    ordered = sorted(values)
    n = len(ordered)
    return {
        "avg_us": (sum(ordered) / n) if n else 0.0,
        "p50_us": _percentile(ordered, 0.50),
        "p99_us": _percentile(ordered, 0.99),
    }


def run_experiment(config: ExperimentConfig, seed: int | None = None,
                   out_dir: str | Path | None = None) -> RunResult:
    """Run one experiment; deterministic given (config, seed)."""
    config.validate()
    if seed is None:
        seed = config.seed
    rngs = RngStreams(seed)
    requests = workload.generate(config.workload_spec, rngs.stream("workload"))
    fp = workload.fingerprint(requests)

    events: list[dict] | None = [] if config.events else None
    engine = Engine(max_events=config.max_events,
                    trace_sink=collecting_trace_sink(events) if config.events else None)
    predictor = PredictorModel(  # fresh memo per run
        granularity=config.predictor.granularity,
        accuracy=config.predictor.accuracy,
        mode=config.predictor.mode,
        max_decode_len=config.predictor.max_decode_len,
        enabled=config.predictor.enabled)
    control = ControlPlane(
        engine, rngs, config.params,
        prefill_policy=config.prefill_policy,
        decode_policy=config.decode_policy,
        dispatch_policy=config.dispatch_policy,
        predictor=predictor,
        flip_policy=config.flip_policy,
        coupled_config=config.coupled_config,
        monitor_period_us=config.monitor_period_us)
    for i in range(config.n_prefill):
        control.add_prefill_instance(f"p{i}")
    for i in range(config.n_decode):
        control.add_decode_instance(f"d{i}")
    for i in range(config.n_coupled):
        control.add_coupled_instance(f"c{i}")
    control.start()
    control.inject(requests)
    stats = engine.run(stop=control.all_done)

    if control.completed != control.injected:
        raise SimulationError(
            f"run ended with {control.injected - control.completed} request(s) "
            f"not in a terminal state")

    rows = _request_rows(control)
    summary = _summarize(config, seed, fp, control, stats, rows)
    result = RunResult(summary=summary, rows=rows, events=events, control=control)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def _request_rows(control: ControlPlane) -> list[dict]:
    rows = []
    for req_id in sorted(control.table):
        r = control.table[req_id]
        rows.append({
            "id": r.req.id,
            "arrival_us": r.req.arrival_us,
            "prompt_len": r.req.prompt_len,
            "decode_len": r.req.true_decode_len,
            "klass": r.req.klass,
            "prefill_instance": r.prefill_instance or "",
            "decode_instance": r.decode_instance or "",
            "wait_us": r.wait_us,
            "ttft_us": r.ttft_us,
            "jct_us": r.jct_us,
            "swap_events": r.swap_events,
            "rerouted": 1 if r.rerouted else 0,
        })
    return rows


def _summarize(config: ExperimentConfig, seed: int, fp: str,
               control: ControlPlane, stats, rows: list[dict]) -> dict:
    episodes = control.episodes()
    resource_us = sum(ep.span_us for ep in episodes)
    ttft = _stats([row["ttft_us"] for row in rows])
    jct = _stats([row["jct_us"] for row in rows])
    waits = [row["wait_us"] for row in rows]
    completed = len(rows)
    decode_span = 0
    if control.first_decode_start_us is not None and control.last_completion_us is not None:
        decode_span = control.last_completion_us - control.first_decode_start_us
    summary = {
        "schema_version": 1,
        "system": config.system,
        "seed": seed,
        "workload_class": config.workload_spec.klass,
        "workload_fingerprint": fp,
        "n_requests": control.injected,
        "completed": completed,
        "ttft": ttft,
        "jct": jct,
        "wait_avg_us": (sum(waits) / len(waits)) if waits else 0.0,
        "resource_usage_us": resource_us,
        "perf_per_dollar": (completed / (resource_us / 1e6)) if resource_us else 0.0,
        "makespan_us": stats.end_time,
        "decode_span_us": decode_span,
        "swap_events_total": control.swap_events_total,
        "swap_pages_total": control.swap_pages_total,
        "rerouted_transfers": control.rerouted_transfers,
        "fallback_dispatches": control.fallback_dispatches,
        "parked_routes": control.parked_routes,
        "flips_completed": sum(1 for f in control.flip_records
                               if f.completed_us is not None),
        "events_fired": stats.events_fired,
    }
    return summary


def write_outputs(result: RunResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(
        json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    lines = [CSV_HEADER_COMMENT, ",".join(CSV_COLUMNS)]
    for row in result.rows:
        lines.append(",".join(str(row[c]) for c in CSV_COLUMNS))
    (out / "requests.csv").write_text("\n".join(lines) + "\n")
    if result.events is not None:
        with open(out / "events.jsonl", "w") as fh:
            for event in result.events:
                fh.write(json.dumps(event, separators=(",", ":")) + "\n")


def read_rows(run_dir: str | Path) -> list[dict]:
    """Parse requests.csv back into typed rows."""
    text = (Path(run_dir) / "requests.csv").read_text().splitlines()
    if not text or text[0] != CSV_HEADER_COMMENT:
        raise ConfigError(f"{run_dir}/requests.csv: missing version header")
    header = text[1].split(",")
    rows = []
    for line in text[2:]:
        raw = dict(zip(header, line.split(",")))
        rows.append({
            "id": int(raw["id"]),
            "arrival_us": int(raw["arrival_us"]),
            "prompt_len": int(raw["prompt_len"]),
            "decode_len": int(raw["decode_len"]),
            "klass": raw["klass"],
            "prefill_instance": raw["prefill_instance"],
            "decode_instance": raw["decode_instance"],
            "wait_us": int(raw["wait_us"]),
            "ttft_us": int(raw["ttft_us"]),
            "jct_us": int(raw["jct_us"]),
            "swap_events": int(raw["swap_events"]),
            "rerouted": int(raw["rerouted"]),
        })
    return rows


def compare(summary_a: dict, summary_b: dict) -> dict:
    """Ratio table of run a against baseline b (b is the denominator)."""
    if summary_a["workload_fingerprint"] != summary_b["workload_fingerprint"]:
        raise ConfigError("compare: runs used different workload traces")

    def ratio(metric_a: float, metric_b: float) -> float:
        return metric_a / metric_b if metric_b else float("inf")

    report = {
        "baseline": summary_b["system"],
        "candidate": summary_a["system"],
        "ttft_avg_ratio": ratio(summary_a["ttft"]["avg_us"], summary_b["ttft"]["avg_us"]),
        "jct_avg_ratio": ratio(summary_a["jct"]["avg_us"], summary_b["jct"]["avg_us"]),
        "resource_ratio": ratio(summary_a["resource_usage_us"],
                                summary_b["resource_usage_us"]),
        "perf_per_dollar_ratio": ratio(summary_a["perf_per_dollar"],
                                       summary_b["perf_per_dollar"]),
    }
    report["ttft_improvement"] = 1.0 - report["ttft_avg_ratio"]
    report["jct_improvement"] = 1.0 - report["jct_avg_ratio"]
    return report


def compare_dirs(dir_a: str | Path, dir_b: str | Path) -> dict:
    summary_a = json.loads((Path(dir_a) / "summary.json").read_text())
    summary_b = json.loads((Path(dir_b) / "summary.json").read_text())
    return compare(summary_a, summary_b)
