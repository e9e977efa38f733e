"""Deterministic discrete-time model of a microservice cluster.

The simulator is the substrate everything else runs against. Design goals,
in order: reproducibility (identical topology + seed + operation sequence
gives byte-identical state digests), observability (faults move metrics far
outside their nominal bands), and simplicity (first-order dynamics, no
container runtime, no request tracing).

Metric dynamics
---------------
Every pod metric (cpu_pct, mem_pct, io_await_ms) and link metric
(added_delay_ms, loss_pct) relaxes toward a setpoint with time constant
``RELAX_TAU_MS``. The setpoint is the declared baseline unless a matching
perturbation is active, in which case it is the perturbation magnitude.
Each step relaxes toward the setpoint plus seeded Gaussian jitter
(sigma = ``NOISE_SIGMA``), so the stationary spread stays well inside the
+/- 3 sigma recovery band used by verification::

    m += (1 - exp(-dt/tau)) * ((setpoint + noise) - m)

Fault semantics that matter for remediation:

* restarts (pod or service) reset metrics to baseline and clear in-pod
  faults (cpu/mem/io stress processes and pod kills) for that service;
  they never clear link shaping or config corruption.
* removing link shaping clears the link metric immediately (deleting a
  traffic-shaping rule is instantaneous, unlike a draining stress process).
* a config value differing from the declared topology value drives the
  owning service's pods to CrashLoop on the next step; correcting the
  value plus a restart restores them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Union

import numpy as np

from .errors import InvalidArgumentError, NotFoundError
from .topology import Topology, parse_topology, summarize

RELAX_TAU_MS = 5000.0
NOISE_SIGMA = 2.0
# Metric considered recovered when within baseline +/- RECOVERY_BAND.
RECOVERY_BAND = 3.0 * NOISE_SIGMA


class PodPhase(str, Enum):
    RUNNING = "Running"
    CRASH_LOOP = "CrashLoop"
    PENDING = "Pending"
    TERMINATED = "Terminated"


class PerturbationKind(str, Enum):
    CPU_STRESS = "cpu_stress"
    MEM_STRESS = "mem_stress"
    IO_STRESS = "io_stress"
    NET_DELAY = "net_delay"
    NET_LOSS = "net_loss"
    POD_KILL = "pod_kill"
    CONFIG_CORRUPT = "config_corrupt"


STRESS_KINDS = frozenset(
    {PerturbationKind.CPU_STRESS, PerturbationKind.MEM_STRESS, PerturbationKind.IO_STRESS}
)
LINK_KINDS = frozenset({PerturbationKind.NET_DELAY, PerturbationKind.NET_LOSS})
# Faults that live inside a pod and therefore die with it on restart.
IN_POD_KINDS = STRESS_KINDS | {PerturbationKind.POD_KILL}

_STRESS_METRIC = {
    PerturbationKind.CPU_STRESS: "cpu_pct",
    PerturbationKind.MEM_STRESS: "mem_pct",
    PerturbationKind.IO_STRESS: "io_await_ms",
}


def link_key(src: str, dst: str) -> str:
    return f"{src}->{dst}"


def split_link_key(target: str) -> tuple[str, str]:
    src, sep, dst = target.partition("->")
    if not sep or not src or not dst:
        raise InvalidArgumentError(f"{target!r} is not a link identifier")
    return src, dst


@dataclass
class PodState:
    pod_id: str
    service: str
    phase: PodPhase
    cpu_pct: float
    mem_pct: float
    io_await_ms: float
    restarts: int = 0


@dataclass
class NetworkLink:
    src: str
    dst: str
    base_latency_ms: float
    added_delay_ms: float = 0.0
    loss_pct: float = 0.0

    @property
    def key(self) -> str:
        return link_key(self.src, self.dst)


@dataclass
class Perturbation:
    handle: str
    kind: PerturbationKind
    target: str  # service name, or "src->dst" for link kinds
    magnitude: float
    injected_at: int


@dataclass
class StressProcess:
    """Synthetic process backing a cpu/mem/io stress perturbation."""

    handle: str
    kind: PerturbationKind
    service: str
    started_ms: int


class ProbeKind(str, Enum):
    POD_METRICS = "pod_metrics"
    POD_LIST = "pod_list"
    CONFIG_GET = "config_get"
    LINK_STATS = "link_stats"
    TOPOLOGY_SUMMARY = "topology_summary"


@dataclass(frozen=True)
class ProbeQuery:
    kind: ProbeKind
    service: str | None = None
    key: str | None = None
    src: str | None = None
    dst: str | None = None


def pod_metrics_query(service: str) -> ProbeQuery:
    return ProbeQuery(ProbeKind.POD_METRICS, service=service)


def pod_list_query(service: str) -> ProbeQuery:
    return ProbeQuery(ProbeKind.POD_LIST, service=service)


def config_get_query(service: str, key: str) -> ProbeQuery:
    return ProbeQuery(ProbeKind.CONFIG_GET, service=service, key=key)


def link_stats_query(src: str, dst: str) -> ProbeQuery:
    return ProbeQuery(ProbeKind.LINK_STATS, src=src, dst=dst)


def topology_summary_query() -> ProbeQuery:
    return ProbeQuery(ProbeKind.TOPOLOGY_SUMMARY)


@dataclass(frozen=True)
class ProbeResult:
    query: ProbeQuery
    payload: Mapping
    text: str


# --- Actions -----------------------------------------------------------------
# Closed enumeration of effects a remediation can have on the cluster.


@dataclass(frozen=True)
class RestartPod:
    pod_id: str


@dataclass(frozen=True)
class RestartService:
    service: str


@dataclass(frozen=True)
class ScaleService:
    service: str
    replicas: int


@dataclass(frozen=True)
class SetConfig:
    service: str
    key: str
    value: str


@dataclass(frozen=True)
class KillProcess:
    handle: str


@dataclass(frozen=True)
class ClearLinkShaping:
    src: str
    dst: str


@dataclass(frozen=True)
class RemovePerturbation:
    kind: PerturbationKind
    target: str


@dataclass(frozen=True)
class Noop:
    note: str = ""


ClusterAction = Union[
    RestartPod,
    RestartService,
    ScaleService,
    SetConfig,
    KillProcess,
    ClearLinkShaping,
    RemovePerturbation,
    Noop,
]

ACTION_TYPES = (
    RestartPod,
    RestartService,
    ScaleService,
    SetConfig,
    KillProcess,
    ClearLinkShaping,
    RemovePerturbation,
    Noop,
)


@dataclass
class ActionOutcome:
    changed: bool
    stdout: str = ""


@dataclass
class ClusterState:
    """Full simulated world for one episode. Mutated single-threaded."""

    topology: Topology
    seed: int
    clock_ms: int = 0
    pods: list[PodState] = field(default_factory=list)
    links: list[NetworkLink] = field(default_factory=list)
    config_store: dict[tuple[str, str], str] = field(default_factory=dict)
    perturbations: list[Perturbation] = field(default_factory=list)
    process_table: dict[str, StressProcess] = field(default_factory=dict)
    _rng: np.random.Generator = field(default=None, repr=False)
    _pod_seq: dict[str, int] = field(default_factory=dict, repr=False)
    _handle_seq: int = field(default=0, repr=False)

    @property
    def lineage(self) -> str:
        return f"{self.topology.name}:{self.seed}"

    def service_pods(self, service: str) -> list[PodState]:
        return [p for p in self.pods if p.service == service]

    def find_link(self, src: str, dst: str) -> NetworkLink | None:
        for link in self.links:
            if link.src == src and link.dst == dst:
                return link
        return None

    def active(self, kind: PerturbationKind, target: str) -> list[Perturbation]:
        return [p for p in self.perturbations if p.kind == kind and p.target == target]


def load_topology(doc: Topology | str | Mapping, seed: int = 0) -> ClusterState:
    """Boot a cluster from a topology document.

    One Running pod per desired replica, metrics at their declared
    baselines, clock at zero. The state digest is a pure function of
    (document, seed).
    """
    topology = doc if isinstance(doc, Topology) else parse_topology(doc)
    state = ClusterState(topology=topology, seed=seed)
    state._rng = np.random.default_rng(seed)
    for spec in topology.services.values():
        state._pod_seq[spec.name] = 0
        for _ in range(spec.desired_replicas):
            state.pods.append(_fresh_pod(state, spec.name))
        for key, value in spec.config.items():
            state.config_store[(spec.name, key)] = value
    for link in topology.links:
        state.links.append(
            NetworkLink(src=link.src, dst=link.dst, base_latency_ms=link.base_latency_ms)
        )
    return state


def _fresh_pod(state: ClusterState, service: str) -> PodState:
    spec = state.topology.service(service)
    idx = state._pod_seq[service]
    state._pod_seq[service] = idx + 1
    return PodState(
        pod_id=f"{service}-{idx}",
        service=service,
        phase=PodPhase.RUNNING,
        cpu_pct=spec.baseline.cpu_pct,
        mem_pct=spec.baseline.mem_pct,
        io_await_ms=spec.baseline.io_await_ms,
    )


def new_handle(state: ClusterState, kind: PerturbationKind, target: str) -> str:
    state._handle_seq += 1
    return f"{kind.value}-{target}-{state._handle_seq}"


def add_perturbation(
    state: ClusterState, kind: PerturbationKind, target: str, magnitude: float
) -> Perturbation:
    """Register a perturbation (and its stress process, for stress kinds).

    This is the injection substrate used by the fault engine; it performs
    no validation beyond handle bookkeeping.
    """
    pert = Perturbation(
        handle=new_handle(state, kind, target),
        kind=kind,
        target=target,
        magnitude=magnitude,
        injected_at=state.clock_ms,
    )
    state.perturbations.append(pert)
    if kind in STRESS_KINDS:
        state.process_table[pert.handle] = StressProcess(
            handle=pert.handle, kind=kind, service=target, started_ms=state.clock_ms
        )
    return pert


def _remove_perturbations(state: ClusterState, perts: list[Perturbation]) -> int:
    removed = 0
    for pert in perts:
        if pert in state.perturbations:
            state.perturbations.remove(pert)
            state.process_table.pop(pert.handle, None)
            removed += 1
            if pert.kind in LINK_KINDS:
                _snap_link_metric(state, pert)
    return removed


def _snap_link_metric(state: ClusterState, pert: Perturbation) -> None:
    src, dst = split_link_key(pert.target)
    link = state.find_link(src, dst)
    if link is None:
        return
    if pert.kind == PerturbationKind.NET_DELAY:
        link.added_delay_ms = 0.0
    elif pert.kind == PerturbationKind.NET_LOSS:
        link.loss_pct = 0.0


# --- step ---------------------------------------------------------------------


def step(state: ClusterState, dt_ms: int) -> ClusterState:
    """Advance the simulation clock by dt_ms, relaxing metrics in place."""
    if dt_ms <= 0:
        raise InvalidArgumentError("dt_ms must be > 0")
    state.clock_ms += dt_ms
    alpha = 1.0 - math.exp(-dt_ms / RELAX_TAU_MS)
    rng = state._rng

    stress_setpoints: dict[tuple[str, str], float] = {}
    for pert in state.perturbations:
        if pert.kind in STRESS_KINDS:
            stress_setpoints[(pert.target, _STRESS_METRIC[pert.kind])] = pert.magnitude

    for pod in state.pods:
        spec = state.topology.service(pod.service)
        if pod.phase == PodPhase.RUNNING:
            targets = {
                "cpu_pct": spec.baseline.cpu_pct,
                "mem_pct": spec.baseline.mem_pct,
                "io_await_ms": spec.baseline.io_await_ms,
            }
            for metric in targets:
                override = stress_setpoints.get((pod.service, metric))
                if override is not None:
                    targets[metric] = override
        else:
            # A pod that is not running consumes nothing.
            targets = {"cpu_pct": 0.0, "mem_pct": 0.0, "io_await_ms": 0.0}
        # Noise draws are unconditional so the stream depends only on the
        # pod/link population, never on which perturbations are active.
        noise = rng.normal(0.0, NOISE_SIGMA, size=3)
        pod.cpu_pct = _clamp(pod.cpu_pct + alpha * (targets["cpu_pct"] + noise[0] - pod.cpu_pct), 0.0, 100.0)
        pod.mem_pct = _clamp(pod.mem_pct + alpha * (targets["mem_pct"] + noise[1] - pod.mem_pct), 0.0, 100.0)
        pod.io_await_ms = float(max(0.0, pod.io_await_ms + alpha * (targets["io_await_ms"] + noise[2] - pod.io_await_ms)))

    delay_setpoints: dict[str, float] = {}
    loss_setpoints: dict[str, float] = {}
    for pert in state.perturbations:
        if pert.kind == PerturbationKind.NET_DELAY:
            delay_setpoints[pert.target] = pert.magnitude
        elif pert.kind == PerturbationKind.NET_LOSS:
            loss_setpoints[pert.target] = pert.magnitude

    for link in state.links:
        noise = rng.normal(0.0, NOISE_SIGMA, size=2)
        delay_target = delay_setpoints.get(link.key, 0.0)
        loss_target = loss_setpoints.get(link.key, 0.0)
        link.added_delay_ms = float(max(0.0, link.added_delay_ms + alpha * (delay_target + noise[0] - link.added_delay_ms)))
        link.loss_pct = _clamp(link.loss_pct + alpha * (loss_target + noise[1] - link.loss_pct), 0.0, 100.0)

    _propagate_config_corruption(state)
    return state


def _propagate_config_corruption(state: ClusterState) -> None:
    for spec in state.topology.services.values():
        corrupted = any(
            state.config_store.get((spec.name, key)) != value
            for key, value in spec.config.items()
        )
        if corrupted:
            for pod in state.pods:
                if pod.service == spec.name and pod.phase == PodPhase.RUNNING:
                    pod.phase = PodPhase.CRASH_LOOP


def _clamp(value: float, lo: float, hi: float) -> float:
    return float(min(hi, max(lo, value)))


# --- observe ------------------------------------------------------------------


def observe(state: ClusterState, query: ProbeQuery) -> ProbeResult:
    """Answer a read-only query. Never mutates state."""
    if query.kind == ProbeKind.POD_METRICS:
        pods = _require_service_pods(state, query.service)
        payload = {
            "service": query.service,
            "pods": [
                {
                    "pod_id": p.pod_id,
                    "phase": p.phase.value,
                    "cpu_pct": round(p.cpu_pct, 2),
                    "mem_pct": round(p.mem_pct, 2),
                    "io_await_ms": round(p.io_await_ms, 2),
                    "restarts": p.restarts,
                }
                for p in pods
            ],
        }
        lines = [f"pod metrics for {query.service}:"]
        for p in pods:
            lines.append(
                f"  {p.pod_id} phase={p.phase.value} cpu={p.cpu_pct:.2f}% "
                f"mem={p.mem_pct:.2f}% io_await={p.io_await_ms:.2f}ms restarts={p.restarts}"
            )
        return ProbeResult(query, payload, "\n".join(lines))

    if query.kind == ProbeKind.POD_LIST:
        pods = _require_service_pods(state, query.service)
        payload = {
            "service": query.service,
            "pods": [{"pod_id": p.pod_id, "phase": p.phase.value} for p in pods],
        }
        lines = [f"pods for {query.service}:"]
        lines += [f"  {p.pod_id} {p.phase.value}" for p in pods]
        return ProbeResult(query, payload, "\n".join(lines))

    if query.kind == ProbeKind.CONFIG_GET:
        if query.service not in state.topology.services:
            raise NotFoundError(f"unknown service {query.service!r}")
        spec = state.topology.service(query.service)
        if query.key not in spec.config:
            raise NotFoundError(f"unknown config key {query.key!r} for service {query.service!r}")
        current = state.config_store[(query.service, query.key)]
        declared = spec.config[query.key]
        payload = {
            "service": query.service,
            "key": query.key,
            "value": current,
            "declared": declared,
        }
        text = (
            f"config {query.service}/{query.key}: current={current!r} declared={declared!r}"
        )
        return ProbeResult(query, payload, text)

    if query.kind == ProbeKind.LINK_STATS:
        link = state.find_link(query.src, query.dst)
        if link is None:
            raise NotFoundError(f"unknown link {query.src!r} -> {query.dst!r}")
        payload = {
            "src": link.src,
            "dst": link.dst,
            "base_latency_ms": round(link.base_latency_ms, 2),
            "added_delay_ms": round(link.added_delay_ms, 2),
            "loss_pct": round(link.loss_pct, 2),
        }
        text = (
            f"link {link.src} -> {link.dst}: base_latency={link.base_latency_ms:.2f}ms "
            f"added_delay={link.added_delay_ms:.2f}ms loss={link.loss_pct:.2f}%"
        )
        return ProbeResult(query, payload, text)

    if query.kind == ProbeKind.TOPOLOGY_SUMMARY:
        text = summarize(state.topology, include_config_values=True)
        payload = {"topology": state.topology.name, "services": list(state.topology.services)}
        return ProbeResult(query, payload, text)

    raise InvalidArgumentError(f"unknown probe kind {query.kind!r}")


def _require_service_pods(state: ClusterState, service: str | None) -> list[PodState]:
    if service not in state.topology.services:
        raise NotFoundError(f"unknown service {service!r}")
    return state.service_pods(service)


# --- apply --------------------------------------------------------------------


def apply(state: ClusterState, action: ClusterAction) -> tuple[ClusterState, ActionOutcome]:
    """Apply one cluster action, returning the (mutated) state and outcome."""
    if isinstance(action, RestartPod):
        pod = next((p for p in state.pods if p.pod_id == action.pod_id), None)
        if pod is None:
            raise NotFoundError(f"unknown pod {action.pod_id!r}")
        _restart_pods(state, [pod])
        return state, ActionOutcome(changed=True, stdout=f"pod {pod.pod_id} restarted")

    if isinstance(action, RestartService):
        pods = _require_service_pods(state, action.service)
        _restart_pods(state, pods)
        return state, ActionOutcome(
            changed=True, stdout=f"service {action.service} restarted ({len(pods)} pods)"
        )

    if isinstance(action, ScaleService):
        if action.service not in state.topology.services:
            raise NotFoundError(f"unknown service {action.service!r}")
        if action.replicas < 0:
            raise InvalidArgumentError("replicas must be >= 0")
        current = state.service_pods(action.service)
        delta = action.replicas - len(current)
        if delta > 0:
            for _ in range(delta):
                state.pods.append(_fresh_pod(state, action.service))
        elif delta < 0:
            for pod in current[delta:]:
                state.pods.remove(pod)
        return state, ActionOutcome(
            changed=delta != 0,
            stdout=f"service {action.service} scaled to {action.replicas} replicas",
        )

    if isinstance(action, SetConfig):
        if action.service not in state.topology.services:
            raise NotFoundError(f"unknown service {action.service!r}")
        spec = state.topology.service(action.service)
        if action.key not in spec.config:
            raise NotFoundError(
                f"unknown config key {action.key!r} for service {action.service!r}"
            )
        old = state.config_store[(action.service, action.key)]
        state.config_store[(action.service, action.key)] = action.value
        return state, ActionOutcome(
            changed=old != action.value,
            stdout=f"config {action.service}/{action.key} set",
        )

    if isinstance(action, KillProcess):
        proc = state.process_table.get(action.handle)
        if proc is None:
            raise NotFoundError(f"unknown process handle {action.handle!r}")
        perts = [p for p in state.perturbations if p.handle == action.handle]
        _remove_perturbations(state, perts)
        state.process_table.pop(action.handle, None)
        return state, ActionOutcome(changed=True, stdout=f"process {action.handle} killed")

    if isinstance(action, ClearLinkShaping):
        if state.find_link(action.src, action.dst) is None:
            raise NotFoundError(f"unknown link {action.src!r} -> {action.dst!r}")
        target = link_key(action.src, action.dst)
        perts = [
            p for p in state.perturbations if p.kind in LINK_KINDS and p.target == target
        ]
        removed = _remove_perturbations(state, perts)
        return state, ActionOutcome(
            changed=removed > 0, stdout=f"link shaping cleared on {target}"
        )

    if isinstance(action, RemovePerturbation):
        matches = state.active(action.kind, action.target)
        removed = _remove_perturbations(state, matches)
        return state, ActionOutcome(
            changed=removed > 0,
            stdout=f"removed {removed} perturbation(s) {action.kind.value} on {action.target}",
        )

    if isinstance(action, Noop):
        return state, ActionOutcome(changed=False, stdout=action.note)

    raise InvalidArgumentError(f"unknown action {action!r}")


def _restart_pods(state: ClusterState, pods: list[PodState]) -> None:
    services = {p.service for p in pods}
    for pod in pods:
        spec = state.topology.service(pod.service)
        pod.phase = PodPhase.RUNNING
        pod.restarts += 1
        pod.cpu_pct = spec.baseline.cpu_pct
        pod.mem_pct = spec.baseline.mem_pct
        pod.io_await_ms = spec.baseline.io_await_ms
    doomed = [
        p
        for p in state.perturbations
        if p.kind in IN_POD_KINDS and p.target in services
    ]
    _remove_perturbations(state, doomed)


# --- digest -------------------------------------------------------------------


def state_doc(
    state: ClusterState, *, ignore_clock: bool = False, ignore_restarts: bool = False
) -> dict:
    """Canonical serializable view of the observable state."""
    doc = {
        "topology": state.topology.name,
        "seed": state.seed,
        "pods": [
            [
                p.pod_id,
                p.service,
                p.phase.value,
                p.cpu_pct,
                p.mem_pct,
                p.io_await_ms,
                None if ignore_restarts else p.restarts,
            ]
            for p in state.pods
        ],
        "links": [
            [l.src, l.dst, l.base_latency_ms, l.added_delay_ms, l.loss_pct]
            for l in state.links
        ],
        "config": sorted(
            [svc, key, value] for (svc, key), value in state.config_store.items()
        ),
        "perturbations": sorted(
            [p.handle, p.kind.value, p.target, p.magnitude, p.injected_at]
            for p in state.perturbations
        ),
        "processes": sorted(state.process_table),
    }
    if not ignore_clock:
        doc["clock_ms"] = state.clock_ms
    return doc


def digest(
    state: ClusterState, *, ignore_clock: bool = False, ignore_restarts: bool = False
) -> str:
    """Stable 64-bit hash (hex) of the canonical state serialization."""
    blob = json.dumps(
        state_doc(state, ignore_clock=ignore_clock, ignore_restarts=ignore_restarts),
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.blake2b(blob.encode("utf-8"), digest_size=8).hexdigest()


def in_band(value: float, center: float, band: float = RECOVERY_BAND) -> bool:
    return abs(value - center) <= band
