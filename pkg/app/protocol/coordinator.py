"""
Coordinator role: select K clients, request their local quantities,
recombine the permuted statistics and decide.

The run is a small LangGraph state graph:

    START -> select -> collect -> aggregate -> END
                              \-> abort -----> END

A run either reaches a Verdict computed from all K clients or aborts with
an AbortReport; it never decides on a partial client set.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Literal, Optional, TypedDict

from langgraph.graph import END, START, StateGraph
from pydantic import BaseModel, Field

from app.errors import InputError, ITDError, MalformedRequestError, PhaseError, RunAbortedError
from app.protocol.channels import DEFAULT_TIMEOUT
from app.protocol.messages import (
    ComputeRequest,
    LocalResult,
    PermutedBatchMsg,
    SelectClients,
    Verdict,
)
from app.protocol.registry import check_unique
from app.services.kernel_distance import aggregate_statistic, client_weights, equal_weights
from app.services.permtest import PermutationBatch, RunConfig, client_seed, global_decision
from app.services.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)


class Phase(str, Enum):
    SELECTING = "selecting"
    COLLECTING = "collecting"
    AGGREGATING = "aggregating"
    DONE = "done"
    ABORTED = "aborted"


_NEXT = {
    Phase.SELECTING: {Phase.COLLECTING, Phase.ABORTED},
    Phase.COLLECTING: {Phase.AGGREGATING, Phase.ABORTED},
    Phase.AGGREGATING: {Phase.DONE, Phase.ABORTED},
    Phase.DONE: set(),
    Phase.ABORTED: set(),
}


class CoordinatorConfig(BaseModel):
    K: int = Field(ge=1, description="Number of clients to select from the registry.")
    alpha: float = Field(default=0.05, gt=0, lt=1)
    B_k: int = Field(default=100, ge=1, description="Permuted statistics requested from each client.")
    B: int = Field(default=1000, ge=1, description="Permuted ITD values drawn at the coordinator.")
    seed: int = 0
    p: float = 2.0
    solver: Literal["exact", "sinkhorn"] = "exact"
    epsilon: float = Field(default=0.05, gt=0)
    weighting: Literal["size", "equal"] = "size"
    timeout: float = Field(default=DEFAULT_TIMEOUT, gt=0)
    run_id: Optional[str] = None

    def resolved_run_id(self):
        return self.run_id or f"run-{derive_seed(self.seed, 'run'):016x}"


@dataclass
class ClientSlot:
    advert: Any
    local_result: Optional[LocalResult] = None
    batch: Optional[PermutedBatchMsg] = None
    error: Optional[str] = None

    @property
    def complete(self):
        return self.local_result is not None and self.batch is not None and self.error is None


@dataclass
class CoordinatorState:
    config: CoordinatorConfig
    run_id: str
    phase: Phase = Phase.SELECTING
    slots: dict = field(default_factory=dict)
    weights: list = field(default_factory=list)
    report: Any = None

    def advance(self, phase):
        if phase not in _NEXT[self.phase]:
            raise PhaseError(f"Illegal transition {self.phase.value} -> {phase.value}")
        if phase == Phase.AGGREGATING:
            missing = [cid for cid, slot in self.slots.items() if not slot.complete]
            if missing or len(self.slots) != self.config.K:
                raise PhaseError(f"Cannot aggregate, missing results from {missing}")
        logger.info("Run %s: %s -> %s", self.run_id, self.phase.value, phase.value)
        self.phase = phase


class AbortReport(BaseModel):
    run_id: str
    phase: str
    selected: list[str]
    completed: list[str]
    failures: dict[str, str]


class _GraphState(TypedDict):
    state: CoordinatorState
    transport: Any
    registry: list


def _select(graph_state):
    state, registry = graph_state["state"], graph_state["registry"]
    cfg = state.config
    rng = make_rng(derive_seed(cfg.seed, "select"))
    picks = sorted(int(i) for i in rng.choice(len(registry), size=cfg.K, replace=False))
    chosen = [registry[i] for i in picks]
    if cfg.weighting == "equal":
        weights = equal_weights(cfg.K)
    else:
        weights = client_weights([a.m for a in chosen], [a.n for a in chosen])
    state.weights = weights.tolist()
    state.slots = {a.client_id: ClientSlot(a) for a in chosen}
    graph_state["transport"].publish(SelectClients(
        run_id=state.run_id, client_ids=list(state.slots), weights=state.weights))
    state.advance(Phase.COLLECTING)
    return {"state": state}


def _gather(transport, state, slot):
    cid = slot.advert.client_id
    cfg = state.config
    try:
        local = transport.recv(cid, cfg.timeout)
        batch = transport.recv(cid, cfg.timeout)
        if not isinstance(local, LocalResult) or not isinstance(batch, PermutedBatchMsg):
            raise MalformedRequestError(f"Unexpected replies '{local.tag}', '{batch.tag}'")
        for msg in (local, batch):
            if msg.client_id != cid or msg.run_id != state.run_id:
                raise MalformedRequestError(f"Reply for {msg.client_id}/{msg.run_id} on channel {cid}")
        if len(batch.stats) != cfg.B_k:
            raise MalformedRequestError(f"Expected {cfg.B_k} permuted statistics, got {len(batch.stats)}")
        slot.local_result, slot.batch = local, batch
    except ITDError as e:
        slot.error = f"{type(e).__name__}: {e}"
        logger.error("Run %s: client %s failed: %s", state.run_id, cid, slot.error)


def _collect(graph_state):
    state, transport = graph_state["state"], graph_state["transport"]
    cfg = state.config
    for cid, slot in state.slots.items():
        request = ComputeRequest(run_id=state.run_id, client_id=cid, p=cfg.p, B_k=cfg.B_k,
                                 seed=client_seed(cfg.seed, cid), solver=cfg.solver, epsilon=cfg.epsilon)
        try:
            transport.send(cid, request)
        except ITDError as e:
            slot.error = f"{type(e).__name__}: {e}"
            logger.error("Run %s: cannot reach client %s: %s", state.run_id, cid, e)
    pending = [slot for slot in state.slots.values() if slot.error is None]
    if pending:
        with ThreadPoolExecutor(max_workers=len(pending)) as pool:
            list(pool.map(lambda slot: _gather(transport, state, slot), pending))
    return {"state": state}


def _route(graph_state):
    state = graph_state["state"]
    return "aggregate" if all(slot.complete for slot in state.slots.values()) else "abort"


def _aggregate(graph_state):
    state, transport = graph_state["state"], graph_state["transport"]
    state.advance(Phase.AGGREGATING)
    cfg = state.config
    slots = list(state.slots.values())
    ids = [slot.advert.client_id for slot in slots]
    observed = aggregate_statistic(ids, [slot.local_result.w2_squared for slot in slots], state.weights, cfg.p)
    batches = [PermutationBatch(client_id=cid, stats=slot.batch.stats, seed=client_seed(cfg.seed, cid))
               for cid, slot in zip(ids, slots)]
    run_config = RunConfig(K=cfg.K, m=[s.advert.m for s in slots], n=[s.advert.n for s in slots],
                           B_k=cfg.B_k, B=cfg.B, seed=cfg.seed, order=cfg.p, solver=cfg.solver)
    state.report = global_decision(observed, batches, state.weights, cfg.alpha, cfg.B, cfg.seed,
                                   config=run_config)
    transport.publish(Verdict(run_id=state.run_id, report=state.report))
    state.advance(Phase.DONE)
    return {"state": state}


def _abort(graph_state):
    state = graph_state["state"]
    state.report = AbortReport(
        run_id=state.run_id,
        phase=state.phase.value,
        selected=list(state.slots),
        completed=[cid for cid, slot in state.slots.items() if slot.complete],
        failures={cid: slot.error or "incomplete" for cid, slot in state.slots.items() if not slot.complete},
    )
    state.advance(Phase.ABORTED)
    return {"state": state}


def build_coordinator_graph():
    graph = StateGraph(_GraphState)
    graph.add_node("select", _select)
    graph.add_node("collect", _collect)
    graph.add_node("aggregate", _aggregate)
    graph.add_node("abort", _abort)
    graph.add_edge(START, "select")
    graph.add_edge("select", "collect")
    graph.add_conditional_edges("collect", _route, {"aggregate": "aggregate", "abort": "abort"})
    graph.add_edge("aggregate", END)
    graph.add_edge("abort", END)
    return graph.compile()


_GRAPH = None


def _graph():
    global _GRAPH
    if _GRAPH is None:
        _GRAPH = build_coordinator_graph()
    return _GRAPH


def coordinator_run(config, transport, registry):
    """
    One distributed test over `transport`. `registry` lists the reachable
    clients (ClientAdverts); K of them are chosen with the "select" stream of
    the seed and kept in registry order. Returns the TestReport, or raises
    RunAbortedError whose `.report` is an AbortReport.
    """
    registry = check_unique(list(registry))
    if config.K > len(registry):
        raise InputError(f"K={config.K} exceeds the {len(registry)} registered clients")
    state = CoordinatorState(config=config, run_id=config.resolved_run_id())
    logger.info("Run %s: K=%d of %d clients, B_k=%d, B=%d", state.run_id, config.K, len(registry),
                config.B_k, config.B)
    result = _graph().invoke({"state": state, "transport": transport, "registry": registry})
    state = result["state"]
    if state.phase != Phase.DONE:
        raise RunAbortedError(f"Run {state.run_id} aborted: {state.report.failures}", report=state.report)
    return state.report
