"""Desk-scale staged training on the tabular softmax policy.

Three stages, each with an analytic loss/gradient pair over the policy's
(context classes x actions) parameter table:

1. ``sft``  — imitation: mean negative log-likelihood of expert actions
   harvested from successful scripted-operator episodes.
2. ``sim_rft`` — group-relative policy gradient: rollouts are generated by
   running episodes in the simulator, graded with the composite reward, and
   grouped by failure instance; the loss is the advantage-weighted negative
   log-likelihood with the group mean reward as baseline (no ratio
   clipping).
3. ``real_rft`` — preference optimization against a frozen reference
   policy: pairs of (preferred corrective action, failed attempted action)
   are mined from rollouts and used in a pairwise logistic loss over
   log-probability differences from the reference.

The optimizer is plain fixed-rate gradient descent for auditability.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import cluster, faults
from .errors import DivergenceError, EmptyDatasetError, InvalidArgumentError, NotFoundError
from .faults import AuxContext, Scenario, build_aux
from .grading import RewardWeights, grade
from .loop import LoopConfig, run_episode
from .policies import (
    ExpertPolicy,
    HistoryItem,
    PolicyInput,
    ProbeRequest,
    TemplateLibrary,
    ToyPolicy,
    classify_context,
)
from .topology import Topology


@dataclass(frozen=True)
class SftExample:
    context_class: int
    trace_text: str  # teacher reasoning: stored, not modeled
    action: int


@dataclass(frozen=True)
class RolloutSample:
    context_class: int
    action: int
    reward: float


@dataclass(frozen=True)
class RolloutGroup:
    scenario_id: str
    members: tuple[RolloutSample, ...]


@dataclass(frozen=True)
class PrefPair:
    context_class: int
    preferred: int
    rejected: int


STAGES = ("sft", "sim_rft", "real_rft")


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    learning_rate: float = 1.0
    iterations: int = 200
    group_size: int = 8
    dpo_beta: float = 0.1
    seed: int = 0
    token_budget: int = 4096

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise InvalidArgumentError(f"stage must be one of {STAGES}")
        if self.learning_rate <= 0 or self.iterations <= 0:
            raise InvalidArgumentError("learning rate and iterations must be positive")
        if self.group_size < 2:
            raise InvalidArgumentError("group_size must be >= 2")
        if self.dpo_beta <= 0:
            raise InvalidArgumentError("dpo_beta must be > 0")


@dataclass
class TrainEnv:
    """Everything a training stage needs to generate rollouts."""

    topology: Topology
    scenarios: list[Scenario]
    library: TemplateLibrary
    loop_config: LoopConfig = field(default_factory=LoopConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)
    aux: AuxContext | None = None

    def __post_init__(self) -> None:
        if self.aux is None:
            self.aux = build_aux(self.topology)


# --- losses ------------------------------------------------------------------------


def sft_loss(policy: ToyPolicy, batch: Sequence[SftExample]) -> tuple[float, np.ndarray]:
    """Mean NLL of expert actions; gradient over the full parameter table."""
    if not batch:
        raise EmptyDatasetError("sft batch is empty")
    grad = np.zeros_like(policy.theta)
    loss = 0.0
    for ex in batch:
        loss -= policy.logprob(ex.context_class, ex.action)
        grad[ex.context_class] -= policy.grad_logprob(ex.context_class, ex.action)
    n = len(batch)
    return loss / n, grad / n


def grpo_loss(
    policy: ToyPolicy, groups: Sequence[RolloutGroup]
) -> tuple[float, np.ndarray]:
    """Advantage-weighted NLL with a per-group mean-reward baseline.

    loss = -sum_i log pi(a_i | f_i) * (R_i - mean_{j in group(i)} R_j)
    """
    grad = np.zeros_like(policy.theta)
    loss = 0.0
    for group in groups:
        if len(group.members) < 2:
            raise InvalidArgumentError(
                f"group {group.scenario_id!r} has {len(group.members)} member(s); need >= 2"
            )
        baseline = sum(m.reward for m in group.members) / len(group.members)
        for m in group.members:
            advantage = m.reward - baseline
            loss -= policy.logprob(m.context_class, m.action) * advantage
            grad[m.context_class] -= policy.grad_logprob(m.context_class, m.action) * advantage
    return loss, grad


def dpo_loss(
    policy: ToyPolicy,
    ref_policy: ToyPolicy,
    pairs: Sequence[PrefPair],
    beta: float,
) -> tuple[float, np.ndarray]:
    """Pairwise preference loss against a frozen reference policy.

    Per pair: -log sigmoid(beta * [delta(preferred) - delta(rejected)])
    where delta(a) = log pi(a|f) - log pi_ref(a|f). Gradient flows only
    through the trainable policy.
    """
    if not pairs:
        raise EmptyDatasetError("no preference pairs")
    grad = np.zeros_like(policy.theta)
    loss = 0.0
    for pair in pairs:
        f = pair.context_class
        delta_plus = policy.logprob(f, pair.preferred) - ref_policy.logprob(f, pair.preferred)
        delta_minus = policy.logprob(f, pair.rejected) - ref_policy.logprob(f, pair.rejected)
        z = beta * (delta_plus - delta_minus)
        loss += _softplus(-z)  # -log sigmoid(z)
        # d/dz of -log sigmoid(z) is sigmoid(z) - 1
        dz = _sigmoid(z) - 1.0
        grad[f] += dz * beta * (
            policy.grad_logprob(f, pair.preferred) - policy.grad_logprob(f, pair.rejected)
        )
    n = len(pairs)
    return loss / n, grad / n


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def _softplus(z: float) -> float:
    # log(1 + exp(z)), overflow-safe
    return float(np.logaddexp(0.0, z))


# --- rollouts and harvesting ----------------------------------------------------------


def rollout(
    env: TrainEnv,
    policy,
    scenario: Scenario,
    state_seed: int,
):
    """Inject a scenario into a fresh cluster and run one episode."""
    state = cluster.load_topology(env.topology, seed=state_seed)
    records = [faults.inject(state, spec) for spec in scenario.faults]
    for _ in range(env.loop_config.settle_steps):
        cluster.step(state, env.loop_config.step_ms)
    reports = [faults.make_report(r, env.aux) for r in records]
    report = faults.composite_report(reports)
    episode = run_episode(
        policy, state, records, env.loop_config, report, scenario_id=scenario.scenario_id
    )
    return episode, state


def state_seed_for(base_seed: int, scenario_id: str) -> int:
    return faults._stable_u32(f"{base_seed}:{scenario_id}")


def harvest_expert(env: TrainEnv, teacher, n: int, seed: int = 0) -> list[SftExample]:
    """Collect imitation tuples from successful teacher episodes.

    Each successful episode contributes one (context class, reasoning
    trace, action) example; failed episodes contribute nothing. Raises
    when the teacher never succeeds.
    """
    if n <= 0:
        raise InvalidArgumentError("n must be > 0")
    examples: list[SftExample] = []
    for i in range(n):
        scenario = env.scenarios[i % len(env.scenarios)]
        episode, _ = rollout(env, teacher, scenario, state_seed_for(seed, scenario.scenario_id))
        if not episode.success:
            continue
        final = episode.attempts[-1]
        ftype = scenario.faults[0].ftype
        action = env.library.expert_action(ftype)
        context_class = _context_class_for_episode(env, scenario, seed)
        trace_text = (
            f"report names {scenario.faults[0].target} with {ftype.value}; "
            f"applied template {action} and verified recovery"
        )
        examples.append(
            SftExample(context_class=context_class, trace_text=trace_text, action=action)
        )
    if not examples:
        raise EmptyDatasetError("teacher produced no successful episodes")
    return examples


def _context_class_for_episode(env: TrainEnv, scenario: Scenario, seed: int) -> int:
    """Context class as the toy policy would see it for this scenario."""
    probe_policy = ToyPolicy.uniform(env.library, env.topology, sample_seed=0)
    state = cluster.load_topology(env.topology, seed=state_seed_for(seed, scenario.scenario_id))
    records = [faults.inject(state, spec) for spec in scenario.faults]
    for _ in range(env.loop_config.settle_steps):
        cluster.step(state, env.loop_config.step_ms)
    reports = [faults.make_report(r, env.aux) for r in records]
    report = faults.composite_report(reports)
    inp = PolicyInput(report=report, context=env.aux, history=[])
    request = probe_policy.decide(inp)
    assert isinstance(request, ProbeRequest)
    for query in request.queries:
        try:
            result = cluster.observe(state, query)
            inp.history.append(HistoryItem("probe_result", result.text, dict(result.payload)))
        except NotFoundError:
            continue
    return classify_context(inp, env.topology)


def mine_preference_pairs(
    env: TrainEnv,
    policy: ToyPolicy,
    n_rollouts: int,
    seed: int = 0,
    temperature: float = 3.0,
) -> list[PrefPair]:
    """Simulate post-deployment escalation: failed attempts become pairs.

    Rollouts are sampled at an exploration temperature; whenever the policy
    fails a scenario, the scripted corrective action becomes the preferred
    side and the failed action the rejected side.
    """
    pairs: list[PrefPair] = []
    for i in range(n_rollouts):
        scenario = env.scenarios[i % len(env.scenarios)]
        sampler = policy.clone(sample_seed=seed * 100003 + i, temperature=temperature)
        episode, _ = rollout(env, sampler, scenario, state_seed_for(seed, scenario.scenario_id))
        if episode.success or not sampler.last_decisions:
            continue
        f, a_minus = sampler.last_decisions[-1]
        a_plus = env.library.expert_action(scenario.faults[0].ftype)
        if a_plus == a_minus:
            continue
        pairs.append(PrefPair(context_class=f, preferred=a_plus, rejected=a_minus))
    return pairs


# --- the training loop -----------------------------------------------------------------


@dataclass
class LearningCurve:
    stage: str
    points: list[dict] = field(default_factory=list)

    def add(self, iteration: int, loss: float, **extra) -> None:
        self.points.append({"iteration": iteration, "loss": loss, **extra})

    def to_csv(self) -> str:
        if not self.points:
            return "iteration,loss\n"
        keys = list(self.points[0])
        lines = [",".join(keys)]
        for p in self.points:
            lines.append(",".join(_fmt(p[k]) for k in keys))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _descend(
    policy: ToyPolicy,
    loss_fn: Callable[[ToyPolicy], tuple[float, np.ndarray]],
    config: TrainConfig,
    curve: LearningCurve,
    stop_below: float | None = None,
) -> ToyPolicy:
    for it in range(config.iterations):
        loss, gradient = loss_fn(policy)
        if not np.isfinite(loss) or not np.all(np.isfinite(gradient)):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        curve.add(it, loss)
        if stop_below is not None and loss < stop_below:
            break
        policy.theta -= config.learning_rate * gradient
    return policy


def train_stage(
    config: TrainConfig,
    env: TrainEnv,
    init_policy: ToyPolicy | None = None,
    sft_data: Sequence[SftExample] | None = None,
    pairs: Sequence[PrefPair] | None = None,
) -> tuple[ToyPolicy, LearningCurve]:
    """Run one training stage and return (trained policy, learning curve).

    * ``sft`` starts from a uniform (or given) policy and fits harvested
      expert data (harvested on the fly when not provided).
    * ``sim_rft`` starts from the given checkpoint and optimizes the
      group-relative objective on freshly generated, graded rollouts.
    * ``real_rft`` starts from the given checkpoint, freezes it as the
      reference, and optimizes the preference objective on mined (or
      provided) pairs.
    """
    config.validate()
    curve = LearningCurve(stage=config.stage)

    if config.stage == "sft":
        policy = init_policy or ToyPolicy.uniform(env.library, env.topology)
        data = list(sft_data) if sft_data is not None else harvest_expert(
            env, ExpertPolicy(env.library), n=len(env.scenarios), seed=config.seed
        )
        if not data:
            raise EmptyDatasetError("no SFT examples")
        return _descend(policy, lambda p: sft_loss(p, data), config, curve, stop_below=1e-3), curve

    if init_policy is None:
        raise InvalidArgumentError(f"{config.stage} requires an initial policy checkpoint")

    if config.stage == "sim_rft":
        policy = init_policy.clone()
        rng = np.random.default_rng(config.seed)
        for it in range(config.iterations):
            scenario = env.scenarios[int(rng.integers(len(env.scenarios)))]
            members = []
            for k in range(config.group_size):
                sampler = policy.clone(sample_seed=config.seed * 1000003 + it * 64 + k)
                episode, _ = rollout(
                    env, sampler, scenario, state_seed_for(config.seed, scenario.scenario_id)
                )
                reward = grade(episode, env.weights, token_budget=config.token_budget).total
                if not sampler.last_decisions:
                    continue
                f, a = sampler.last_decisions[-1]
                members.append(RolloutSample(context_class=f, action=a, reward=reward))
            if len(members) < 2:
                continue
            group = RolloutGroup(scenario_id=scenario.scenario_id, members=tuple(members))
            loss, gradient = grpo_loss(policy, [group])
            if not np.isfinite(loss) or not np.all(np.isfinite(gradient)):
                raise DivergenceError(f"non-finite loss at iteration {it}")
            mean_reward = sum(m.reward for m in members) / len(members)
            curve.add(it, loss, mean_reward=mean_reward)
            policy.theta -= config.learning_rate * gradient
        return policy, curve

    # real_rft
    policy = init_policy.clone()
    reference = init_policy.clone()  # frozen snapshot
    mined = list(pairs) if pairs is not None else mine_preference_pairs(
        env, policy, n_rollouts=max(4 * len(env.scenarios), 64), seed=config.seed
    )
    if not mined:
        raise EmptyDatasetError("no preference pairs mined")
    return (
        _descend(
            policy,
            lambda p: dpo_loss(p, reference, mined, config.dpo_beta),
            config,
            curve,
        ),
        curve,
    )


# --- persistence -------------------------------------------------------------------------


def save_checkpoint(path: str, policy: ToyPolicy, config: TrainConfig) -> None:
    doc = {
        "format": "toy-policy/v1",
        "stage": config.stage,
        "seed": config.seed,
        "config": {
            "learning_rate": config.learning_rate,
            "iterations": config.iterations,
            "group_size": config.group_size,
            "dpo_beta": config.dpo_beta,
            "token_budget": config.token_budget,
        },
        "theta": policy.theta.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str, library: TemplateLibrary, topology: Topology) -> ToyPolicy:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "toy-policy/v1":
        raise InvalidArgumentError(f"unknown checkpoint format in {path!r}")
    return ToyPolicy(np.asarray(doc["theta"], dtype=np.float64), library, topology)


def sft_examples_to_jsonl(examples: Sequence[SftExample]) -> str:
    lines = [
        json.dumps(
            {"context_class": e.context_class, "trace": e.trace_text, "action": e.action},
            sort_keys=True,
        )
        for e in examples
    ]
    return "\n".join(lines) + "\n"


def pref_pairs_to_jsonl(pairs: Sequence[PrefPair]) -> str:
    lines = [
        json.dumps(
            {"context_class": p.context_class, "preferred": p.preferred, "rejected": p.rejected},
            sort_keys=True,
        )
        for p in pairs
    ]
    return "\n".join(lines) + "\n"
