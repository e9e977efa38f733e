"""
The bounded remediation loop
============================

Probe, generate, execute, verify, reflect: run one episode with the
scripted expert (one attempt, success) and one with a noop policy
(exhausts the retry budget, fails), then peek at the reflection items a
failing attempt leaves behind.
"""

from remlab import cluster, faults
from remlab.faults import FailureSpec, FailureType, build_aux
from remlab.grading import grade
from remlab.loop import LoopConfig, run_episode
from remlab.policies import ExpertPolicy, NoopPolicy, ToyPolicy, build_default_library
from remlab.topology import bundled_topology

topo = bundled_topology("simple-micro")
library = build_default_library(topo)
aux = build_aux(topo)


def fresh_episode_inputs(spec, seed=5):
    state = cluster.load_topology(topo, seed=seed)
    record = faults.inject(state, spec)
    for _ in range(10):
        cluster.step(state, 1000)
    report = faults.make_report(record, aux)
    return state, [record], report


config = LoopConfig(t_max=1, probe_budget=5, settle_steps=10, verification_mode="oracle")

spec = FailureSpec(FailureType.IO_SATURATION, "datastore")
state, records, report = fresh_episode_inputs(spec)
episode = run_episode(ExpertPolicy(library), state, records, config, report, "demo-expert")
print(f"expert:  success={episode.success} attempts={len(episode.attempts)} "
      f"probes={episode.attempts[0].probes_used} sim_latency={episode.sim_latency_ms}ms")
print(f"         reward breakdown: {grade(episode)}")

state, records, report = fresh_episode_inputs(spec)
episode = run_episode(NoopPolicy(), state, records, config, report, "demo-noop")
print(f"noop:    success={episode.success} attempts={len(episode.attempts)} "
      f"(budget law: attempts <= t_max + 1 = {config.t_max + 1})")

# A uniform toy policy usually picks a wrong template first; reflection
# feeds what happened back into the next attempt's input.
state, records, report = fresh_episode_inputs(spec, seed=8)
toy = ToyPolicy.uniform(library, topo, sample_seed=2)
episode = run_episode(toy, state, records, config, report, "demo-toy")
print(f"toy:     success={episode.success} attempts={len(episode.attempts)}")
for attempt in episode.attempts:
    first_line = attempt.playbook_text.splitlines()[0] if attempt.playbook_text else "(empty)"
    print(f"  attempt {attempt.index}: verdict={attempt.verdict} playbook: {first_line}")
