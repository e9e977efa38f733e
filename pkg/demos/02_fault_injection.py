"""
Fault injection and ground-truth verification
=============================================

Inject each of the seven failure types, render the diagnosis report a
policy would receive, and show that the targeted oracle is false right
after injection and true right after restore.
"""

from remlab import cluster, faults
from remlab.faults import FailureSpec, FailureType, build_aux
from remlab.topology import bundled_topology

topo = bundled_topology("simple-micro")
aux = build_aux(topo)

for ftype in FailureType:
    target = faults.candidate_targets(topo, ftype)[0]
    state = cluster.load_topology(topo, seed=3)
    record = faults.inject(state, FailureSpec(ftype, target))

    # settle so the fault becomes observable
    for _ in range(10):
        cluster.step(state, 1000)

    report = faults.make_report(record, aux)
    verdict_injected = faults.oracle_verify(state, record)
    faults.restore(state, record)
    verdict_restored = faults.oracle_verify(state, record)

    print(f"{ftype.value:20s} on {target:22s} "
          f"oracle after inject: {str(verdict_injected):5s} after restore: {verdict_restored}")
    print(f"    report: {report.description.splitlines()[0]}")

# Scenario suites: fixed sizes, deterministic for (topology, seed).
print()
for difficulty in ("easy", "medium", "hard"):
    suite = faults.gen_suite(topo, difficulty, seed=1)
    multi = sum(1 for s in suite if len(s.faults) > 1)
    print(f"{difficulty:7s} suite: {len(suite):2d} scenarios ({multi} multi-fault)")
sample = faults.gen_suite(topo, "hard", seed=1)[2]
print("sample hard scenario:", sample.scenario_id,
      [(f.ftype.value, f.target) for f in sample.faults])
