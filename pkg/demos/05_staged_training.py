"""
Staged training on the toy policy
=================================

Start from a uniform tabular softmax policy over eight remediation
templates, then run the three stages back to back:

1. imitation on data harvested from successful expert episodes,
2. group-relative policy gradient on graded simulator rollouts,
3. preference optimization on mined (corrective, failed) action pairs.
"""

import numpy as np

from remlab import faults, training
from remlab.policies import ExpertPolicy, ToyPolicy, build_default_library
from remlab.topology import bundled_topology
from remlab.training import TrainConfig, TrainEnv, train_stage

topo = bundled_topology("simple-micro")
library = build_default_library(topo)
scenarios = [s for s in faults.gen_suite(topo, "easy", 1) if len(s.faults) == 1]
env = TrainEnv(topology=topo, scenarios=scenarios, library=library)


def measure_ra(policy, seed=17):
    wins = 0
    for i, scenario in enumerate(scenarios):
        sampler = policy.clone(sample_seed=seed * 1000 + i)
        episode, _ = training.rollout(
            env, sampler, scenario, training.state_seed_for(seed, scenario.scenario_id)
        )
        wins += episode.success
    return wins / len(scenarios)


uniform = ToyPolicy.uniform(library, topo)
print(f"uniform policy:      RA = {measure_ra(uniform):.3f} over {len(scenarios)} scenarios")

# Stage 1: supervised imitation of the scripted expert.
data = training.harvest_expert(env, ExpertPolicy(library), n=len(scenarios), seed=5)
print(f"harvested {len(data)} imitation examples from successful expert episodes")
sft_policy, sft_curve = train_stage(
    TrainConfig(stage="sft", learning_rate=2.0, iterations=200, seed=5), env, sft_data=data
)
print(f"after SFT:           RA = {measure_ra(sft_policy):.3f} "
      f"(final NLL {sft_curve.points[-1]['loss']:.4f})")

# Stage 2: reward-driven refinement with a per-group mean baseline.
trained, grpo_curve = train_stage(
    TrainConfig(stage="sim_rft", learning_rate=0.5, iterations=150, group_size=8, seed=5),
    env,
    init_policy=sft_policy,
)
rewards = [p["mean_reward"] for p in grpo_curve.points]
print(f"after GRPO:          RA = {measure_ra(trained):.3f} "
      f"(group mean reward {rewards[0]:.2f} -> {rewards[-1]:.2f})")

# Stage 3: preference alignment against the frozen stage-2 reference.
pairs = training.mine_preference_pairs(env, trained, n_rollouts=200, seed=9)
train_pairs, held = pairs[::2], pairs[1::2]
print(f"mined {len(pairs)} preference pairs from simulated escalations")


def margin(policy):
    return float(np.mean([
        policy.logprob(p.context_class, p.preferred) - policy.logprob(p.context_class, p.rejected)
        for p in held
    ]))


before = margin(trained)
tuned, _ = train_stage(
    TrainConfig(stage="real_rft", learning_rate=5.0, iterations=100, dpo_beta=0.1, seed=9),
    env,
    init_policy=trained,
    pairs=train_pairs,
)
print(f"after DPO:           held-out margin {before:.3f} -> {margin(tuned):.3f}")
print(f"final policy:        RA = {measure_ra(tuned):.3f}")
