"""Full pipeline on the bimodal point-mass task: symbols, machine, residual policy, rollouts.

Takes about a minute on one core.
Run: python3 walkthroughs/multiphase_pipeline.py [K]
"""

import sys
import time

import numpy as np

from enap.config import multiphase2d_config
from enap.control import em_train, run_bc_episode, run_episode, train_bc
from enap.envs import MultiPhase2D, multiphase2d_demos
from enap.metrics import structural_metrics

K = int(sys.argv[1]) if len(sys.argv) > 1 else 1
cfg = multiphase2d_config(seed=0)
ds = multiphase2d_demos(200, seed=0)

t0 = time.perf_counter()
res = em_train(ds, None, K, cfg)
print(f"EM with K={K} took {time.perf_counter() - t0:.1f}s")
for it in res.iterations:
    print("  ", it)

b = res.bundle
print("\nsymbol centroids (x, y, cue1, cue2):")
print(np.round(b.codebook.centroids, 2))
print("\nmachine:")
for e in b.pmm.edges:
    print(f"  q{e.src} --c{e.input} (p={e.prob:.2f}, n={e.action_samples})--> q{e.dst}  a_base={np.round(e.action_mean, 2)}")

env = MultiPhase2D()
traces = [run_episode(env, b, env.max_steps, seed=10_000 + i) for i in range(50)]
policy, _ = train_bc(ds, cfg.hidden_sizes, cfg.residual_lr, cfg.residual_epochs, cfg.residual_batch)
bc = np.mean([run_bc_episode(MultiPhase2D(), policy, env.max_steps, seed=10_000 + i) for i in range(50)])

rep = structural_metrics(b.pmm, traces, res.structure.annotated, b.encoder, cfg.eps_err)
print(f"\nsuccess: machine policy {rep.sr:.2f}, behaviour cloning {bc:.2f}")
print(rep.to_json())
