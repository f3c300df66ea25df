"""Mine a machine from the two FrozenLake demonstrations with exact history embeddings.

Shows a membership query at the decision cell, the closed prefix set, the
mined machine and its DOT export.
Run: python3 walkthroughs/frozenlake_mining.py [out.dot]
"""

import sys

import numpy as np

from enap.core import nd_trace, pmm_to_dot
from enap.envs import ACTIONS, gridworld_demos
from enap.history import exact_history_encoder
from enap.mining import MineConfig, build_db, generalized_mq, mine

ds = gridworld_demos()
enc = exact_history_encoder(16, 4)

# history c0 -D-> c4 -D-> c8 -R-> c9: what happens next?
db = build_db(ds, enc)
for ans in generalized_mq(db, db.prefixes[0][3], tau_sim=0.9):
    print(f"MQ at c9: {ans.provenance} action {ACTIONS[int(np.argmax(ans.action))]} on c{ans.symbol}")

res = mine(ds, enc, MineConfig(tau_sim=0.9, eps_err=0.1))
print(f"\n{len(res.rounds)} EQ round(s), |U| = {len(res.prefix_set)}, {res.pmm.n_states} states")
for e in res.pmm.edges:
    act = ACTIONS[int(np.argmax(e.action_mean))] if e.action_mean.max() == 1 else np.round(e.action_mean, 2)
    print(f"  q{e.src} --c{e.input} / {act} (p={e.prob:.2f})--> q{e.dst}")
for t in ds:
    print(f"{t.traj_id}: path {nd_trace(res.pmm, t.symbols, t.actions, 0.1).path}")

if len(sys.argv) > 1:
    with open(sys.argv[1], "w") as fh:
        fh.write(pmm_to_dot(res.pmm, "frozenlake"))
    print(f"wrote {sys.argv[1]}")
