"""Train the signalling game with a learned graph and with no graph, then compare.

    python demos/coordination_demo.py [episodes]

Prints greedy evaluation returns and the learned edge probabilities for
each value of the hidden bit.
"""
import sys

import numpy as np

from acgm.config import parse_config
from acgm.trainer import evaluate, train

episodes = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
base = f"env.name = coordgame\ntrain.episodes = {episodes}\ntrain.eval_every = 0\nrun.seed = 0\n"

for mode in ("learned", "empty"):
    model = train(parse_config(base + f"generator.mode = {mode}\n")).model
    s = evaluate(model, 500, seed=1)
    print(f"{mode:>7} graph: mean return {s.mean_return:.3f}, mean edges {s.edges_mean:.2f}")
    if mode == "learned":
        for bit in (0, 1):
            obs = np.zeros((2, 2))
            obs[0, bit] = 1.0
            W = model.generator.weights(obs, np.array([-1, -1]))
            print(f"         bit {bit}: P(0 -> 1) = {W[0, 1]:.3f}, P(1 -> 0) = {W[1, 0]:.3f}")
