"""Repair a single frozen layer for a few-shot target task.

We take the first shallow unit of a synthetic image source, put a fresh
connector in front of it, and train only the connector so the target
classes land next to their paired source anchors.  The layer's S-score
on the support set is printed before and after, along with the loss curve.
"""
import numpy as np

from xtransfer import bench, lws

sources, stream = bench.make_synthetic_benchmark(0)
task = stream.task(5, 0)
print(f"target task: {task.n_way}-way {task.k_shot}-shot, support {task.support_x.shape}")

ev = lws.RepairEvaluator(sources, task.support_x, task.support_y, seed=0)
model, depth = 0, 1
out = ev.repair((model, depth, ev.probe(model, depth)))

print(f"source {model} layer {depth}")
print(f"  anchor S-score (source classes)   {out.anchor_s:.3f}")
print(f"  target S-score before repair      {out.before_s:.3f}")
print(f"  target S-score after repair       {out.after_s:.3f}")
if out.channel_mask is not None:
    n_ch = ev.sources[model].lunits[depth].out_shape.channels
    print(f"  channels kept after removal       {len(out.channel_mask)}/{n_ch}")
print(f"  pairing (target -> source class)  { {t: s for s, t in out.pairing.pairs} }")

trace = np.asarray(out.loss_trace)
print(f"loss {trace[0]:.4f} -> best {out.best_loss:.4f} at episode {out.best_episode}")
for e in range(0, len(trace), max(1, len(trace) // 10)):
    print(f"  episode {e:4d}  {trace[e]:.4f}  " + "#" * int(40 * trace[e] / trace[0]))
