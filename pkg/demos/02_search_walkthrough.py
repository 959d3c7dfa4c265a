"""Watch the layer-wise search on a scripted problem.

The scripted evaluator stands in for real repairs, so the whole search
runs in milliseconds and every decision can be read off the trace.  We
run it twice, with and without the pre-search filter, to show how the
filter trims repairs while landing on about the same layers.
"""
from xtransfer.lws import SearchConfig, scripted_search

depths = [6, 6, 6, 6, 6]

for pre in (False, True):
    res, ev = scripted_search(depths, 1, SearchConfig(budget=1.0, pre_search=pre))
    print(f"\npre-search {'on' if pre else 'off'}: {ev.repair_calls} repairs, stopped: {res.stopped}")
    for rec in res.trace:
        if rec["decision"] == "stop":
            continue
        rng = f" range={rec['range']:.2f}" if pre else ""
        print(f"  pool {rec['pool']} n={rec['n']}{rng} "
              f"{rec['decision']:7s} ({rec['reason']})")
    for s in res.selected:
        print(f"  kept model {s.model} depth {s.depth} [{s.action}] S={s.outcome.after_s:.3f} res={s.res:.3f}")
    print(f"  budget used {res.state.spent:.3f} of {res.state.budget}")
