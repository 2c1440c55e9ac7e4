"""Closed-loop comparison: experience-guided planner against frontier baselines.

Builds a store from scripted walks over a family of five layouts, then runs
unseen scenes from the same layouts under each planner.  The trajrag planner
is run twice, once with the store and once without it, to isolate what the
retrieved experience contributes.

    python3 demos/ablation.py [--scenes 34] [--workers 4]
"""

import argparse
import time

from trajrag import sim as S

LAYOUTS = [0, 1, 2, 3, 4]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", type=int, default=34, help="unseen scene seeds per layout sweep")
    ap.add_argument("--goals", type=int, default=3, help="goals per scene")
    ap.add_argument("--workers", type=int, default=4)
    args = ap.parse_args()

    t0 = time.perf_counter()
    scenes = [S.generate_scene(100 + i, S.SceneParams(layout=l)) for i, l in enumerate(LAYOUTS * 2)]
    store, report = S.build_store(scenes, 6)
    print(f"store: {len(store.groups)} groups, {len(store.chunks)} chunks ({time.perf_counter() - t0:.1f}s)")

    specs = S.episode_specs(range(1000, 1000 + args.scenes), LAYOUTS, args.goals, S.SceneParams())
    runs = {
        "trajrag": (S.planner_factory("trajrag"), store),
        "trajrag (no store)": (S.planner_factory("trajrag"), None),
        "nearest": (S.planner_factory("nearest"), None),
        "random": (S.planner_factory("random"), None),
    }
    print(f"{len(specs)} episodes per planner\n")
    print(f"{'planner':<20}{'SR':>7}{'SPL':>7}")
    for name, (factory, kb) in runs.items():
        res = S.evaluate(specs, {name: factory}, kb, workers=args.workers)
        m = S.compute_metrics([r for _, r in res[name]])
        print(f"{name:<20}{m['SR']:>7.3f}{m['SPL']:>7.3f}")


if __name__ == "__main__":
    main()
