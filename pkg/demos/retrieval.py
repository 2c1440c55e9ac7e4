"""Build a small store and show coarse-to-fine retrieval for a held-out walk."""

import numpy as np

from trajrag import sim as S
from trajrag import store as ST

scenes = [S.generate_scene(s, S.SceneParams(layout=s % 3)) for s in range(6)]
store, report = S.build_store(scenes, 4)
print(f"{len(store.groups)} groups, {len(store.chunks)} chunks")

scene = S.generate_scene(50, S.SceneParams(layout=1))
goal = scene.present_categories()[0]
rng = np.random.default_rng(0)
walk = S.scripted_walk(scene, S.sample_start(scene, rng), goal)
query = walk.trajectory
print(f"query: {len(query.nodes)} nodes, goal {scene.categories[goal]}, layout 1")

coarse, fine = ST.retrieve(store, query, 3, 3)
print("\ncoarse (summary graphs)")
for h in coarse:
    tags = sorted({store.chunks[c].trajectory.source_tag for c in store.groups[h.group_id].members})
    print(f"  group {h.group_id:>3}  score {h.score:.3f}  {tags[0]} ...")
print("fine (chunks)")
for f, via in fine:
    print(f"  chunk {f.chunk_id:>3}  cosine {f.score:.3f}  group {via.group_id:>3}  {store.chunks[f.chunk_id].trajectory.source_tag}")
