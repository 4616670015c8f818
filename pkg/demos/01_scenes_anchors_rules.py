"""Walk through the data side: synthetic scenes, the anchor vocabulary, and rule labels.

Run with ``python3 demos/01_scenes_anchors_rules.py`` (a few seconds).
"""
import numpy as np

from rulegp import anchors as anc
from rulegp import rules as rl
from rulegp.scene import PROFILES, generate_dataset

# Two regions that differ in road shape and driving side. The same seed gives
# the same scenes on every machine.
data = {name: generate_dataset(profile, 300, seed=7) for name, profile in PROFILES.items()}
for name, ds in data.items():
    s = ds[0]
    print(f"{name}: {len(ds)} samples, feature dim {ds.d}, "
          f"first scene has {len(s.scene.drivable)} drivable polygons, "
          f"{len(s.scene.stop_zones)} stop zones, {len(s.scene.crossings)} crossings")

# Futures are 12 ego-frame waypoints. A greedy epsilon-cover turns them into a
# finite set of anchor trajectories, and each future is labelled by its nearest anchor.
pool = np.concatenate([ds.futures() for ds in data.values()])
anchor_set = anc.build_cover_set(pool, epsilon=10.0)
labels = anc.assign_labels(pool, anchor_set)
print(f"\n{anchor_set.K} anchors cover {len(pool)} futures at 10 m; "
      f"the most used anchor labels {np.bincount(labels).max()} of them")

# Rules are small formulas over scene elements. They parse from text and print back.
expr = rl.parse_rule("within_drivable and no_cross(traffic_light, signal_red)")
print(f"\nparsed rule: {rl.to_text(expr)}")
try:
    rl.parse_rule("within_drivable and")
except rl.RuleSyntaxError as exc:
    print(f"syntax errors point at the offending byte: {exc}")

# Labelling checks every anchor against every scene. A 1 means the anchor,
# placed at the ego pose, obeys the rule in that scene. These matrices are the
# targets of the rule-training stage; no ground-truth future is needed.
for name, ds in data.items():
    mats = rl.label_dataset(rl.default_rules(), ds, anchor_set)
    rates = ", ".join(f"{m.rule_id} {m.entries.mean():.2f}" for m in mats)
    print(f"{name} compliance: {rates}")
