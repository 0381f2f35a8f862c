"""Single- vs multi-source training on a small synthetic benchmark.

Uses 30% of the default benchmark size; featurizing takes a minute or two.
"""
import logging

from gonscreen import learner, pipeline, registry, statlab, synthbench
from gonscreen.learner import TrainConfig

logging.getLogger("gonscreen").setLevel(logging.ERROR)  # small strata merge warnings

corpora = synthbench.generate_benchmark(7, seed=0, scale=0.3)
reg, img_f, bio_f = pipeline.prepare_corpora(corpora)
store = pipeline.feature_store(img_f, bio_f)
print("flow:", {k: v for k, v in reg.flow_report().items() if k != "excluded"})

registry.split_domain(reg, synthbench.ANCHOR_ID, seed=0)
cfg = TrainConfig(seed=0)
ssd = learner.train_ssd(reg, synthbench.ANCHOR_ID, cfg, store)
print(f"SSD on {synthbench.ANCHOR_ID}: best epoch {ssd.best_epoch}, val AUC {ssd.best_val_auc:.3f}")

for target in ("D2", "D5", "D6"):
    msd = learner.train_msd(reg, target, cfg, store)
    ids = msd.target_ids
    y = reg.labels(ids)
    a_ssd = statlab.auc(learner.predict_store(ssd.model, ids, store), y)
    a_msd = statlab.auc(learner.predict_store(msd.model, ids, store), y)
    print(f"{target}: SSD {a_ssd:.3f}  MSD {a_msd:.3f}  (MSD trained on {sorted(msd.domain_histogram)})")
