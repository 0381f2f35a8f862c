"""Rasterize a disc/cup pair, measure it, and push a fundus-like image through preprocessing."""
import numpy as np

from gonscreen import biometrics, gate, imaging, synthbench

mask = biometrics.ellipse_mask((200, 240), center=(100, 120), disc_axes=(60, 55), cup_axes=(33, 30))
bio = biometrics.measure(mask)
print(f"drawn cup/disc axis ratio 0.55 -> measured vCDR {bio.vcdr:.3f}, RDR {bio.rdr:.3f}")
print("CDR score", biometrics.baseline_score(bio, "CDR"), " RDR score", round(biometrics.baseline_score(bio, "RDR"), 3))

spec = synthbench.DomainSpec("demo", n_images=4, resolution=(400, 300), blur_frac=0.25)
corpus = synthbench.generate_domain(spec, seed=2)
for i, s in enumerate(corpus.samples):
    img = corpus.image(i)
    pre = imaging.preprocess(img)
    print(f"{s.image_id}: raw {img.shape} -> model input {pre.shape}, "
          f"mean {pre.mean():+.2f}, quality grade {gate.score_quality(img)}, blurred={s.blurred}")

aug = imaging.AugmentPolicy()
views = [imaging.preprocess(corpus.image(0), aug, seed=k) for k in range(3)]
print("augmented views differ:", not np.allclose(views[0], views[1]))
