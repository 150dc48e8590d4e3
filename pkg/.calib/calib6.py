import numpy as np, time
from desksr.harness.manifest import ingest
import desksr.features as F

man = ingest("/root/pkg/.calib/toy", seed=1)
for temp in (0.04, 0.02):
    cfg = F.FeatureNetConfig(temp_teacher=temp)
    t0=time.time()
    _, hist = F.train_feature_net(man, config=cfg, steps=600, batch=16, lr=5e-4,
                                  seed=0, patch_count=1500, collapse_check_after=10**9)
    info=[h["entropy"] for h in hist]; loss=[h["loss"] for h in hist]
    print(f"temp={temp} t={time.time()-t0:.0f}s info@[0,60,150,300,450,599]:",
          [round(info[i],3) for i in (0,60,150,300,450,599)],
          "| loss first20/last20:", round(float(np.mean(loss[:20])),3),
          round(float(np.mean(loss[-20:])),3), flush=True)
