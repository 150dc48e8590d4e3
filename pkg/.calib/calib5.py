import numpy as np, time
from desksr.harness.manifest import ingest
from desksr.features import train_feature_net, CollapseError

print("== constant ==", flush=True)
man_c = ingest("/root/pkg/.calib/const", seed=0, variance_threshold=0.0)
try:
    _, hist = train_feature_net(man_c, steps=150, batch=8, lr=5e-4, seed=0, patch_count=64)
    print("NO FIRE; info:", [round(h["entropy"],3) for h in hist[::15]], flush=True)
except CollapseError as e:
    print("fired:", e, flush=True)

print("== healthy ==", flush=True)
man = ingest("/root/pkg/.calib/toy", seed=1)
t0=time.time()
try:
    _, hist = train_feature_net(man, steps=400, batch=16, lr=5e-4, seed=0)
    info = [h["entropy"] for h in hist]; loss=[h["loss"] for h in hist]
    print(f"ok t={time.time()-t0:.0f}s info[0,30,60,100,200,399]:", [round(info[i],3) for i in (0,30,60,100,200,399)], flush=True)
    print("loss avg first20", round(float(np.mean(loss[:20])),3), "last20", round(float(np.mean(loss[-20:])),3), flush=True)
except CollapseError as e:
    print("FALSE FIRE:", e, flush=True)
