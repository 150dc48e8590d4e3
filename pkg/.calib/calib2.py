import time, numpy as np, torch
from desksr.harness.manifest import ingest, extract_patches
from desksr.harness.toydata import generate_toy_dataset
from desksr.features import train_feature_net, FeatureNetConfig, CollapseError
from desksr.imgio import save_image

# --- collapse guard separation: healthy vs constant ------------------------
root_c = "/root/pkg/.calib/const"
for i in range(12):
    save_image(f"{root_c}/a/{i:03d}.png", np.full((96,96,3), 0.5, np.float32))
man_c = ingest(root_c, seed=0, variance_threshold=0.0)

print("== constant data ==", flush=True)
try:
    net, hist = train_feature_net(man_c, steps=200, batch=8, lr=5e-4, seed=0, patch_count=64)
    es = [h["entropy"] for h in hist]
    print("NO collapse fired; entropy head/tail:", [round(e,2) for e in es[:8]], [round(e,2) for e in es[-8:]], flush=True)
except CollapseError as e:
    print("collapse fired:", e, flush=True)

print("== healthy data ==", flush=True)
man = ingest("/root/pkg/.calib/toy", seed=1)
try:
    t0=time.time()
    net, hist = train_feature_net(man, steps=300, batch=16, lr=5e-4, seed=0)
    es = [h["entropy"] for h in hist]; ls=[h["loss"] for h in hist]
    print(f"ok t={time.time()-t0:.0f}s entropies:", [round(e,2) for e in es[:8]], "...", [round(e,2) for e in es[-4:]], flush=True)
    print("loss first20 avg", round(float(np.mean(ls[:20])),3), "last20 avg", round(float(np.mean(ls[-20:])),3), flush=True)
except CollapseError as e:
    print("FALSE collapse:", e, flush=True)
