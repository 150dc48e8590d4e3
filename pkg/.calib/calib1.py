import time, numpy as np, torch
from desksr.harness.toydata import generate_toy_dataset
from desksr.harness.manifest import ingest, extract_patches
from desksr.codec import train_codec, reconstruction_psnr, encode, decode
from desksr.features import train_feature_net, extract_tokens
from desksr.degradation import degrade, sample_recipe
from desksr.metrics import psnr, rgb_to_y
from desksr.resize import resize

t0=time.time()
root = "/root/pkg/.calib/toy"
generate_toy_dataset(root, count=90, seed=0, size=96)
man = ingest(root, seed=1)
print("images", len(man.entries), "train", len(man.files("train")), "val", len(man.files("val")), "test", len(man.files("test")), flush=True)

codec, hist = train_codec(man, steps=500, batch=8, lr=1e-3, seed=0, patch_count=2000)
l1 = [h["l1"] for h in hist]
ref = float(np.mean(l1[:10])); fin = float(np.mean(l1[-10:]))
print(f"codec: t={time.time()-t0:.0f}s ref_l1={ref:.4f} final_l1={fin:.4f} drop={(1-fin/ref)*100:.1f}%", flush=True)

val = [p for p,_ in extract_patches(man, 64, 0, np.random.default_rng(0), split="val")]
print("codec recon PSNR (val):", round(reconstruction_psnr(codec, val), 2), flush=True)

# bicubic baseline PSNR on degraded val patches
bic = []
for i, p in enumerate(val):
    lr = degrade(p, sample_recipe(1234+i))
    up = resize(lr, 4.0, "bicubic")
    bic.append(psnr(rgb_to_y(up)[4:-4,4:-4], rgb_to_y(p)[4:-4,4:-4]))
print("bicubic-on-degraded PSNR:", round(float(np.mean(bic)),2), flush=True)
# codec-filtered bicubic
cfb = [psnr(rgb_to_y(decode(encode(resize(degrade(p, sample_recipe(1234+i)),4.0,'bicubic'),codec).mean,codec))[4:-4,4:-4], rgb_to_y(p)[4:-4,4:-4]) for i,p in enumerate(val)]
print("codec-filtered bicubic PSNR:", round(float(np.mean(cfb)),2), flush=True)

t1=time.time()
net, fh = train_feature_net(man, steps=1000, batch=16, lr=5e-4, seed=0)
loss = [h["loss"] for h in fh]
ref = float(np.mean(loss[:20])); fin = float(np.mean(loss[-20:]))
print(f"featnet: t={time.time()-t1:.0f}s ref={ref:.4f} final={fin:.4f} drop={(1-fin/ref)*100:.1f}% entropy_last={fh[-1]['entropy']:.3f}", flush=True)

# robustness: HR vs degraded-LR cosine margin
def gcos(a, b):
    ga = extract_tokens(a, net).tokens[0]; gb = extract_tokens(b, net).tokens[0]
    return float(np.dot(ga, gb) / (np.linalg.norm(ga)*np.linalg.norm(gb)))
pairs, unrel = [], []
for i, p in enumerate(val[:20]):
    lr = degrade(p, sample_recipe(99+i))
    pairs.append(gcos(p, resize(lr, 4.0, "bicubic")))
    unrel.append(gcos(p, val[(i+7) % len(val)]))
print("cos(HR,LRdeg) =", round(float(np.mean(pairs)),3), " cos(unrel) =", round(float(np.mean(unrel)),3), " margin =", round(float(np.mean(pairs)-np.mean(unrel)),3), flush=True)
torch.save({}, "/root/pkg/.calib/done1")
