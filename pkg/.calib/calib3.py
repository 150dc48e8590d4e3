import time, numpy as np, torch
from desksr.harness.manifest import ingest, extract_patches
from desksr.codec import train_codec, reconstruction_psnr, encode, decode
from desksr.degradation import degrade, sample_recipe
from desksr.metrics import psnr, rgb_to_y
from desksr.resize import resize

man = ingest("/root/pkg/.calib/toy", seed=1)
val = [p for p,_ in extract_patches(man, 64, 0, np.random.default_rng(0), split="val")]
for steps in (2500,):
    t0=time.time()
    codec, hist = train_codec(man, steps=steps, batch=8, lr=1.5e-3, seed=0, patch_count=2000)
    l1 = [h["l1"] for h in hist]
    print(f"steps={steps} t={time.time()-t0:.0f}s l1@10={np.mean(l1[:10]):.4f} l1@500={np.mean(l1[490:500]):.4f} l1_final={np.mean(l1[-10:]):.4f}", flush=True)
    print("  recon PSNR:", round(reconstruction_psnr(codec, val), 2), flush=True)
    cfb = [psnr(rgb_to_y(decode(encode(resize(degrade(p, sample_recipe(1234+i)),4.0,'bicubic'),codec).mean,codec))[4:-4,4:-4], rgb_to_y(p)[4:-4,4:-4]) for i,p in enumerate(val)]
    print("  codec-filtered bicubic PSNR:", round(float(np.mean(cfb)),2), flush=True)
    import desksr.harness.checkpoint as ck
    from desksr.codec import save_codec
    save_codec(codec, "/root/pkg/.calib/codec2500.ckpt")
