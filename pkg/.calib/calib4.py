import time, numpy as np, torch
from desksr.harness.toydata import generate_toy_dataset
from desksr.harness.manifest import ingest, extract_patches
from desksr.codec import train_codec, reconstruction_psnr, encode, decode, save_codec
from desksr.degradation import degrade, sample_recipe
from desksr.metrics import psnr, rgb_to_y
from desksr.resize import resize

root = "/root/pkg/.calib/toy_aa"
generate_toy_dataset(root, count=90, seed=0, size=96)
man = ingest(root, seed=1)
print("entries", len(man.entries), "rejected", man.rejected, flush=True)
val = [p for p,_ in extract_patches(man, 64, 0, np.random.default_rng(0), split="val")]

bic = [psnr(rgb_to_y(resize(degrade(p, sample_recipe(1234+i)), 4.0, "bicubic"))[4:-4,4:-4], rgb_to_y(p)[4:-4,4:-4]) for i,p in enumerate(val)]
print("bicubic-on-degraded bar:", round(float(np.mean(bic)),2), flush=True)

t0=time.time()
codec, hist = train_codec(man, steps=4000, batch=8, lr=2e-3, seed=0, patch_count=2000)
l1=[h["l1"] for h in hist]
print(f"codec4000 t={time.time()-t0:.0f}s l1@10={np.mean(l1[:10]):.4f} l1@500={np.mean(l1[490:500]):.4f} final={np.mean(l1[-10:]):.4f}", flush=True)
print("recon PSNR:", round(reconstruction_psnr(codec, val),2), flush=True)
cfb = [psnr(rgb_to_y(decode(encode(resize(degrade(p, sample_recipe(1234+i)),4.0,'bicubic'),codec).mean,codec))[4:-4,4:-4], rgb_to_y(p)[4:-4,4:-4]) for i,p in enumerate(val)]
print("codec-filtered bicubic:", round(float(np.mean(cfb)),2), flush=True)
save_codec(codec, "/root/pkg/.calib/codec_aa4000.ckpt")
man.save("/root/pkg/.calib/man_aa.json")
