import time, numpy as np, torch
from desksr.harness.manifest import DatasetManifest, extract_patches
from desksr.codec import load_codec, reconstruction_psnr
from desksr.features import train_feature_net, extract_tokens, save_feature_net
from desksr.diffusion import train_fm, FMTrainConfig, UNetConfig, make_schedule
from desksr.sr import train_sr, SRConfig, sr_generate, SRGenerator
from desksr.degradation import degrade, sample_recipe
from desksr.metrics import psnr, rgb_to_y
from desksr.resize import resize

man = DatasetManifest.load("/root/pkg/.calib/man_aa.json")
codec = load_codec("/root/pkg/.calib/codec_aa4000.ckpt")
val = [p for p,_ in extract_patches(man, 64, 0, np.random.default_rng(0), split="val")]
print("codec recon PSNR:", round(reconstruction_psnr(codec, val),2), flush=True)

t0=time.time()
featnet, fh = train_feature_net(man, steps=1000, batch=16, lr=5e-4, seed=0)
loss=[h["loss"] for h in fh]
print(f"featnet t={time.time()-t0:.0f}s drop={(1-np.mean(loss[-20:])/np.mean(loss[:20]))*100:.0f}% info_final={fh[-1]['entropy']:.2f}", flush=True)
save_feature_net(featnet, "/root/pkg/.calib/feat1000.ckpt")

def gcos(a,b):
    ga = extract_tokens(a, featnet).tokens[0]; gb = extract_tokens(b, featnet).tokens[0]
    return float(np.dot(ga,gb)/(np.linalg.norm(ga)*np.linalg.norm(gb)))
pairs=[]; unrel=[]
for i,p in enumerate(val[:20]):
    lr = degrade(p, sample_recipe(99+i))
    pairs.append(gcos(p, resize(lr,4.0,"bicubic")))
    unrel.append(gcos(p, val[(i+3)%len(val)]))
print("robustness: cos(pair)=", round(float(np.mean(pairs)),3), "cos(unrel)=", round(float(np.mean(unrel)),3), "margin=", round(float(np.mean(pairs)-np.mean(unrel)),3), flush=True)

sched = make_schedule(1000)
t0=time.time()
fm, fm_ema, fmh = train_fm(man, codec, featnet, "feature",
                           FMTrainConfig(steps=1500, batch=16, seed=0),
                           UNetConfig(), sched, pool_size=400)
fl=[h["loss"] for h in fmh]
print(f"fm t={time.time()-t0:.0f}s loss first10 {np.mean(fl[:10]):.3f} last10 {np.mean(fl[-10:]):.3f}", flush=True)
from desksr.diffusion import save_fm
save_fm(fm_ema, "/root/pkg/.calib/fm_feature.ckpt", UNetConfig(), "feature")

# SR training
t0=time.time()
gen, srh = train_sr(man, fm_ema, codec, featnet, SRConfig(seed=0), sched,
                    cond_source="feature", steps=1200, pool_size=300)
print(f"sr t={time.time()-t0:.0f}s loss first10 {np.mean([h['loss'] for h in srh[:10]]):.4f} last10 {np.mean([h['loss'] for h in srh[-10:]]):.4f}", flush=True)

def eval_psnr(generator, patches, seed0=4242):
    ps_sr, ps_bic = [], []
    for i, hr in enumerate(patches):
        lr = degrade(hr, sample_recipe(seed0+i))
        up = resize(lr, 4.0, "bicubic")
        out = sr_generate(lr, generator)
        ps_sr.append(psnr(rgb_to_y(out)[4:-4,4:-4], rgb_to_y(hr)[4:-4,4:-4]))
        ps_bic.append(psnr(rgb_to_y(up)[4:-4,4:-4], rgb_to_y(hr)[4:-4,4:-4]))
    return float(np.mean(ps_sr)), float(np.mean(ps_bic))

sr_p, bic_p = eval_psnr(gen, val)
print(f"VAL: SR {sr_p:.2f} dB vs bicubic {bic_p:.2f} dB  margin {sr_p-bic_p:+.2f}", flush=True)
from desksr.sr import save_sr_adapters
save_sr_adapters(gen, "/root/pkg/.calib/sr_feature.ckpt")
