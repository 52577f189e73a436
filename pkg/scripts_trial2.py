import sys, time, json
sys.path.insert(0, "/root/pkg/src")
import numpy as np, torch
from ganseg.synthdata import *
from ganseg.preprocess import *
from ganseg.models import ModelConfig, GanBundle, StyleEncoder, build_segmenter
from ganseg.training import *

t_start = time.time()
RES = 32
dc = DataConfig(n_labelled_train=200, n_labelled_test=60, n_unlabelled=400,
                n_annotated_subset=60, n_out_of_domain_test=60,
                out_of_domain=DomainSpec(scale=1.25, lateral_shift=2.0, intensity_offset=0.15),
                generation=GenerationConfig(resolution=RES, scale_jitter=0.05,
                                            shift_jitter=0.02, intensity_jitter=0.02),
                generation_unlabelled=GenerationConfig(resolution=RES, scale_jitter=0.22,
                                                       shift_jitter=0.06, intensity_jitter=0.15),
                seed=0)
parts = build_partitions(dc)
pc = PreprocessConfig(resolution=RES)

def prep(name):
    xs, ms, ss = preprocess_partition(parts[name], pc)
    m = np.stack(ms) if ms[0] is not None else None
    return xs, m

xl, ml = prep("labelled_train")
xu, mu = prep("unlabelled")
xt, mt = prep("labelled_test")
xa, ma = prep("annotated_subset")
xo, mo = prep("out_of_domain_test")

mc = ModelConfig(resolution=RES, style_dim=64, base_channels=16, max_channels=128)
cfg = TrainConfig(steps_stage1=1200, steps_stage2=1000, steps_segmenter=1500,
                  batch_size=8, eval_every=100, seed=0, lr_generator=2e-3,
                  lr_discriminator=2e-3, lr_encoder=1e-3, lr_segmenter=1e-3)

print("== stage1", flush=True)
t0 = time.time()
r1 = train_stage1(xl, ml, xu, mc, cfg)
print(f"stage1 done in {time.time()-t0:.0f}s best_fid={r1.best_score:.4f} @ {r1.best_step} fid0={r1.extra['fid_step0']:.4f}", flush=True)
fids = [(h["step"], h["fid"]) for h in r1.history if "fid" in h]
print("fid trace:", [(s, round(f,3)) for s,f in fids], flush=True)

gan = GanBundle(mc)
gan.load_state_dict({k: torch.as_tensor(v) for k, v in r1.states["gan"].items()})

print("== stage2", flush=True)
t0 = time.time()
cfg2 = TrainConfig(steps_stage1=1200, steps_stage2=1000, steps_segmenter=1500,
                   batch_size=16, eval_every=100, seed=0)
r2 = train_stage2(gan, xl, ml, xu, mc, cfg2)
print(f"stage2 done in {time.time()-t0:.0f}s best_val_dice={r2.best_score:.4f} @ {r2.best_step}", flush=True)
dtrace = [(h["step"], round(h["val_dice"],3)) for h in r2.history if "val_dice" in h]
print("dice trace:", dtrace, flush=True)

enc = StyleEncoder(mc)
enc.load_state_dict({k: torch.as_tensor(v) for k, v in r2.states["encoder"].items()})

def gan_predict(images):
    return predict_masks(lambda b: gan.generator(enc(b))[1], to_tensor_images(images))

for name, xs, ms in [("ID", xt, mt), ("NIH-like", xa, ma), ("OOD", xo, mo)]:
    d = mean_dice(gan_predict(xs), ms)
    print(f"SemanticGAN {name} dice: {d:.4f}", flush=True)

print("== semantican", flush=True)
t0 = time.time()
cfg3 = TrainConfig(steps_stage1=1200, steps_stage2=1000, steps_segmenter=1500,
                   batch_size=16, eval_every=100, seed=0, lr_segmenter=1e-3)
r3 = train_semantican(xl, ml, xu, "DL", mc, cfg3)
print(f"AN done in {time.time()-t0:.0f}s best_val={r3.best_score:.4f}", flush=True)
seg = build_segmenter("DL", channels=mc.segmenter_channels)
seg.load_state_dict({k: torch.as_tensor(v) for k, v in r3.states["segmenter"].items()})
for name, xs, ms in [("ID", xt, mt), ("NIH-like", xa, ma), ("OOD", xo, mo)]:
    d = mean_dice(predict_masks(seg, to_tensor_images(xs)), ms)
    print(f"SemanticAN {name} dice: {d:.4f}", flush=True)

print("== suponly (for reference)", flush=True)
r4 = train_suponly(xl, ml, "DL", mc, cfg3)
seg2 = build_segmenter("DL", channels=mc.segmenter_channels)
seg2.load_state_dict({k: torch.as_tensor(v) for k, v in r4.states["segmenter"].items()})
for name, xs, ms in [("ID", xt, mt), ("NIH-like", xa, ma), ("OOD", xo, mo)]:
    d = mean_dice(predict_masks(seg2, to_tensor_images(xs)), ms)
    print(f"SupOnly {name} dice: {d:.4f}", flush=True)

print(f"total {time.time()-t_start:.0f}s", flush=True)
