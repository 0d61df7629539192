"""
Pretraining on weather, fine-tuning on yields
=============================================

A small encoder is pretrained to reconstruct all 31 channels from partially
masked input, then fine-tuned to predict yields from the 6 basic channels
only. A randomly initialized model is fine-tuned alongside for comparison.
"""

import tempfile

from vita.data import SyntheticSpec, generate_synthetic, window_pretraining
from vita.encoder import ModelConfig
from vita.finetune import FinetuneConfig, build_sequences, county_weather, run_finetune
from vita.numerics import configure_runtime
from vita.pretrain import PretrainConfig, run_pretraining

configure_runtime(1)
model = ModelConfig(d_model=32, n_layers=2, n_heads=4, d_mlp=64)
ds = generate_synthetic(SyntheticSpec(num_grids=60, num_years=8, start_year=2000, stress_seasons=7), seed=0)

windows = [w for g in ds.grids for w in window_pretraining(g)]
print(len(windows), "pretraining windows of", windows[0].detailed.shape)

out = tempfile.mkdtemp()
pre = run_pretraining(PretrainConfig(epochs=8, warmup_epochs=1, batch_size=16, base_lr=2e-3, model=model), windows, out_dir=out)
for row in pre.log:
    print(row["epoch"], row["k"], f"{row['lr']:.2e}", round(row["train_loss"], 1))

weather = {g.grid_id: county_weather(g) for g in ds.grids}
train = build_sequences(weather, ds.yields, range(2000, 2007))
val = build_sequences(weather, ds.yields, range(2001, 2008))
print(len(train), "training sequences,", len(val), "validation")

for ckpt in (pre.checkpoint, None):
    cfg = FinetuneConfig(beta=0.0, lr=1e-3, batch_size=16, epochs=6, warmup_epochs=1, checkpoint=ckpt and str(ckpt), model=model)
    res = run_finetune(cfg, train, val)
    label = "pretrained" if ckpt else "random"
    print(f"{label:>10s}  best epoch {res.best_epoch}  R2={res.metrics.r2:.3f}  RMSE={res.metrics.rmse:.2f}")
