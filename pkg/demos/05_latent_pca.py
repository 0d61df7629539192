"""
Principal components of year latents
====================================

Each grid/year is encoded from its basic-channel window, the posterior means
of the target year are averaged, and PCA summarizes the spread.
"""

from vita.data import SyntheticSpec, generate_synthetic, window_pretraining
from vita.encoder import ModelConfig
from vita.evaluation import pca_variance
from vita.finetune import year_latents
from vita.numerics import configure_runtime
from vita.pretrain import PretrainConfig, run_pretraining

configure_runtime(1)
ds = generate_synthetic(SyntheticSpec(num_grids=30, num_years=10, start_year=2000), seed=2)
windows = [w for g in ds.grids for w in window_pretraining(g)]
cfg = PretrainConfig(epochs=4, warmup_epochs=1, batch_size=8, base_lr=2e-3,
                     model=ModelConfig(d_model=32, n_layers=1, n_heads=4, d_mlp=64))
pre = run_pretraining(cfg, windows)

keys, z = year_latents(pre.model, pre.norm, ds.grids, years=[2006, 2007, 2008, 2009])
print(len(keys), "latent vectors of width", z.shape[1])

res = pca_variance(z, n_components=3)
print("explained variance:", res.fractions.round(3), "total", res.fractions.sum().round(3))
print(res.coords[:4].round(3))
