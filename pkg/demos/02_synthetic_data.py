#!/usr/bin/env python3
"""A tour of the synthetic county-year yield panel.

The generator builds a panel of counties observed over several years.
Each county-year carries a daily weather sequence, a yield label, and
a truth table for everything the models are *not* told: hidden cluster
membership, soil quality, the slowly drifting technology trend, and
year shocks. This script generates a small panel and pokes at the
structure that the retrieval and refinement stages later exploit.
"""
import numpy as np

from ratar.data import SyntheticConfig, generate_synthetic, split_by_test_year

cfg = SyntheticConfig(
    n_counties=24,
    n_years=8,
    T=30,
    d=6,
    n_hidden_clusters=3,
    year_bias_slope=0.25,
    year_shock_std=0.1,
    obs_noise_std=0.1,
    seed=42,
)
ds = generate_synthetic(cfg)

print(f"panel: {cfg.n_counties} counties x {cfg.n_years} years, "
      f"T={cfg.T} days, d={cfg.d} weather channels")
print(f"records: {len(ds.records)}")

rec = ds.records[0]
print(f"\nfirst record: county={rec.county} year={rec.year} "
      f"features {rec.features.shape} yield {rec.yield_label:.3f}")

# ---------------------------------------------------------------------------
# Hidden structure: clusters share a yield response function.

truth = ds.truth
clusters = {}
for county, cl in truth.cluster_of.items():
    clusters.setdefault(cl, []).append(county)
for cl in sorted(clusters):
    print(f"cluster {cl}: {len(clusters[cl])} counties")

# Counties in the same cluster respond to weather the same way, so their
# *residuals* (yield minus what a pooled model explains) co-move. Check
# the raw version of that claim: correlate de-meaned yields across years.
years = sorted({r.year for r in ds.records})
by_county = {}
for r in ds.records:
    by_county.setdefault(r.county, {})[r.year] = r.yield_label
mat = np.array([[by_county[c][y] for y in years] for c in sorted(by_county)])
mat = mat - mat.mean(axis=1, keepdims=True)
mat = mat - mat.mean(axis=0, keepdims=True)

same, diff = [], []
counties = sorted(by_county)
for i in range(len(counties)):
    for j in range(i + 1, len(counties)):
        a, b = mat[i], mat[j]
        c = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))
        if truth.cluster_of[counties[i]] == truth.cluster_of[counties[j]]:
            same.append(c)
        else:
            diff.append(c)
print(f"\nmean residual correlation, same cluster: {np.mean(same):+.3f}")
print(f"mean residual correlation, diff cluster: {np.mean(diff):+.3f}")

# ---------------------------------------------------------------------------
# The technology trend: noiseless yields drift upward over years.

trend = [np.mean([truth.rows[(c, y)].noiseless_yield for c in counties])
         for y in years]
print("\nmean noiseless yield by year:")
for y, t in zip(years, trend):
    print(f"  {y}: {t:7.3f}")

# ---------------------------------------------------------------------------
# Splitting holds out the final year; its labels exist only in the truth
# table, never in the records handed to a model.

train, test = train_test_split(ds, test_year=years[-1])
print(f"\ntrain records: {len(train.records)} (years {years[0]}..{years[-2]})")
print(f"test records:  {len(test.records)} (year {years[-1]})")
assert all(r.year != years[-1] for r in train.records)
