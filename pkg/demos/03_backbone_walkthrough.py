#!/usr/bin/env python3
"""The prediction backbone, one stage at a time.

A yield prediction for (county, year) is assembled from four pieces:
a daily GRU encoder, attention pooling over days, a yearly embedding
that fuses the pooled state with the label and a learned year vector,
and cross-year attention over the county's recent history. This script
walks a single county through all four with freshly initialized
parameters, checking the structural invariants as it goes.
"""
import numpy as np

from ratar.backbone import (LyraDims, LyraParams, YearlyEmbedding,
                            LookbackContext, gru_encode, attention_pool,
                            yearly_embedding, cross_year_attention, head_value)

rng = np.random.default_rng(7)

T, d = 30, 6
dims = LyraDims(d=d, H=8, Z=5, E=3, attn_hidden=4, mlp_hidden=0)
p = LyraParams.init(dims, years=range(2000, 2006), w=3, seed=1)

# ---------------------------------------------------------------------------
# 1. Daily encoder: a [T x d] driver matrix becomes [T x H] hidden states.

x = rng.standard_normal((T, d))
h = gru_encode(x, p)
print(f"drivers {x.shape} -> hidden states {h.shape}")

# ---------------------------------------------------------------------------
# 2. Attention pooling: softmax scores over days, one pooled vector.

weights, pooled = attention_pool(h, p)
print(f"pooling weights: {weights.shape}, sum {weights.sum():.12f}, "
      f"max {weights.max():.3f}")
assert abs(weights.sum() - 1.0) < 1e-9
assert np.all(weights >= 0)

# ---------------------------------------------------------------------------
# 3. Yearly embedding: pooled state + label value + learned year vector.
# The label is whatever supervision the year has; at test time the
# target year substitutes a model prediction instead (see demo 05).

z = yearly_embedding(pooled, label=0.42, year=2003, p=p)
print(f"yearly embedding z: shape {z.shape}")

# ---------------------------------------------------------------------------
# 4. Cross-year attention: the target year queries its look-back window.

history = []
for year in (2000, 2001, 2002):
    hx = rng.standard_normal((T, d))
    _, hp = attention_pool(gru_encode(hx, p), p)
    hz = yearly_embedding(hp, label=float(rng.normal()), year=year, p=p)
    history.append(YearlyEmbedding("c01", year, hz, 0.0))

ctx = LookbackContext(target=YearlyEmbedding("c01", 2003, z, 0.42),
                      history=history)
beta, z_tilde = cross_year_attention(ctx)
print(f"beta over {len(history)} history years: {np.round(beta, 3)}, "
      f"sum {beta.sum():.12f}")
assert abs(beta.sum() - 1.0) < 1e-9

# z_tilde is the target embedding plus the attention-weighted history;
# the head maps it to a normalized scalar.
pred = head_value(z_tilde, p)
print(f"combined embedding -> head value {pred:+.4f} (normalized units)")

# ---------------------------------------------------------------------------
# 5. The residual form of the combination: with an empty-ish history the
# combined vector stays close to the target's own embedding direction.

one = LookbackContext(target=ctx.target, history=history[:1])
beta1, zt1 = cross_year_attention(one)
print(f"single-entry beta: {beta1} (softmax over one score is always 1)")
assert np.allclose(zt1, z + history[0].z)
print("z_tilde == z_target + beta @ z_history verified")
