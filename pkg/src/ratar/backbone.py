"""Recurrent backbone: GRU daily encoder, intra-year attention pooling,
yearly embeddings with label and year-index injection, cross-year attention,
MLP head, plus the global GRU regressor used for label substitution and
residuals.

Two layers of API live here.  The public per-record functions (`gru_encode`,
`attention_pool`, `yearly_embedding`, `cross_year_attention`, `lyra_predict`,
`global_gru_predict`) operate on numpy arrays and run untraced.  The batched
engine (`lyra_forward`, `global_forward`, `gruatt_forward`) builds the same
computation on a ComputeTape over stacked sequences, which is what training
differentiates through.  A consistency test holds the two paths together.

Features entering any function here are assumed z-score normalized, as are
the labels stored on training records; predictions come back in physical
units via NormStats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import numcore as nc
from .data import NormStats
from .numcore import ContractError, DimensionError, ParamStore, Tensor

_ONE = Tensor(np.float64(1.0))


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class LyraDims:
    d: int
    H: int = 64
    Z: int = 64
    E: int = 8
    attn_hidden: int = 32
    mlp_hidden: int = 64


def _init_linear(store: ParamStore, prefix: str, fan_in: int, fan_out: int, rng) -> None:
    store.add(prefix + ".W", rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))
    store.add(prefix + ".b", np.zeros(fan_out))


def _init_mlp(store: ParamStore, prefix: str, n_in: int, hidden: int, n_out: int, rng) -> None:
    # hidden == 0 collapses to a single linear map, handy for identity tests
    if hidden > 0:
        _init_linear(store, prefix + ".h", n_in, hidden, rng)
        _init_linear(store, prefix + ".out", hidden, n_out, rng)
    else:
        _init_linear(store, prefix + ".out", n_in, n_out, rng)


def _init_gru(store: ParamStore, d: int, H: int, rng) -> None:
    for gate in ("r", "u", "c"):
        store.add(f"gru.W_{gate}", rng.normal(0.0, 1.0 / np.sqrt(d), (d, H)))
        store.add(f"gru.U_{gate}", rng.normal(0.0, 1.0 / np.sqrt(H), (H, H)))
        store.add(f"gru.b_{gate}", np.zeros(H))


@dataclass
class GruParams:
    """Global GRU regressor f(.): encoder plus mean-pool readout MLP."""

    store: ParamStore
    d: int
    H: int
    readout_hidden: int

    @classmethod
    def init(cls, d: int, H: int = 64, readout_hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        _init_gru(store, d, H, rng)
        _init_mlp(store, "readout", H, readout_hidden, 1, rng)
        return cls(store=store, d=d, H=H, readout_hidden=readout_hidden)

    def copy(self) -> "GruParams":
        return replace(self, store=self.store.copy())


@dataclass
class GruAttParams:
    """Ablation backbone: daily encoder and attention pooling only."""

    store: ParamStore
    d: int
    H: int
    attn_hidden: int
    head_hidden: int

    @classmethod
    def init(cls, d: int, H: int = 64, attn_hidden: int = 32, head_hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        _init_gru(store, d, H, rng)
        _init_mlp(store, "attn", H, attn_hidden, 1, rng)
        _init_mlp(store, "head", H, head_hidden, 1, rng)
        return cls(store=store, d=d, H=H, attn_hidden=attn_hidden, head_hidden=head_hidden)

    def copy(self) -> "GruAttParams":
        return replace(self, store=self.store.copy())


@dataclass
class LyraParams:
    store: ParamStore
    dims: LyraDims
    w: int
    year_min: int
    year_max: int

    @classmethod
    def init(cls, dims: LyraDims, w: int, year_min: int, year_max: int, seed: int = 0):
        if w < 1:
            raise ContractError("look-back window must be at least 1")
        if year_max < year_min:
            raise ContractError("empty year range for the embedding table")
        rng = np.random.default_rng(seed)
        store = ParamStore()
        _init_gru(store, dims.d, dims.H, rng)
        _init_mlp(store, "attn", dims.H, dims.attn_hidden, 1, rng)
        _init_mlp(store, "embed", dims.H + 1 + dims.E, dims.mlp_hidden, dims.Z, rng)
        _init_mlp(store, "head", dims.Z, dims.mlp_hidden, 1, rng)
        store.add("year_table", rng.normal(0.0, 0.1, (year_max - year_min + 1, dims.E)))
        return cls(store=store, dims=dims, w=w, year_min=year_min, year_max=year_max)

    def year_row(self, year: int) -> int:
        if not (self.year_min <= year <= self.year_max):
            raise ContractError(
                f"year {year} outside embedding range {self.year_min}..{self.year_max}"
            )
        return year - self.year_min

    def copy(self) -> "LyraParams":
        return replace(self, store=self.store.copy())


# ---------------------------------------------------------------------------
# semantic containers


@dataclass
class YearlyEmbedding:
    county: str
    year: int
    z: np.ndarray
    label_used: float


@dataclass
class LookbackContext:
    target: YearlyEmbedding
    history: list


@dataclass
class LyraSample:
    """Engine sample: indices into the embedding-triple table."""

    target: int
    history: tuple


@dataclass
class PredictResult:
    prediction: float
    beta: np.ndarray
    history_years: list
    label_used: float


# ---------------------------------------------------------------------------
# batched forward engine


def _bind(tape, store: ParamStore) -> dict:
    return {name: nc.ComputeTape.bind(tape, store, name) for name in store.names()}


def _mlp(bound: dict, x: Tensor, prefix: str) -> Tensor:
    hidden_key = prefix + ".h.W"
    if hidden_key in bound:
        x = nc.tanh(nc.add_bias(nc.matmul(x, bound[hidden_key]), bound[prefix + ".h.b"]))
    return nc.add_bias(nc.matmul(x, bound[prefix + ".out.W"]), bound[prefix + ".out.b"])


def _gru_steps(bound: dict, xs: np.ndarray) -> list:
    """GRU over xs [B,T,d]; returns the list of [B x H] hidden states."""
    B, T, d = xs.shape
    W_r, U_r, b_r = bound["gru.W_r"], bound["gru.U_r"], bound["gru.b_r"]
    W_u, U_u, b_u = bound["gru.W_u"], bound["gru.U_u"], bound["gru.b_u"]
    W_c, U_c, b_c = bound["gru.W_c"], bound["gru.U_c"], bound["gru.b_c"]
    if W_r.shape[0] != d:
        raise DimensionError(f"input has {d} features, encoder expects {W_r.shape[0]}")
    h = None
    hs = []
    for t in range(T):
        x = Tensor(xs[:, t, :])
        if h is None:
            # zero initial state: reset gate and U-terms contribute nothing
            u = nc.sigmoid(nc.add_bias(nc.matmul(x, W_u), b_u))
            c = nc.tanh(nc.add_bias(nc.matmul(x, W_c), b_c))
            h = nc.mul(u, c)
        else:
            r = nc.sigmoid(nc.add_bias(nc.add(nc.matmul(x, W_r), nc.matmul(h, U_r)), b_r))
            u = nc.sigmoid(nc.add_bias(nc.add(nc.matmul(x, W_u), nc.matmul(h, U_u)), b_u))
            c = nc.tanh(
                nc.add_bias(nc.add(nc.matmul(x, W_c), nc.matmul(nc.mul(r, h), U_c)), b_c)
            )
            h = nc.add(nc.mul(nc.sub(_ONE, u), h), nc.mul(u, c))
        hs.append(h)
    return hs


def _pooled_batch(bound: dict, xs: np.ndarray):
    """Encoder plus attention pooling; returns (pooled [B x H], weights [B x T])."""
    B, T, _ = xs.shape
    stack = nc.stack_steps(_gru_steps(bound, xs))  # sample-major [B*T x H]
    scores = nc.reshape(_mlp(bound, stack, "attn"), (B, T))
    weights = nc.softmax_rows(scores)
    pooled = nc.pool_rows(stack, weights)
    return pooled, weights


def global_forward(tape, p: GruParams, xs: np.ndarray) -> Tensor:
    """Normalized predictions [B] of the global model on xs [B,T,d]."""
    bound = _bind(tape, p.store)
    B, T, _ = xs.shape
    stack = nc.stack_steps(_gru_steps(bound, xs))
    mean_w = Tensor(np.full((B, T), 1.0 / T))
    pooled = nc.pool_rows(stack, mean_w)
    return nc.reshape(_mlp(bound, pooled, "readout"), (B,))


def gruatt_forward(tape, p: GruAttParams, xs: np.ndarray) -> Tensor:
    """Normalized predictions [B] of the pooled-only ablation backbone."""
    bound = _bind(tape, p.store)
    pooled, _ = _pooled_batch(bound, xs)
    return nc.reshape(_mlp(bound, pooled, "head"), (B := xs.shape[0],))


def embed_batch(tape, p: LyraParams, xs: np.ndarray, triples):
    """Yearly embeddings for (sequence row, label, year row) triples.

    Returns (z_all Tensor [R x Z], pooled Tensor [U x H], attention weights
    Tensor [U x T]).  Shared by training and the pooled-frozen fine-tune path.
    """
    bound = _bind(tape, p.store)
    pooled, attn_w = _pooled_batch(bound, xs)
    z_all = _embed_from_pooled(bound, pooled, triples)
    return z_all, pooled, attn_w


def _embed_from_pooled(bound: dict, pooled: Tensor, triples) -> Tensor:
    seq_rows, labels, year_rows = triples
    seq_rows = np.asarray(seq_rows, dtype=np.int64)
    year_rows = np.asarray(year_rows, dtype=np.int64)
    base = nc.gather_rows(pooled, seq_rows)
    lab = Tensor(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    emb = nc.gather_rows(bound["year_table"], year_rows)
    return _mlp(bound, nc.concat_cols([base, lab, emb]), "embed")


def lyra_forward(tape, p: LyraParams, xs: np.ndarray, triples, samples, pooled_const=None):
    """Batched LYRA forward over window samples.

    xs: [U,T,d] unique sequences; triples: arrays (seq_row, label, year_row)
    defining the embedding table rows; samples: LyraSample index structures.
    pooled_const short-circuits the encoder with precomputed pooled vectors
    (frozen-encoder fine-tuning).  Returns (normalized predictions Tensor [S]
    in sample order, list of per-sample attention weight arrays).
    """
    if not samples:
        raise ContractError("no samples to run")
    bound = _bind(tape, p.store)
    if pooled_const is not None:
        pooled = Tensor(np.asarray(pooled_const, dtype=np.float64))
    else:
        pooled, _ = _pooled_batch(bound, xs)
    z_all = _embed_from_pooled(bound, pooled, triples)

    by_len: dict[int, list] = {}
    for i, s in enumerate(samples):
        if len(s.history) < 1:
            raise ContractError("sample with empty history window")
        by_len.setdefault(len(s.history), []).append(i)

    parts = []
    order = []
    betas: list = [None] * len(samples)
    for length in sorted(by_len):
        idxs = by_len[length]
        hist_idx = np.array([samples[i].history for i in idxs], dtype=np.int64)
        tgt_idx = np.array([samples[i].target for i in idxs], dtype=np.int64)
        stack = nc.gather_rows(z_all, hist_idx.ravel())
        tgt = nc.gather_rows(z_all, tgt_idx)
        beta = nc.softmax_rows(nc.rowdot_groups(stack, tgt))
        z_tilde = nc.add(tgt, nc.pool_rows(stack, beta))
        parts.append(_mlp(bound, z_tilde, "head"))
        order.extend(idxs)
        for row, i in enumerate(idxs):
            betas[i] = beta.data[row].copy()

    stacked = parts[0] if len(parts) == 1 else nc.concat_rows(parts)
    inverse = np.argsort(np.asarray(order, dtype=np.int64), kind="stable")
    preds = nc.reshape(nc.gather_rows(stacked, inverse), (len(samples),))
    return preds, betas


# ---------------------------------------------------------------------------
# public per-record operations (untraced)


def gru_encode(x: np.ndarray, p) -> np.ndarray:
    """Hidden states [T x H] for one normalized daily sequence [T x d]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("gru_encode expects a [T x d] matrix")
    hs = _gru_steps(_bind(None, p.store), x[None, :, :])
    return np.concatenate([h.data for h in hs], axis=0)


def attention_pool(h: np.ndarray, p):
    """Softmax attention over time steps; returns (weights [T], pooled [H])."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1:
        raise DimensionError("attention_pool expects a nonempty [T x H] matrix")
    bound = _bind(None, p.store)
    scores = _mlp(bound, Tensor(h), "attn")
    weights = nc.softmax_rows(nc.reshape(scores, (1, h.shape[0]))).data[0]
    return weights, weights @ h


def yearly_embedding(pooled: np.ndarray, label: float, year: int, p: LyraParams) -> np.ndarray:
    """Yearly embedding from pooled states, a label value, and the year index."""
    row = p.year_row(year)
    bound = _bind(None, p.store)
    pooled = np.asarray(pooled, dtype=np.float64).reshape(1, -1)
    triples = (np.array([0]), np.array([float(label)]), np.array([row]))
    return _embed_from_pooled(bound, Tensor(pooled), triples).data[0]


def cross_year_attention(ctx: LookbackContext):
    """Dot-product attention of history embeddings against the target.

    Returns (beta weights over history order, residual-combined z_tilde).
    """
    if not ctx.history:
        raise ContractError("look-back history is empty")
    z_t = np.asarray(ctx.target.z, dtype=np.float64)
    z_h = np.stack([np.asarray(h.z, dtype=np.float64) for h in ctx.history])
    if z_h.shape[1] != z_t.shape[0]:
        raise DimensionError("embedding dimensions differ across the context")
    scores = z_h @ z_t  # unscaled dot products
    e = np.exp(scores - scores.max())
    beta = e / e.sum()
    return beta, z_t + beta @ z_h


def head_value(z_tilde: np.ndarray, p) -> float:
    """Normalized scalar prediction from a combined embedding."""
    bound = _bind(None, p.store)
    z = np.asarray(z_tilde, dtype=np.float64).reshape(1, -1)
    return float(_mlp(bound, Tensor(z), "head").data[0, 0])


def global_gru_predict(x: np.ndarray, p: GruParams, stats: NormStats | None = None) -> float:
    """Prediction of the global model on one sequence.

    With `stats` the value is mapped back to physical label units;
    without it the raw (normalized-space) output is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("global_gru_predict expects a [T x d] matrix")
    norm = float(global_forward(None, p, x[None, :, :]).data[0])
    return stats.denormalize_label(norm) if stats is not None else norm


def assemble_history(train_ds, county: str, target_year: int, w: int) -> list:
    """The county's last-w training records before target_year, ascending."""
    years = [y for y in train_ds.county_years(county) if y < target_year]
    if not years:
        raise ContractError(
            f"county {county} has no feature history before {target_year}"
        )
    return [train_ds.get(county, y) for y in years[-w:]]


def lyra_predict(
    history,
    target,
    p: LyraParams,
    stats: NormStats,
    label_source: str = "model",
    global_params: GruParams | None = None,
    extra_context=(),
) -> PredictResult:
    """Compose encoder, pooling, embeddings, cross-year attention and head.

    history: the county's prior-year records (normalized features, normalized
    labels); only the last w are used.  label_source chooses the target-year
    label substitute: "model" runs the global model, "observed" normalizes the
    target record's own stored physical label (a guarded read at test time).
    extra_context appends pre-built YearlyEmbedding entries (refined samples
    under context augmentation).
    """
    history = sorted(history, key=lambda r: r.year)
    if not history:
        raise ContractError(
            f"empty history for {target.county}: need at least one year before {target.year}"
        )
    hist = history[-p.w:]

    if label_source == "model":
        if global_params is None:
            raise ContractError("label_source='model' needs global_params")
        fhat = global_gru_predict(target.features, global_params, stats)
        label_used = stats.normalize_label(fhat)
    elif label_source == "observed":
        raw = target.yield_label
        if raw is None:
            raise ContractError(f"no observed label for ({target.county},{target.year})")
        label_used = stats.normalize_label(raw)
    else:
        raise ContractError(f"unknown label_source {label_source!r}")

    hist_embeddings = []
    for rec in hist:
        _, pooled = attention_pool(gru_encode(rec.features, p), p)
        z = yearly_embedding(pooled, rec.yield_label, rec.year, p)
        hist_embeddings.append(YearlyEmbedding(rec.county, rec.year, z, rec.yield_label))
    _, pooled_t = attention_pool(gru_encode(target.features, p), p)
    z_t = yearly_embedding(pooled_t, label_used, target.year, p)

    ctx = LookbackContext(
        target=YearlyEmbedding(target.county, target.year, z_t, label_used),
        history=hist_embeddings + list(extra_context),
    )
    beta, z_tilde = cross_year_attention(ctx)
    prediction = stats.denormalize_label(head_value(z_tilde, p))
    return PredictResult(
        prediction=prediction,
        beta=beta,
        history_years=[h.year for h in ctx.history],
        label_used=label_used,
    )


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = "ratar-checkpoint-v1"
_KINDS = {"GruParams": "gru", "GruAttParams": "gruatt", "LyraParams": "lyra"}


def save_checkpoint(path: str, params, stats: NormStats | None) -> None:
    """Single-file npz container: magic tag, dims header, named tensors."""
    kind = _KINDS.get(type(params).__name__)
    if kind is None:
        raise ContractError(f"cannot checkpoint {type(params).__name__}")
    if kind == "gru":
        meta = {"d": params.d, "H": params.H, "readout_hidden": params.readout_hidden}
    elif kind == "gruatt":
        meta = {
            "d": params.d,
            "H": params.H,
            "attn_hidden": params.attn_hidden,
            "head_hidden": params.head_hidden,
        }
    else:
        meta = {
            "dims": vars(params.dims).copy() if not isinstance(params.dims, LyraDims) else params.dims.__dict__.copy(),
            "w": params.w,
            "year_min": params.year_min,
            "year_max": params.year_max,
        }
    arrays = {
        "magic": np.array(_MAGIC),
        "kind": np.array(kind),
        "meta": np.array(json.dumps(meta, sort_keys=True)),
    }
    for name in params.store.names():
        arrays["param:" + name] = params.store.value(name)
    if stats is not None:
        for key, arr in stats.to_arrays().items():
            arrays["stats:" + key] = arr
    np.savez(path, **arrays)


def load_checkpoint(path: str):
    """Inverse of save_checkpoint; returns (params, stats or None)."""
    with np.load(path, allow_pickle=False) as z:
        if "magic" not in z.files or str(z["magic"]) != _MAGIC:
            raise ContractError(f"{path} is not a recognized checkpoint")
        kind = str(z["kind"])
        meta = json.loads(str(z["meta"]))
        store = ParamStore()
        for key in z.files:
            if key.startswith("param:"):
                store.add(key[len("param:"):], z[key])
        stats = None
        stat_keys = {k[len("stats:"):]: z[k] for k in z.files if k.startswith("stats:")}
        if stat_keys:
            stats = NormStats.from_arrays(stat_keys)
    if kind == "gru":
        params = GruParams(store=store, **meta)
    elif kind == "gruatt":
        params = GruAttParams(store=store, **meta)
    elif kind == "lyra":
        params = LyraParams(
            store=store,
            dims=LyraDims(**meta["dims"]),
            w=meta["w"],
            year_min=meta["year_min"],
            year_max=meta["year_max"],
        )
    else:
        raise ContractError(f"unknown checkpoint kind {kind!r}")
    return params, stats
