"""The UxSID network.

A behavior sequence of arbitrary length is first condensed by learnable
interest anchors (cross-attention plus a per-anchor feed-forward block),
then probed twice with the target's first-layer semantic ID: once over
the raw sequence for a global response, once over the compressed anchors
through a gate conditioned on that global response. The concatenation of
the two probe outputs is the cached per-(user, SID) representation; a
small MLP head turns it plus target/user/short-term features into a
click probability.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import numerics as nm
from .numerics import (
    Tensor,
    add,
    clamp,
    concat_cols,
    concat_rows,
    constant,
    div,
    gather_rows,
    log,
    matmul,
    mean_all,
    mean_rows,
    mul,
    no_grad,
    param,
    scale,
    sigmoid,
    softmax_rows,
    sqrt_scalar,
    sub,
    sum_all,
    sum_rows,
)

CHECKPOINT_MAGIC = b"UXMD"
CHECKPOINT_VERSION = 1

_CONFIG_ALIASES = {
    "d": "embed_dim",
    "k": "n_anchors",
    "d_ff": "ffn_hidden",
    "d_g": "gate_hidden",
    "lambda": "ortho_weight",
    "learning_rate": "lr",
}


@dataclass
class ModelConfig:
    n_items: int
    n_users: int
    n_sids: int
    embed_dim: int = 16
    n_anchors: int = 16
    ffn_hidden: int | None = None  # defaults to 2 * embed_dim
    gate_hidden: int | None = None  # defaults to embed_dim
    head_sizes: tuple = (200, 80, 2)
    short_window: int = 10
    ortho_weight: float = 0.1
    ortho_mode: str = "frobenius"
    lr: float = 0.001
    batch_size: int = 256
    n_epochs: int = 5
    patience: int = 3
    seed: int = 0
    precision: str = "single"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.ffn_hidden is None:
            self.ffn_hidden = 2 * self.embed_dim
        if self.gate_hidden is None:
            self.gate_hidden = self.embed_dim
        self.head_sizes = tuple(self.head_sizes)
        if self.head_sizes[-1] != 2:
            raise ValueError("prediction head must end in a 2-logit layer")
        if self.ortho_mode not in ("frobenius", "cosine"):
            raise ValueError(f"unknown ortho_mode {self.ortho_mode!r}")
        if self.precision not in ("single", "double"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict, **overrides) -> "ModelConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        kwargs = {}
        for key, value in raw.items():
            key = _CONFIG_ALIASES.get(key, key)
            if key in known:
                kwargs[key] = value
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class UxsidEmbedding:
    """The cached 2 x d record: global probe output over raw behaviors and
    local probe output over the compressed anchors."""

    e_global: np.ndarray
    e_local: np.ndarray

    def as_matrix(self) -> np.ndarray:
        return np.stack([self.e_global, self.e_local])


@dataclass
class ForwardTrace:
    global_scores: np.ndarray  # attention over the L behaviors
    anchor_scores: np.ndarray  # attention over the K anchors
    e_global: np.ndarray
    e_local: np.ndarray
    interests: np.ndarray  # compressed anchor matrix, K x d


def _xavier(rng, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _table(rng, rows, dim, dtype):
    return (rng.normal(0.0, 1.0 / math.sqrt(dim), size=(rows, dim))).astype(dtype)


def _zeros(*shape, dtype):
    return np.zeros(shape, dtype=dtype)


class UxsidParams:
    """Every learnable tensor, created in a fixed, checkpoint-stable order."""

    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        d, dt = cfg.embed_dim, cfg.dtype
        self.item_emb = param("item_emb", _table(rng, cfg.n_items, d, dt))
        self.sid_emb = param("sid_emb", _table(rng, cfg.n_sids, d, dt))
        self.user_emb = param("user_emb", _table(rng, cfg.n_users, d, dt))
        self.anchors = param("anchors", _table(rng, cfg.n_anchors, d, dt))
        self.iaic_wq = param("iaic_wq", _xavier(rng, d, d, dt))
        self.iaic_wk = param("iaic_wk", _xavier(rng, d, d, dt))
        self.iaic_wv = param("iaic_wv", _xavier(rng, d, d, dt))
        # Per-anchor FFNs, packed: anchor k owns columns [k*f, (k+1)*f) of
        # pffn_w1 / pffn_b1, rows [k*f, (k+1)*f) of pffn_w2, and row k of
        # pffn_b2 and the layer-norm gain/bias. Each block is initialized
        # exactly as a standalone (d -> f -> d) network would be.
        f = cfg.ffn_hidden
        w1 = np.concatenate([_xavier(rng, d, f, dt) for _ in range(cfg.n_anchors)], axis=1)
        w2 = np.concatenate([_xavier(rng, f, d, dt) for _ in range(cfg.n_anchors)], axis=0)
        self.pffn_w1 = param("pffn_w1", w1)
        self.pffn_b1 = param("pffn_b1", _zeros(1, cfg.n_anchors * f, dtype=dt))
        self.pffn_w2 = param("pffn_w2", w2)
        self.pffn_b2 = param("pffn_b2", _zeros(cfg.n_anchors, d, dtype=dt))
        self.pffn_ln_gain = param("pffn_ln_gain", np.ones((cfg.n_anchors, d), dtype=dt))
        self.pffn_ln_bias = param("pffn_ln_bias", _zeros(cfg.n_anchors, d, dtype=dt))
        self.probe_wq = param("probe_wq", _xavier(rng, d, d, dt))
        self.probe_wk = param("probe_wk", _xavier(rng, d, d, dt))
        self.probe_wv = param("probe_wv", _xavier(rng, d, d, dt))
        self.gate_w1 = param("gate_w1", _xavier(rng, d, cfg.gate_hidden, dt))
        self.gate_b1 = param("gate_b1", _zeros(1, cfg.gate_hidden, dtype=dt))
        self.gate_w2 = param("gate_w2", _xavier(rng, cfg.gate_hidden, d, dt))
        self.gate_b2 = param("gate_b2", _zeros(1, d, dtype=dt))
        self.local_wq = param("local_wq", _xavier(rng, d, d, dt))
        self.local_wk = param("local_wk", _xavier(rng, d, d, dt))
        self.local_wv = param("local_wv", _xavier(rng, d, d, dt))
        self.head = []
        widths = (6 * d,) + cfg.head_sizes
        for i in range(len(cfg.head_sizes)):
            self.head.append((
                param(f"head_w{i}", _xavier(rng, widths[i], widths[i + 1], dt)),
                param(f"head_b{i}", _zeros(1, widths[i + 1], dtype=dt)),
            ))

    def all(self) -> list[Tensor]:
        out = [self.item_emb, self.sid_emb, self.user_emb, self.anchors,
               self.iaic_wq, self.iaic_wk, self.iaic_wv,
               self.pffn_w1, self.pffn_b1, self.pffn_w2, self.pffn_b2,
               self.pffn_ln_gain, self.pffn_ln_bias,
               self.probe_wq, self.probe_wk, self.probe_wv,
               self.gate_w1, self.gate_b1, self.gate_w2, self.gate_b2,
               self.local_wq, self.local_wk, self.local_wv]
        for w, b in self.head:
            out.extend([w, b])
        return out


def single_head_attention(query_rows, key_rows, value_rows, wq, wk, wv, dim: int):
    """Scaled dot-product attention with one head; returns (output, weights)."""
    q = matmul(query_rows, wq)
    k = matmul(key_rows, wk)
    v = matmul(value_rows, wv)
    att = softmax_rows(scale(nm.matmul_t(q, k), 1.0 / math.sqrt(dim)))
    return matmul(att, v), att


def ortho_loss(p, mode: str = "frobenius"):
    """Diversity penalty on the anchor matrix.

    frobenius: || P P^T / sum(P^2) - I ||_F. The normalizer is the squared
    Frobenius norm, so the value is invariant to rescaling P and, because
    the normalized Gram matrix always has unit trace, is bounded below by
    (K-1)/sqrt(K) for K anchors.

    cosine: row-normalize P first, penalizing only the pairwise cosines.
    """
    is_tensor = isinstance(p, Tensor)
    t = p if is_tensor else Tensor(np.asarray(p))
    if t.value.ndim != 2:
        raise nm.DimensionError("ortho_loss expects a K x d matrix")
    if not np.any(t.value):
        raise ValueError("orthogonality loss is undefined for an all-zero matrix")
    eye = np.eye(t.value.shape[0], dtype=t.value.dtype)
    if mode == "frobenius":
        gram = nm.matmul_t(t, t)
        deviation = sub(div(gram, sum_all(mul(t, t))), eye)
    elif mode == "cosine":
        unit = div(t, sqrt_scalar(sum_rows(mul(t, t))))
        deviation = sub(nm.matmul_t(unit, unit), eye)
    else:
        raise ValueError(f"unknown ortho mode {mode!r}")
    out = sqrt_scalar(sum_all(mul(deviation, deviation)))
    return out if is_tensor else float(out.value)


class UxsidModel:
    """Forward passes, the joint loss, and the serving embedding."""

    def __init__(self, cfg: ModelConfig, params: UxsidParams | None = None):
        self.cfg = cfg
        self.p = params if params is not None else UxsidParams(cfg)
        pos = np.zeros((2, 1), dtype=cfg.dtype)
        pos[1, 0] = 1.0
        self._positive_column = constant(pos)
        # Block-diagonal selector: row k keeps only anchor k's own hidden
        # units, which is what makes the packed FFN per-anchor (zeroed
        # cross terms contribute exactly nothing, forward and backward).
        mask = np.zeros((cfg.n_anchors, cfg.n_anchors * cfg.ffn_hidden), dtype=cfg.dtype)
        for k in range(cfg.n_anchors):
            mask[k, k * cfg.ffn_hidden : (k + 1) * cfg.ffn_hidden] = 1.0
        self._pffn_mask = constant(mask)

    # -- building blocks ----------------------------------------------------

    def sequence_embeddings(self, seq) -> Tensor:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size == 0:
            raise ValueError("behavior sequence is empty")
        return gather_rows(self.p.item_emb, seq)

    def compress_interests(self, e_seq: Tensor):
        """Anchor cross-attention over the sequence, then each anchor's own
        feed-forward refinement with residual and layer norm. Output is
        K x d whatever the sequence length."""
        h, _ = single_head_attention(
            self.p.anchors, e_seq, e_seq,
            self.p.iaic_wq, self.p.iaic_wk, self.p.iaic_wv, self.cfg.embed_dim,
        )
        return self.refine_anchors(h)

    def refine_anchors(self, h):
        """Row k of h passes through anchor k's own feed-forward network
        (residual, then that anchor's layer-norm gain and bias). The block
        mask guarantees row k never reads any other row's hidden units."""
        p = self.p
        hidden = sigmoid(add(matmul(h, p.pffn_w1), p.pffn_b1))
        ffn = add(matmul(mul(hidden, self._pffn_mask), p.pffn_w2), p.pffn_b2)
        return nm.layer_norm_rows(add(h, ffn), p.pffn_ln_gain, p.pffn_ln_bias,
                                  self.cfg.ln_eps)

    def explicit_probe(self, c_target: Tensor, e_seq: Tensor):
        """Attend over the raw sequence with the target SID embedding."""
        return single_head_attention(
            c_target, e_seq, e_seq,
            self.p.probe_wq, self.p.probe_wk, self.p.probe_wv, self.cfg.embed_dim,
        )

    def gated_latent_probe(self, c_target: Tensor, e_global: Tensor, interests: Tensor):
        """Mask the SID query with a gate driven by the global response,
        then attend over the compressed anchors."""
        hidden = sigmoid(add(matmul(e_global, self.p.gate_w1), self.p.gate_b1))
        g_ctx = sigmoid(add(matmul(hidden, self.p.gate_w2), self.p.gate_b2))
        q_ref = mul(c_target, g_ctx)
        return single_head_attention(
            q_ref, interests, interests,
            self.p.local_wq, self.p.local_wk, self.p.local_wv, self.cfg.embed_dim,
        )

    def embed_tensors(self, seq, sid: int):
        if not (0 <= sid < self.cfg.n_sids):
            raise ValueError(f"SID {sid} out of range [0, {self.cfg.n_sids})")
        e_seq = self.sequence_embeddings(seq)
        interests = self.compress_interests(e_seq)
        c_target = gather_rows(self.p.sid_emb, [sid])
        e_global, global_att = self.explicit_probe(c_target, e_seq)
        e_local, anchor_att = self.gated_latent_probe(c_target, e_global, interests)
        return e_global, e_local, interests, global_att, anchor_att

    def embed(self, seq, sid: int):
        """Serving-facing forward: the cached record plus its trace."""
        with no_grad():
            e_g, e_l, interests, g_att, a_att = self.embed_tensors(seq, sid)
        trace = ForwardTrace(
            global_scores=g_att.value[0].copy(),
            anchor_scores=a_att.value[0].copy(),
            e_global=e_g.value[0].copy(),
            e_local=e_l.value[0].copy(),
            interests=interests.value.copy(),
        )
        return UxsidEmbedding(e_global=trace.e_global, e_local=trace.e_local), trace

    def head_prob(self, features: Tensor) -> Tensor:
        """MLP head ending in a 2-logit softmax; returns the positive-class
        probability as a (1, 1) tensor."""
        x = features
        for w, b in self.p.head[:-1]:
            x = sigmoid(add(matmul(x, w), b))
        w, b = self.p.head[-1]
        logits = add(matmul(x, w), b)
        return matmul(softmax_rows(logits), self._positive_column)

    # -- example-level paths -------------------------------------------------

    def example_forward(self, ex, want_trace: bool = False):
        """Probability, anchor matrix, and optionally the trace for one example."""
        cfg = self.cfg
        seq = np.asarray(ex.seq, dtype=np.int64)
        sid = int(ex.target_sid[0])
        e_g, e_l, interests, g_att, a_att = self.embed_tensors(seq, sid)
        target_e = gather_rows(self.p.item_emb, [int(ex.target_item)])
        target_s = gather_rows(self.p.sid_emb, [sid])
        user_e = gather_rows(self.p.user_emb, [int(ex.user_id)])
        recent = seq[-cfg.short_window:]
        short_e = mean_rows(gather_rows(self.p.item_emb, recent))
        features = concat_cols([target_e, target_s, user_e, short_e, e_g, e_l])
        prob = self.head_prob(features)
        trace = None
        if want_trace:
            trace = ForwardTrace(
                global_scores=g_att.value[0].copy(),
                anchor_scores=a_att.value[0].copy(),
                e_global=e_g.value[0].copy(),
                e_local=e_l.value[0].copy(),
                interests=interests.value.copy(),
            )
        return prob, interests, trace

    def score_example(self, ex) -> float:
        with no_grad():
            prob, _, _ = self.example_forward(ex)
        return prob.value.item()

    def trace_example(self, ex) -> ForwardTrace:
        with no_grad():
            _, _, trace = self.example_forward(ex, want_trace=True)
        return trace

    def score_and_trace(self, ex):
        with no_grad():
            prob, _, trace = self.example_forward(ex, want_trace=True)
        return prob.value.item(), trace

    def user_group_loss(self, group):
        """Summed loss for several impressions of one user.

        The sequence side (embedding gather, anchor compression, probe
        keys and values) is target-independent, so it is built once and
        shared by every impression's probe heads. Equivalent to summing
        example_loss over the group, a few times faster at long L.
        """
        cfg, p = self.cfg, self.p
        first = group[0]
        seq = np.asarray(first.seq, dtype=np.int64)
        for ex in group[1:]:
            if ex.user_id != first.user_id or ex.seq is not first.seq:
                raise ValueError("user_group_loss expects one user's impressions")
        e_seq = self.sequence_embeddings(seq)
        interests = self.compress_interests(e_seq)
        probe_k = matmul(e_seq, p.probe_wk)
        probe_v = matmul(e_seq, p.probe_wv)
        local_k = matmul(interests, p.local_wk)
        local_v = matmul(interests, p.local_wv)
        user_e = gather_rows(p.user_emb, [int(first.user_id)])
        short_e = mean_rows(gather_rows(p.item_emb, seq[-cfg.short_window:]))
        inv_sqrt_d = 1.0 / math.sqrt(cfg.embed_dim)

        one = constant(np.ones((1, 1), dtype=cfg.dtype))
        total = None
        bce_sum = 0.0
        for ex in group:
            sid = int(ex.target_sid[0])
            c_target = gather_rows(p.sid_emb, [sid])
            g_att = softmax_rows(scale(nm.matmul_t(matmul(c_target, p.probe_wq), probe_k),
                                       inv_sqrt_d))
            e_global = matmul(g_att, probe_v)
            hidden = sigmoid(add(matmul(e_global, p.gate_w1), p.gate_b1))
            g_ctx = sigmoid(add(matmul(hidden, p.gate_w2), p.gate_b2))
            q_ref = mul(c_target, g_ctx)
            l_att = softmax_rows(scale(nm.matmul_t(matmul(q_ref, p.local_wq), local_k),
                                       inv_sqrt_d))
            e_local = matmul(l_att, local_v)
            target_e = gather_rows(p.item_emb, [int(ex.target_item)])
            features = concat_cols([target_e, c_target, user_e, short_e, e_global, e_local])
            prob = clamp(self.head_prob(features), 1e-7, 1.0 - 1e-7)
            bce = scale(log(prob), -1.0) if int(ex.label) == 1 \
                else scale(log(sub(one, prob)), -1.0)
            bce_sum += bce.value.item()
            total = bce if total is None else add(total, bce)
        ortho_value = 0.0
        if cfg.ortho_weight != 0.0:
            ortho = ortho_loss(interests, cfg.ortho_mode)
            ortho_value = float(ortho.value)
            total = add(total, scale(ortho, cfg.ortho_weight * len(group)))
        else:
            ortho_value = ortho_loss(interests.value, cfg.ortho_mode)
        parts = {"bce": bce_sum, "ortho": ortho_value * len(group)}
        return total, parts

    def example_loss(self, ex):
        """Scalar loss for one example: clamped BCE plus the weighted
        anchor-diversity penalty. The trainer streams these through
        backward one at a time so only one example's graph is ever live."""
        cfg = self.cfg
        prob, interests, _ = self.example_forward(ex)
        p = clamp(prob, 1e-7, 1.0 - 1e-7)
        if int(ex.label) == 1:
            bce = scale(log(p), -1.0)
        else:
            one = constant(np.ones((1, 1), dtype=cfg.dtype))
            bce = scale(log(sub(one, p)), -1.0)
        if cfg.ortho_weight != 0.0:
            ortho = ortho_loss(interests, cfg.ortho_mode)
            loss = add(bce, scale(ortho, cfg.ortho_weight))
            ortho_value = float(ortho.value)
        else:
            loss = bce
            ortho_value = ortho_loss(interests.value, cfg.ortho_mode)
        return loss, {"bce": bce.value.item(), "ortho": ortho_value}

    def batch_loss(self, batch):
        """Mean clamped BCE plus the weighted mean anchor-diversity penalty."""
        if not batch:
            raise ValueError("empty batch")
        cfg = self.cfg
        probs, ortho_terms, interest_values = [], [], []
        for ex in batch:
            prob, interests, _ = self.example_forward(ex)
            probs.append(clamp(prob, 1e-7, 1.0 - 1e-7))
            interest_values.append(interests.value)
            if cfg.ortho_weight != 0.0:
                ortho_terms.append(ortho_loss(interests, cfg.ortho_mode))
        pvec = concat_rows(probs)
        labels = np.array([ex.label for ex in batch], dtype=cfg.dtype).reshape(-1, 1)
        y = constant(labels)
        one_minus_y = constant(1.0 - labels)
        ones = constant(np.ones_like(labels))
        ll = add(mul(y, log(pvec)), mul(one_minus_y, log(sub(ones, pvec))))
        bce = scale(mean_all(ll), -1.0)
        if cfg.ortho_weight != 0.0:
            total = ortho_terms[0]
            for term in ortho_terms[1:]:
                total = add(total, term)
            ortho_mean = scale(total, 1.0 / len(ortho_terms))
            loss = add(bce, scale(ortho_mean, cfg.ortho_weight))
            ortho_value = float(ortho_mean.value)
        else:
            loss = bce
            ortho_value = float(np.mean([
                ortho_loss(v, cfg.ortho_mode) for v in interest_values
            ]))
        stats = {"bce": bce.value.item(), "ortho": ortho_value}
        return loss, stats

    def params_list(self) -> list[Tensor]:
        return self.p.all()

    @property
    def config(self) -> ModelConfig:
        return self.cfg


def joint_loss(model: UxsidModel, batch, ortho_weight: float | None = None):
    """Loss surface used by the trainer. ortho_weight overrides the config
    value when given (the sensitivity experiments toggle it)."""
    if ortho_weight is None:
        return model.batch_loss(batch)
    original = model.cfg.ortho_weight
    model.cfg.ortho_weight = ortho_weight
    try:
        return model.batch_loss(batch)
    finally:
        model.cfg.ortho_weight = original


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: UxsidModel, path) -> None:
    cfg_json = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    params = model.params_list()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION),
              struct.pack("<I", len(cfg_json)), cfg_json,
              struct.pack("<I", len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        value = np.ascontiguousarray(p.value, dtype="<f4")
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> UxsidModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 6
    (cfg_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    cfg = ModelConfig.from_dict(json.loads(blob[offset : offset + cfg_len]))
    offset += cfg_len
    (n_params,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    model = UxsidModel(cfg)
    params = model.params_list()
    if n_params != len(params):
        raise ValueError(f"checkpoint has {n_params} params, model expects {len(params)}")
    for p in params:
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        if name != p.name:
            raise ValueError(f"checkpoint param order mismatch: {name} != {p.name}")
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        value = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        if tuple(shape) != p.value.shape:
            raise ValueError(f"shape mismatch for {name}: {shape} != {p.value.shape}")
        p.value[...] = value.reshape(shape).astype(cfg.dtype)
        p.grad = np.zeros_like(p.value)
    if offset != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return model
