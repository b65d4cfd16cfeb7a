"""Comparison models: truncated target attention and two-stage retrieval.

Both share the bottom layers with the main model (embedding tables, the
same feature composition, the same head shape) and differ only in how
the behavior sequence is summarized: a DIN-style attention over the most
recent window, or a SIM-style general search (hard category match or
soft inner-product retrieval) followed by exact attention over the
retrieved subsequence. Their online retrieval cost is linear in the
history length, which is exactly the contrast the latency benchmark
draws against the cached path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, single_head_attention
from .numerics import (
    Tensor, add, clamp, concat_cols, concat_rows, constant, gather_rows, log,
    matmul, mean_all, mean_rows, mul, no_grad, param, scale, sigmoid,
    softmax_rows, sub,
)


@dataclass
class RetrievedSubsequence:
    """Indices into the original sequence chosen by a general search unit."""

    indices: np.ndarray
    scores: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def gsu_hard(seq_categories, target_category: int, r: int) -> RetrievedSubsequence:
    """The most recent r behaviors sharing the target's category, in time
    order; fewer when matches are scarce."""
    if r < 1:
        raise ValueError("retrieval quota must be >= 1")
    seq_categories = np.asarray(seq_categories)
    matches = np.nonzero(seq_categories == target_category)[0]
    return RetrievedSubsequence(indices=matches[-r:])


def gsu_soft(seq_embs: np.ndarray, target_emb: np.ndarray, r: int) -> RetrievedSubsequence:
    """Top-r behaviors by inner product with the target embedding; score
    ties break toward the more recent position."""
    if r < 1:
        raise ValueError("retrieval quota must be >= 1")
    scores = seq_embs @ np.asarray(target_emb).reshape(-1)
    positions = np.arange(scores.shape[0])
    order = np.lexsort((-positions, -scores))
    top = order[:r]
    return RetrievedSubsequence(indices=top, scores=scores[top])


def esu_attention(retrieved_embs, target_emb, attn, dim: int):
    """Single-head target attention over a retrieved subsequence.

    Returns (vector, empty_flag); an empty retrieval yields zeros and a
    raised flag rather than an error, since a serving path must degrade.
    """
    wq, wk, wv = attn
    n_rows = retrieved_embs.value.shape[0] if isinstance(retrieved_embs, Tensor) \
        else np.asarray(retrieved_embs).shape[0]
    if n_rows == 0:
        d_out = wv.value.shape[1] if isinstance(wv, Tensor) else wv.shape[1]
        zero = np.zeros((1, d_out), dtype=np.asarray(
            wv.value if isinstance(wv, Tensor) else wv).dtype)
        return (constant(zero) if isinstance(retrieved_embs, Tensor) else zero), True
    out, _ = single_head_attention(target_emb, retrieved_embs, retrieved_embs,
                                   wq, wk, wv, dim)
    return out, False


def truncated_target_attention(seq_embs, target_emb, n: int, attn, dim: int):
    """DIN-style attention restricted to the last n behaviors."""
    if n < 1:
        raise ValueError("window must be >= 1")
    n_rows = seq_embs.value.shape[0] if isinstance(seq_embs, Tensor) \
        else np.asarray(seq_embs).shape[0]
    if n_rows == 0:
        raise ValueError("behavior sequence is empty")
    window = gather_rows(seq_embs, np.arange(max(0, n_rows - n), n_rows)) \
        if isinstance(seq_embs, Tensor) else np.asarray(seq_embs)[-n:]
    out, _ = esu_attention(window, target_emb, attn, dim)
    return out


# ---------------------------------------------------------------------------
# Trainable baseline models (shared bottom layers, different summarizer)


class _BaselineParams:
    def __init__(self, cfg: ModelConfig):
        from .model import _table, _xavier, _zeros  # same init scheme as the main model

        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        d, dt = cfg.embed_dim, cfg.dtype
        self.item_emb = param("item_emb", _table(rng, cfg.n_items, d, dt))
        self.sid_emb = param("sid_emb", _table(rng, cfg.n_sids, d, dt))
        self.user_emb = param("user_emb", _table(rng, cfg.n_users, d, dt))
        self.att_wq = param("att_wq", _xavier(rng, d, d, dt))
        self.att_wk = param("att_wk", _xavier(rng, d, d, dt))
        self.att_wv = param("att_wv", _xavier(rng, d, d, dt))
        self.head = []
        widths = (5 * d,) + cfg.head_sizes
        for i in range(len(cfg.head_sizes)):
            self.head.append((
                param(f"head_w{i}", _xavier(rng, widths[i], widths[i + 1], dt)),
                param(f"head_b{i}", _zeros(1, widths[i + 1], dtype=dt)),
            ))

    def all(self):
        out = [self.item_emb, self.sid_emb, self.user_emb,
               self.att_wq, self.att_wk, self.att_wv]
        for w, b in self.head:
            out.extend([w, b])
        return out


class BaselineModel:
    """DIN-style truncation ("din_trunc") or SIM retrieval ("sim_hard",
    "sim_soft"). Hard matching needs the per-item category array."""

    def __init__(self, cfg: ModelConfig, kind: str, item_categories=None,
                 window: int = 100, retrieve_n: int = 100):
        if kind not in ("din_trunc", "sim_hard", "sim_soft"):
            raise ValueError(f"unknown baseline kind {kind!r}")
        if kind == "sim_hard" and item_categories is None:
            raise ValueError("sim_hard needs item categories")
        self.cfg = cfg
        self.kind = kind
        self.window = window
        self.retrieve_n = retrieve_n
        self.item_categories = None if item_categories is None \
            else np.asarray(item_categories)
        self.p = _BaselineParams(cfg)
        pos = np.zeros((2, 1), dtype=cfg.dtype)
        pos[1, 0] = 1.0
        self._positive_column = constant(pos)

    def _attn(self):
        return (self.p.att_wq, self.p.att_wk, self.p.att_wv)

    def _select_indices(self, ex, seq: np.ndarray) -> np.ndarray:
        if self.kind == "din_trunc":
            return np.arange(max(0, len(seq) - self.window), len(seq))
        if self.kind == "sim_hard":
            target_cat = int(self.item_categories[int(ex.target_item)])
            return gsu_hard(self.item_categories[seq], target_cat, self.retrieve_n).indices
        target = self.p.item_emb.value[int(ex.target_item)]
        return gsu_soft(self.p.item_emb.value[seq], target, self.retrieve_n).indices

    def example_forward(self, ex):
        cfg = self.cfg
        seq = np.asarray(ex.seq, dtype=np.int64)
        if seq.size == 0:
            raise ValueError("behavior sequence is empty")
        idx = self._select_indices(ex, seq)
        target_e = gather_rows(self.p.item_emb, [int(ex.target_item)])
        sid = int(ex.target_sid[0])
        target_s = gather_rows(self.p.sid_emb, [sid])
        # Same query construction as the online ranker: item plus SID
        # embedding, so the shared bottom layers really are shared.
        query = add(target_e, target_s)
        if len(idx):
            retrieved = gather_rows(self.p.item_emb, seq[idx])
            summary, _ = esu_attention(retrieved, query, self._attn(), cfg.embed_dim)
        else:
            summary = constant(np.zeros((1, cfg.embed_dim), dtype=cfg.dtype))
        user_e = gather_rows(self.p.user_emb, [int(ex.user_id)])
        short_e = mean_rows(gather_rows(self.p.item_emb, seq[-cfg.short_window:]))
        features = concat_cols([target_e, target_s, user_e, short_e, summary])
        x = features
        for w, b in self.p.head[:-1]:
            x = sigmoid(add(matmul(x, w), b))
        w, b = self.p.head[-1]
        prob = matmul(softmax_rows(add(matmul(x, w), b)), self._positive_column)
        return prob, None, None

    def score_example(self, ex) -> float:
        with no_grad():
            prob, _, _ = self.example_forward(ex)
        return prob.value.item()

    def example_loss(self, ex):
        prob, _, _ = self.example_forward(ex)
        p = clamp(prob, 1e-7, 1.0 - 1e-7)
        if int(ex.label) == 1:
            bce = scale(log(p), -1.0)
        else:
            one = constant(np.ones((1, 1), dtype=self.cfg.dtype))
            bce = scale(log(sub(one, p)), -1.0)
        return bce, {"bce": bce.value.item(), "ortho": 0.0}

    def batch_loss(self, batch):
        if not batch:
            raise ValueError("empty batch")
        probs = []
        for ex in batch:
            prob, _, _ = self.example_forward(ex)
            probs.append(clamp(prob, 1e-7, 1.0 - 1e-7))
        pvec = concat_rows(probs)
        labels = np.array([ex.label for ex in batch], dtype=self.cfg.dtype).reshape(-1, 1)
        y = constant(labels)
        one_minus_y = constant(1.0 - labels)
        ones = constant(np.ones_like(labels))
        ll = add(mul(y, log(pvec)), mul(one_minus_y, log(sub(ones, pvec))))
        loss = scale(mean_all(ll), -1.0)
        return loss, {"bce": loss.value.item(), "ortho": 0.0}

    def params_list(self):
        return self.p.all()

    @property
    def config(self) -> ModelConfig:
        return self.cfg


def scaling_curves(dataset, cfg: ModelConfig, lengths,
                   kinds=("uxsid", "din_trunc", "sim_hard", "sim_soft"),
                   window: int = 100, retrieve_n: int = 100,
                   recall_k: int = 50, verbose: bool = False) -> list:
    """Train every requested model at every visible history length and
    report test AUC per cell (the scaling-curve data)."""
    from .model import UxsidModel
    from .synthdata import truncate_view
    from .trainer import evaluate, train

    rows = []
    for length in lengths:
        view = truncate_view(dataset, length)
        for kind in kinds:
            if kind == "uxsid":
                model = UxsidModel(cfg)
            else:
                model = BaselineModel(cfg, kind, item_categories=dataset.item_categories,
                                      window=window, retrieve_n=retrieve_n)
            result = train(view, cfg, model=model, eval_recall_k=recall_k)
            metrics = evaluate(result.model, [ex for ex in view.test if len(ex.seq)],
                               seq_sids_by_user=view.seq_sids or None,
                               recall_k=recall_k)
            rows.append({
                "model": kind, "length": length,
                "auc": metrics["auc"], "uauc": metrics["uauc"],
                "wuauc": metrics["wuauc"], "int_r_at_k": metrics["int_r_at_k"],
            })
            if verbose:
                print(f"len {length} {kind}: auc {metrics['auc']:.4f}")
    return rows
