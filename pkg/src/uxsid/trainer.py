"""Mini-batch training with Adam, plus the ranking metrics.

The loop is deliberately plain: seeded shuffling, streamed per-example
losses, backward, bias-corrected Adam, early stopping on validation AUC.
Any model exposing example_loss / score_example / params_list trains
here, so the baselines reuse it unchanged; models that also expose
user_group_loss get their impressions grouped per user so the shared
sequence-side graph is built once.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .numerics import backward, zero_grad


@dataclass
class TrainingExample:
    user_id: int
    seq: np.ndarray  # item ids, time order
    target_item: int
    target_sid: tuple | None
    label: int


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    skipped: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m=[np.zeros_like(p.value) for p in params],
                   v=[np.zeros_like(p.value) for p in params])


def adam_step(params, grads, state: AdamState, lr: float = 0.001,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update. A non-finite gradient skips the whole
    step and bumps the skip counter instead of corrupting the parameters."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for g in grads:
        if not np.isfinite(g).all():
            state.skipped += 1
            return
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainResult:
    model: object
    log: list  # one dict per epoch
    diverged: bool = False
    stopped_early: bool = False


def train(dataset, config, model=None, log_path=None, eval_recall_k: int = 50,
          verbose: bool = False) -> TrainResult:
    """Optimize a model on the dataset's train split.

    Per epoch the log records train loss, the diversity term, and the
    validation AUC family. Training aborts (restoring the best snapshot)
    if the loss goes non-finite, and stops early when validation AUC has
    not improved for config.patience epochs.
    """
    from .model import UxsidModel  # local import keeps module load light

    if model is None:
        model = UxsidModel(config)
    cfg = model.config
    train_split = [ex for ex in dataset.train if len(ex.seq) > 0]
    if not train_split:
        raise ValueError("train split is empty")
    val_split = [ex for ex in dataset.val if len(ex.seq) > 0]
    seq_sids = getattr(dataset, "seq_sids", None)

    params = model.params_list()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    log_rows = []
    best = None  # (val_auc, epoch, snapshot)
    diverged = False
    stopped_early = False

    groups = _user_groups(train_split) if hasattr(model, "user_group_loss") else None

    for epoch in range(1, cfg.n_epochs + 1):
        losses, orthos = [], []
        if groups is not None:
            batches = _grouped_batches(groups, cfg.batch_size, rng)
        else:
            order = rng.permutation(len(train_split))
            batches = ([[train_split[i]]
                        for i in order[start : start + cfg.batch_size]]
                       for start in range(0, len(order), cfg.batch_size))
        for batch in batches:
            loss_value, ortho_value = _batch_step(model, batch, params, state, cfg.lr)
            if not np.isfinite(loss_value):
                diverged = True
                break
            losses.append(loss_value)
            orthos.append(ortho_value)
        if diverged:
            break

        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "ortho_term": float(np.mean(orthos)),
            "val_auc": "", "val_uauc": "", "val_wuauc": "", "int_r_at_50": "",
        }
        if val_split:
            metrics = evaluate(model, val_split, seq_sids_by_user=seq_sids,
                               recall_k=eval_recall_k)
            row.update(
                val_auc=metrics["auc"], val_uauc=metrics["uauc"],
                val_wuauc=metrics["wuauc"], int_r_at_50=metrics["int_r_at_k"],
            )
            auc = metrics["auc"]
            if auc is not None:
                if best is None or auc > best[0]:
                    best = (auc, epoch, [p.value.copy() for p in params])
                elif epoch - best[1] >= cfg.patience:
                    stopped_early = True
        log_rows.append(row)
        if verbose:
            print(f"epoch {epoch}: loss {row['train_loss']:.4f} val_auc {row['val_auc']}")
        if stopped_early:
            break

    if best is not None:
        for p, snap in zip(params, best[2]):
            p.value[...] = snap
    if log_path is not None:
        write_training_log(log_rows, log_path)
    return TrainResult(model=model, log=log_rows, diverged=diverged,
                       stopped_early=stopped_early)


def _user_groups(split):
    """Group examples by user when each user's impressions share one
    sequence object (so the sequence-side graph can be built once)."""
    groups = {}
    for ex in split:
        groups.setdefault(ex.user_id, []).append(ex)
    for exs in groups.values():
        if any(ex.seq is not exs[0].seq for ex in exs):
            return None
    return list(groups.values())


def _grouped_batches(groups, batch_size: int, rng):
    """Batches of whole user groups totalling roughly batch_size examples."""
    order = rng.permutation(len(groups))
    batch, count = [], 0
    for i in order:
        batch.append(groups[i])
        count += len(groups[i])
        if count >= batch_size:
            yield batch
            batch, count = [], 0
    if batch:
        yield batch


def _batch_step(model, batch, params, state, lr: float):
    """One optimizer step over a mini-batch of user groups.

    Groups stream through backward one at a time with their summed
    losses scaled by 1/B, which accumulates exactly the gradient of the
    batch mean while keeping only one group's graph in memory.
    """
    from .numerics import scale

    zero_grad(params)
    total = sum(len(g) for g in batch)
    inv = 1.0 / total
    total_loss, total_ortho = 0.0, 0.0
    for group in batch:
        if len(group) > 1 and hasattr(model, "user_group_loss"):
            loss, parts = model.user_group_loss(group)
        else:
            loss, parts = model.example_loss(group[0]) if len(group) == 1 \
                else _summed_example_loss(model, group)
        value = loss.value.item()
        if not np.isfinite(value):
            return float("nan"), float("nan")
        backward(scale(loss, inv))
        total_loss += value * inv
        total_ortho += parts["ortho"] * inv
    adam_step(params, [p.grad for p in params], state, lr=lr)
    return total_loss, total_ortho


def _summed_example_loss(model, group):
    from .numerics import add

    total, bce, ortho = None, 0.0, 0.0
    for ex in group:
        loss, parts = model.example_loss(ex)
        total = loss if total is None else add(total, loss)
        bce += parts["bce"]
        ortho += parts["ortho"]
    return total, {"bce": bce, "ortho": ortho}


def write_training_log(rows, path) -> None:
    cols = ["epoch", "train_loss", "ortho_term", "val_auc", "val_uauc",
            "val_wuauc", "int_r_at_50"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _fmt(row.get(c, "")) for c in cols})


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.6f}"
    return "" if x is None else x


# ---------------------------------------------------------------------------
# Metrics


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def eval_auc(scores, labels):
    """Rank-based AUC with half credit for ties. Returns None when the
    labels are single-class (AUC undefined)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _group_by_user(scores, labels, user_ids):
    groups = defaultdict(lambda: ([], []))
    for s, y, u in zip(scores, labels, user_ids):
        groups[u][0].append(s)
        groups[u][1].append(y)
    return groups


def eval_uauc(scores, labels, user_ids):
    """Unweighted mean of per-user AUC over users with both classes."""
    per_user = []
    for s, y in _group_by_user(scores, labels, user_ids).values():
        auc = eval_auc(s, y)
        if auc is not None:
            per_user.append(auc)
    return float(np.mean(per_user)) if per_user else None


def eval_wuauc(scores, labels, user_ids):
    """Impression-count-weighted mean of per-user AUC, same eligibility."""
    total, weight = 0.0, 0
    for s, y in _group_by_user(scores, labels, user_ids).values():
        auc = eval_auc(s, y)
        if auc is not None:
            total += auc * len(s)
            weight += len(s)
    return float(total / weight) if weight else None


def interest_recall_at_k(trace, seq_sids, target_sid: int, k: int) -> float:
    """Fraction of the top-k behaviors (by global probe attention) whose
    first-layer SID matches the target's. Score ties break toward the
    earlier position."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(trace.global_scores, dtype=np.float64)
    seq_sids = np.asarray(seq_sids)
    if scores.shape[0] != seq_sids.shape[0]:
        raise ValueError("scores and sequence SIDs disagree on length")
    top = np.argsort(-scores, kind="stable")[:k]
    hits = int((seq_sids[top] == target_sid).sum())
    return hits / min(k, scores.shape[0])


def evaluate(model, examples, seq_sids_by_user=None, recall_k: int = 50) -> dict:
    """Score a split and compute the metric family. Int.R@k is reported
    when per-user behavior SIDs are supplied or derivable from examples
    carrying a seq_sids attribute; otherwise it is None."""
    want_traces = seq_sids_by_user is not None and hasattr(model, "score_and_trace")
    scores, labels, users, recalls = [], [], [], []
    for ex in examples:
        if want_traces:
            score, trace = model.score_and_trace(ex)
            recalls.append(interest_recall_at_k(
                trace, seq_sids_by_user[ex.user_id], int(ex.target_sid[0]), recall_k))
        else:
            score = model.score_example(ex)
        scores.append(score)
        labels.append(ex.label)
        users.append(ex.user_id)
    return {
        "auc": eval_auc(scores, labels),
        "uauc": eval_uauc(scores, labels, users),
        "wuauc": eval_wuauc(scores, labels, users),
        "int_r_at_k": float(np.mean(recalls)) if recalls else None,
        "k": recall_k,
        "n": len(examples),
    }
