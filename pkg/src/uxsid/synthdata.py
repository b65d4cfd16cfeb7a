"""Synthetic-world generation and dataset I/O.

The generated world has clustered item content vectors, users with a
small set of interest clusters, and ultra-long behavior sequences. One
interest per user is the "distal" one: its behaviors are planted only in
an early window of the sequence, so any model that truncates history to
recent items provably cannot see the evidence for it. Impression labels
follow a known noisy rule, which makes the Bayes-optimal AUC of the
world a closed-form quantity that is emitted into the metadata.

Per-user randomness comes from seeds derived as (world seed, user id),
so generation order does not affect the output.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .trainer import TrainingExample


@dataclass
class WorldConfig:
    n_clusters: int = 32
    items_per_cluster: int = 100
    content_dim: int = 16
    cluster_spread: float = 0.1
    n_users: int = 2000
    interests_per_user: int = 4
    seq_len: int = 2000
    distal_frac: float = 0.05
    positive_rate: float = 0.5
    label_noise: float = 0.1
    n_impressions: int = 6
    n_val: int = 1
    n_test: int = 1
    seed: int = 0

    def __post_init__(self):
        if min(self.n_clusters, self.items_per_cluster, self.content_dim,
               self.n_users, self.interests_per_user, self.seq_len,
               self.n_impressions) < 1:
            raise ValueError("all counts must be >= 1")
        if not (0.0 <= self.label_noise < 0.5):
            raise ValueError("label_noise must lie in [0, 0.5)")
        if not (0.0 < self.positive_rate < 1.0):
            raise ValueError("positive_rate must lie in (0, 1)")
        if not (0.0 <= self.distal_frac < 1.0):
            raise ValueError("distal_frac must lie in [0, 1)")
        if self.interests_per_user + 1 > self.n_clusters:
            raise ValueError("need at least interests_per_user + 1 clusters")
        if self.n_val + self.n_test >= self.n_impressions:
            raise ValueError("n_impressions must exceed n_val + n_test")

    @property
    def n_items(self) -> int:
        return self.n_clusters * self.items_per_cluster

    @property
    def distal_window(self) -> tuple:
        """Planted positions, counted from the sequence start."""
        return (0, math.ceil(self.distal_frac * self.seq_len))


@dataclass
class Dataset:
    items: np.ndarray  # (n_items, content_dim) float32 content vectors
    item_categories: np.ndarray  # ground-truth cluster per item
    sequences: dict  # user id -> item id array, time order
    train: list
    val: list
    test: list
    meta: dict
    item_sids: np.ndarray | None = None  # (n_items, levels) after attach_sids
    seq_sids: dict = field(default_factory=dict)  # user id -> first-layer SIDs

    @property
    def users(self) -> list:
        return sorted(self.sequences)

    @property
    def n_items(self) -> int:
        return self.items.shape[0]


def bayes_optimal_auc(positive_rate: float, label_noise: float) -> float:
    """AUC of the label-generating rule itself, from the confusion between
    in-interest and out-of-interest targets under the flip noise."""
    q, eps = positive_rate, label_noise
    p_in_given_pos = q * (1 - eps) / (q * (1 - eps) + (1 - q) * eps)
    p_out_given_neg = (1 - q) * (1 - eps) / (q * eps + (1 - q) * (1 - eps))
    a, b = p_in_given_pos, p_out_given_neg
    return a * b + 0.5 * (a * (1 - b) + (1 - a) * b)


def generate(config: WorldConfig) -> Dataset:
    """Build the full synthetic world for one seed."""
    g = config.n_clusters
    rng_world = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    centers = rng_world.normal(0.0, 1.0, size=(g, config.content_dim))
    items = np.empty((config.n_items, config.content_dim), dtype=np.float32)
    categories = np.empty(config.n_items, dtype=np.int32)
    for c in range(g):
        lo = c * config.items_per_cluster
        hi = lo + config.items_per_cluster
        noise = rng_world.normal(0.0, config.cluster_spread,
                                 size=(config.items_per_cluster, config.content_dim))
        items[lo:hi] = (centers[c] + noise).astype(np.float32)
        categories[lo:hi] = c

    distal_lo, distal_hi = config.distal_window
    sequences = {}
    train, val, test = [], [], []
    user_interests = {}
    for uid in range(config.n_users):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1, uid]))
        interests = rng.choice(g, size=config.interests_per_user, replace=False)
        proximal = interests[:-1]
        distal = int(interests[-1])
        user_interests[uid] = [int(c) for c in interests]
        weights = rng.dirichlet(np.full(len(proximal), 2.0))

        clusters = proximal[rng.choice(len(proximal), size=config.seq_len, p=weights)]
        clusters[distal_lo:distal_hi] = distal
        offsets = rng.integers(config.items_per_cluster, size=config.seq_len)
        seq = clusters.astype(np.int64) * config.items_per_cluster + offsets
        sequences[uid] = seq

        interest_set = set(int(c) for c in interests)
        non_interest = [c for c in range(g) if c not in interest_set]
        impressions = []
        for _ in range(config.n_impressions):
            if rng.random() < config.positive_rate:
                cluster = int(interests[rng.integers(len(interests))])
                p_click = 1.0 - config.label_noise
            else:
                cluster = int(non_interest[rng.integers(len(non_interest))])
                p_click = config.label_noise
            item = cluster * config.items_per_cluster + int(rng.integers(config.items_per_cluster))
            label = int(rng.random() < p_click)
            impressions.append(TrainingExample(
                user_id=uid, seq=seq, target_item=item, target_sid=None, label=label))
        cut_test = len(impressions) - config.n_test
        cut_val = cut_test - config.n_val
        train.extend(impressions[:cut_val])
        val.extend(impressions[cut_val:cut_test])
        test.extend(impressions[cut_test:])

    meta = {
        "world": asdict(config),
        "bayes_auc": bayes_optimal_auc(config.positive_rate, config.label_noise),
        "n_items": config.n_items,
        # ground truth for analysis: per user, interest clusters with the
        # distal (planted-only) one last
        "user_interests": {str(uid): v for uid, v in user_interests.items()},
        "format": 1,
    }
    return Dataset(items=items, item_categories=categories, sequences=sequences,
                   train=train, val=val, test=test, meta=meta)


def attach_sids(dataset: Dataset, codebook) -> Dataset:
    """Encode every item through the codebook and fill example SID tuples."""
    from .sidgen import encode_all

    codes = encode_all(codebook, dataset.items)
    dataset.item_sids = codes
    dataset.seq_sids = {uid: codes[seq, 0] for uid, seq in dataset.sequences.items()}
    for split in (dataset.train, dataset.val, dataset.test):
        for ex in split:
            ex.target_sid = tuple(int(c) for c in codes[ex.target_item])
    return dataset


def truncate_view(dataset: Dataset, length: int) -> Dataset:
    """A view of the same world where only the most recent `length`
    behaviors are visible (the scaling-curve axis)."""
    if length < 1:
        raise ValueError("view length must be >= 1")
    sequences = {uid: seq[-length:] for uid, seq in dataset.sequences.items()}

    def cut(split):
        return [TrainingExample(ex.user_id, sequences[ex.user_id], ex.target_item,
                                ex.target_sid, ex.label) for ex in split]

    seq_sids = {uid: sids[-length:] for uid, sids in dataset.seq_sids.items()}
    return Dataset(items=dataset.items, item_categories=dataset.item_categories,
                   sequences=sequences, train=cut(dataset.train), val=cut(dataset.val),
                   test=cut(dataset.test), meta=dataset.meta,
                   item_sids=dataset.item_sids, seq_sids=seq_sids)


# ---------------------------------------------------------------------------
# Files: items.jsonl + interactions.jsonl + meta.json


def save_dataset(dataset: Dataset, out_dir) -> list:
    """Write the three dataset files; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    items_path = os.path.join(out_dir, "items.jsonl")
    inter_path = os.path.join(out_dir, "interactions.jsonl")
    meta_path = os.path.join(out_dir, "meta.json")

    with open(items_path, "w", encoding="utf-8") as fh:
        for i in range(dataset.n_items):
            row = {
                "item_id": i,
                "vector": [float(x) for x in dataset.items[i]],
                "category": int(dataset.item_categories[i]),
            }
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")

    examples_by_user = {}
    for split_name, split in (("train", dataset.train), ("val", dataset.val),
                              ("test", dataset.test)):
        for ex in split:
            examples_by_user.setdefault(ex.user_id, []).append((split_name, ex))

    with open(inter_path, "w", encoding="utf-8") as fh:
        for uid in sorted(dataset.sequences):
            seq = dataset.sequences[uid]
            for ts, item in enumerate(seq):
                fh.write(json.dumps(
                    {"item_id": int(item), "label": None, "ts": ts, "user_id": int(uid)},
                    sort_keys=True, separators=(",", ":")) + "\n")
            for offset, (_, ex) in enumerate(examples_by_user.get(uid, [])):
                fh.write(json.dumps(
                    {"item_id": int(ex.target_item), "label": int(ex.label),
                     "ts": len(seq) + offset, "user_id": int(uid)},
                    sort_keys=True, separators=(",", ":")) + "\n")

    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(dataset.meta, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return [items_path, inter_path, meta_path]


def load_dataset(data_dir, n_val: int | None = None, n_test: int | None = None) -> Dataset:
    """Rebuild a Dataset from a directory written by save_dataset, or from
    any JSONL export with the same schema.

    Rows with a null label are behavior events; labeled rows are
    impressions. When every row is labeled (external exports), each
    impression's behavior sequence is the items of the interactions that
    precede it in time. Splits are leave-last-out per user.
    """
    items_path = os.path.join(data_dir, "items.jsonl")
    inter_path = os.path.join(data_dir, "interactions.jsonl")
    meta_path = os.path.join(data_dir, "meta.json")

    from .sidgen import load_content_vectors

    content = load_content_vectors(items_path)
    ids = [cv.item_id for cv in content]
    if ids != list(range(len(ids))):
        raise ValueError(f"{items_path}: item ids must be dense starting at 0")
    items = np.stack([cv.z for cv in content])
    categories = np.array([cv.category for cv in content], dtype=np.int32)

    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    world = meta.get("world", {})
    if n_val is None:
        n_val = int(world.get("n_val", 1))
    if n_test is None:
        n_test = int(world.get("n_test", 1))

    behaviors, impressions = {}, {}
    with open(inter_path, "r", encoding="utf-8") as fh:
        count = 0
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                uid = int(row["user_id"])
                item = int(row["item_id"])
                ts = int(row["ts"])
                label = row["label"]
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{inter_path}: line {lineno}: {exc}") from exc
            if not (0 <= item < len(ids)):
                raise ValueError(f"{inter_path}: line {lineno}: item {item} has no content vector")
            if label is None:
                behaviors.setdefault(uid, []).append((ts, item))
            else:
                impressions.setdefault(uid, []).append((ts, item, int(label)))
            count += 1
    if count == 0:
        raise ValueError(f"{inter_path}: no interactions found")

    sequences = {}
    train, val, test = [], [], []
    for uid in sorted(set(behaviors) | set(impressions)):
        rows = sorted(impressions.get(uid, []))
        if uid in behaviors:
            seq = np.array([item for _, item in sorted(behaviors[uid])], dtype=np.int64)
            user_examples = [
                TrainingExample(uid, seq, item, None, label) for _, item, label in rows
            ]
        else:
            seq = np.array([item for _, item, _ in rows], dtype=np.int64)
            user_examples = [
                TrainingExample(uid, seq[:i], item, None, label)
                for i, (_, item, label) in enumerate(rows)
            ]
        sequences[uid] = seq
        cut_test = max(len(user_examples) - n_test, 0)
        cut_val = max(cut_test - n_val, 0)
        train.extend(user_examples[:cut_val])
        val.extend(user_examples[cut_val:cut_test])
        test.extend(user_examples[cut_test:])
    return Dataset(items=items, item_categories=categories, sequences=sequences,
                   train=train, val=val, test=test, meta=meta)
