"""Semantic-ID generation: residual k-means codebooks over item content vectors.

Items arrive as continuous content vectors (from a JSONL export or the
synthetic world). A stack of codebooks is trained level by level, each
level clustering the residuals left by the levels before it. Encoding an
item walks the levels greedily, picking the nearest codeword at each
step; the resulting index tuple is the item's semantic ID and its first
entry is the coarse code used as the target-side query everywhere else.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

CODEBOOK_MAGIC = b"UXCB"
CODEBOOK_VERSION = 1


@dataclass
class ContentVector:
    item_id: int
    z: np.ndarray
    category: int = 0


@dataclass
class KmeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int


@dataclass
class Codebook:
    """Per-level codeword tables plus the training inertia trajectory."""

    codewords: np.ndarray  # (levels, per_level, dim) float32
    inertia: list = field(default_factory=list)  # per-level SSE on the training set

    @property
    def levels(self) -> int:
        return self.codewords.shape[0]

    @property
    def per_level(self) -> int:
        return self.codewords.shape[1]

    @property
    def dim(self) -> int:
        return self.codewords.shape[2]


SidTuple = tuple  # (k_1, ..., k_M), each in [0, per_level)


def _sq_dists_to(codewords: np.ndarray, r: np.ndarray) -> np.ndarray:
    # Direct squared distances, not the expanded |a|^2 - 2ab + |b|^2 form:
    # the rounding of the direct form matches a per-codeword scan exactly,
    # which keeps tie-breaking reproducible against an exhaustive oracle.
    diff = codewords - r
    return (diff * diff).sum(axis=1)


def kmeans(points: np.ndarray, j: int, max_iter: int = 100, tol: float = 1e-6,
           seed: int = 0) -> KmeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Terminates when the relative inertia change drops below tol or after
    max_iter rounds, then runs a final assignment pass so the reported
    assignments are nearest-centroid. Empty clusters are reseeded to the
    point farthest from its current centroid. Deterministic per seed.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("kmeans needs a nonempty (n, d) point array")
    if j < 1:
        raise ValueError("cluster count must be >= 1")
    n = points.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([seed]))

    centroids = _init_plus_plus(points, min(j, n), rng)
    if j > n:
        centroids = _pad_farthest(points, centroids, j)

    prev_inertia = None
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        assign, dists = _assign(points, centroids)
        centroids, assign = _repair_empty(points, centroids, assign, dists)
        for c in range(j):
            mask = assign == c
            if mask.any():
                centroids[c] = points[mask].mean(axis=0)
        inertia = float(_assign(points, centroids)[1].sum())
        if prev_inertia is not None:
            denom = max(prev_inertia, np.finfo(np.float64).tiny)
            if abs(prev_inertia - inertia) / denom < tol:
                prev_inertia = inertia
                break
        prev_inertia = inertia

    assign, dists = _assign(points, centroids)
    return KmeansResult(centroids=centroids, assignments=assign,
                        inertia=float(dists.sum()), n_iter=n_iter)


def _assign(points, centroids):
    # Expanded form keeps memory at (n, j) instead of (n, j, d).
    d2 = (
        (points * points).sum(axis=1, keepdims=True)
        - 2.0 * (points @ centroids.T)
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    assign = d2.argmin(axis=1)
    return assign, d2[np.arange(points.shape[0]), assign]


def _init_plus_plus(points, j, rng):
    n = points.shape[0]
    centroids = np.empty((j, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, j):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[c] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[c]) ** 2).sum(axis=1))
    return centroids


def _pad_farthest(points, centroids, j):
    padded = np.empty((j, points.shape[1]), dtype=np.float64)
    padded[: centroids.shape[0]] = centroids
    for c in range(centroids.shape[0], j):
        d2 = ((points[:, None, :] - padded[None, :c, :]) ** 2).sum(axis=2).min(axis=1)
        padded[c] = points[int(d2.argmax())]
    return padded


def _repair_empty(points, centroids, assign, dists):
    empty = [c for c in range(centroids.shape[0]) if not (assign == c).any()]
    if not empty:
        return centroids, assign
    order = np.argsort(-dists, kind="stable")
    for c, point_idx in zip(empty, order):
        centroids[c] = points[point_idx]
        assign[point_idx] = c
    return centroids, assign


@dataclass
class CodebookTrainConfig:
    max_iter: int = 100
    tol: float = 1e-6
    seed: int = 0


def train_codebooks(vectors, levels: int, per_level: int,
                    config: CodebookTrainConfig | None = None) -> Codebook:
    """Train the residual codebook stack.

    Level 1 clusters the raw vectors; each deeper level clusters what is
    left after subtracting every codeword chosen so far. Training runs in
    float64 and the stored tables are float32 (the serving dtype); the
    recorded inertia values are the float64 training-set SSE per level,
    so the mean squared residual trajectory is inertia[m] / n.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    config = config or CodebookTrainConfig()
    z = _as_vector_matrix(vectors)
    residual = z.astype(np.float64)
    tables = np.empty((levels, per_level, z.shape[1]), dtype=np.float64)
    inertia = []
    for m in range(levels):
        result = kmeans(residual, per_level, max_iter=config.max_iter,
                        tol=config.tol, seed=config.seed + m)
        tables[m] = result.centroids
        residual = residual - result.centroids[result.assignments]
        inertia.append(float((residual * residual).sum()))
    return Codebook(codewords=tables.astype(np.float32), inertia=inertia)


def _as_vector_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        m = vectors
    else:
        m = np.stack([v.z for v in vectors])
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValueError("expected a nonempty (n, d) array of content vectors")
    return m


def encode(cb: Codebook, z: np.ndarray) -> SidTuple:
    codes, _ = encode_with_residual(cb, z)
    return codes


def encode_with_residual(cb: Codebook, z: np.ndarray):
    """Greedy per-level nearest-codeword encoding.

    The running residual is tracked as z minus the accumulated codeword
    sum in the codebook's dtype, so the residual returned here equals
    z - reconstruct(codes) bit for bit. Ties go to the lowest index.
    """
    z = np.asarray(z, dtype=cb.codewords.dtype)
    if z.shape != (cb.dim,):
        raise ValueError(f"vector dim {z.shape} does not match codebook dim ({cb.dim},)")
    acc = np.zeros(cb.dim, dtype=cb.codewords.dtype)
    codes = []
    for m in range(cb.levels):
        r = z - acc
        k = int(_sq_dists_to(cb.codewords[m], r).argmin())
        codes.append(k)
        acc = acc + cb.codewords[m][k]
    return tuple(codes), z - acc


def reconstruct(cb: Codebook, sid: SidTuple) -> np.ndarray:
    """Sum of the selected codewords, accumulated in level order."""
    if len(sid) != cb.levels:
        raise ValueError(f"sid length {len(sid)} != levels {cb.levels}")
    acc = np.zeros(cb.dim, dtype=cb.codewords.dtype)
    for m, k in enumerate(sid):
        if not (0 <= k < cb.per_level):
            raise ValueError(f"code {k} out of range [0, {cb.per_level}) at level {m}")
        acc = acc + cb.codewords[m][k]
    return acc


def first_layer_sid(sid: SidTuple) -> int:
    return sid[0]


def encode_all(cb: Codebook, vectors: np.ndarray) -> np.ndarray:
    """Encode a (n, d) matrix; returns (n, levels) int32 codes."""
    vectors = np.asarray(vectors, dtype=cb.codewords.dtype)
    out = np.empty((vectors.shape[0], cb.levels), dtype=np.int32)
    for i in range(vectors.shape[0]):
        out[i] = encode(cb, vectors[i])
    return out


# ---------------------------------------------------------------------------
# File formats


def save_codebook(cb: Codebook, path) -> None:
    cw = np.ascontiguousarray(cb.codewords, dtype="<f4")
    header = CODEBOOK_MAGIC + struct.pack(
        "<HHII", CODEBOOK_VERSION, cb.levels, cb.per_level, cb.dim
    )
    payload = header + cw.tobytes()
    payload += np.asarray(cb.inertia, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(payload)


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CODEBOOK_MAGIC:
        raise ValueError("not a codebook file (bad magic)")
    version, levels, per_level, dim = struct.unpack_from("<HHII", blob, 4)
    if version != CODEBOOK_VERSION:
        raise ValueError(f"unsupported codebook version {version}")
    offset = 4 + struct.calcsize("<HHII")
    n_cw = levels * per_level * dim
    expected = offset + 4 * n_cw + 8 * levels
    if len(blob) != expected:
        raise ValueError(f"truncated codebook file: {len(blob)} bytes, expected {expected}")
    cw = np.frombuffer(blob, dtype="<f4", count=n_cw, offset=offset)
    cw = cw.reshape(levels, per_level, dim).copy()
    inertia = np.frombuffer(blob, dtype="<f8", count=levels, offset=offset + 4 * n_cw)
    return Codebook(codewords=cw, inertia=list(inertia))


def load_content_vectors(path) -> list[ContentVector]:
    """Read items from JSONL: one object per line with item_id, vector, category."""
    out = []
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                vec = np.asarray(row["vector"], dtype=np.float32)
                item = ContentVector(
                    item_id=int(row["item_id"]),
                    z=vec,
                    category=int(row.get("category", 0)),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise ValueError(f"{path}: line {lineno}: vector dim {vec.shape[0]} != {dim}")
            out.append(item)
    if not out:
        raise ValueError(f"{path}: no items found")
    return out
