"""UxSID: target semantic-aware compression of ultra-long behavior sequences.

Pipeline in one sentence: quantize item content vectors into semantic
IDs, compress each user's full history into a fixed set of interest
anchors, probe the history and the anchors with the target's first-layer
SID, cache the resulting 2 x d record per (user, SID), and serve ranking
features with an O(1) lookup whatever the original sequence length.
"""

__version__ = "0.1.0"

from .model import ModelConfig, UxsidModel, ortho_loss
from .sidgen import Codebook, encode, kmeans, reconstruct, train_codebooks
from .synthdata import WorldConfig, generate
from .trainer import eval_auc, eval_uauc, eval_wuauc, interest_recall_at_k, train

__all__ = [
    "Codebook",
    "ModelConfig",
    "UxsidModel",
    "WorldConfig",
    "encode",
    "eval_auc",
    "eval_uauc",
    "eval_wuauc",
    "generate",
    "interest_recall_at_k",
    "kmeans",
    "ortho_loss",
    "reconstruct",
    "train",
    "train_codebooks",
]
