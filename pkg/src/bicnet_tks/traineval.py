"""Toy training loop and retrieval evaluation.

Training optimizes cross entropy on an identity classifier, batch-hard
triplet loss on L2-normalized video features and the attention divergence
term, with Adam and a step learning-rate schedule. Evaluation splits each
tracklet into consecutive segments, averages their features, ranks the
gallery by cosine distance and reports mAP plus CMC.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .bicnet import BiCnet, aggregate_branches, split_segment
from .config import RunConfig, TrainConfig
from .images import resize_bilinear
from .synthdata import PKSampler, SynthDataset, sample_segment
from .tensor import InputError, Tensor


class Classifier(nn.Module):
    """Identity head on the aggregated video feature; excluded from cost totals."""

    def __init__(self, feature_dim, num_ids, rng, dtype=np.float32):
        super().__init__()
        self.fc = nn.Linear(feature_dim, num_ids, bias=True, rng=rng, dtype=dtype)

    def forward(self, features: Tensor) -> Tensor:
        return self.fc.forward(features)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    batch = logits.shape[0]
    shift = Tensor(logits.data.max(axis=1, keepdims=True))  # constant; softmax is shift-invariant
    z = logits - shift
    log_norm = z.exp().sum(axis=1, keepdims=True).log()
    log_probs = z - log_norm
    picked = log_probs[np.arange(batch), np.asarray(labels)]
    return picked.mean() * -1.0


def l2_normalize(features: Tensor, eps: float = 1e-12) -> Tensor:
    norms = ((features * features).sum(axis=1, keepdims=True) + eps) ** 0.5
    return features / norms


def batch_hard_triplet(features: Tensor, labels: np.ndarray, margin: float = 0.3) -> Tensor:
    """Hardest-positive / hardest-negative hinge on normalized features."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise InputError("triplet loss needs at least two identities in the batch")
    batch = features.shape[0]
    f = l2_normalize(features)
    sq = (f * f).sum(axis=1, keepdims=True)
    d2 = (sq + sq.reshape(1, batch) - (f @ f.transpose()) * 2.0).relu()
    dist = (d2 + 1e-12) ** 0.5

    same = labels[:, None] == labels[None, :]
    eye = np.eye(batch, dtype=bool)
    pos_mask = (same & ~eye).astype(f.dtype)
    neg_mask = (~same).astype(f.dtype)
    big = np.asarray(1e9, dtype=f.dtype)

    hardest_pos = (dist - (1.0 - pos_mask) * big).max(axis=1)
    hardest_neg = ((dist + (1.0 - neg_mask) * big) * -1.0).max(axis=1) * -1.0
    return (hardest_pos - hardest_neg + margin).relu().mean()


def total_loss(features: Tensor, logits: Tensor, labels: np.ndarray,
               divergence: Tensor, cfg: TrainConfig) -> Tensor:
    """Cross entropy + batch-hard triplet + lambda_div * divergence."""
    ce = cross_entropy(logits, labels)
    triplet = batch_hard_triplet(features, labels, cfg.triplet_margin)
    return ce + triplet + divergence * cfg.lambda_div


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_state(params) -> dict:
    return {
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
        "t": 0,
    }


def adam_step(params, grads, state: dict, cfg: TrainConfig, epoch: int):
    """One Adam update with L2 weight decay folded into the gradient."""
    lr = cfg.lr_at_epoch(epoch)
    state["t"] += 1
    t = state["t"]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state["m"][i] = ADAM_BETA1 * state["m"][i] + (1 - ADAM_BETA1) * g
        v = state["v"][i] = ADAM_BETA2 * state["v"][i] + (1 - ADAM_BETA2) * (g * g)
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.data.dtype)


class Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = adam_state(self.params)

    def step(self, epoch: int):
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.cfg, epoch)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# retrieval evaluation
# ---------------------------------------------------------------------------


@dataclass
class RetrievalResult:
    mAP: float
    cmc: np.ndarray  # cmc[k-1] = fraction of queries with a hit in top k
    per_query_ap: list = field(default_factory=list)
    num_queries: int = 0
    num_excluded: int = 0  # queries whose identity is absent from the gallery

    def to_dict(self) -> dict:
        return {
            "mAP": float(self.mAP),
            "cmc": [float(v) for v in self.cmc],
            "num_queries": self.num_queries,
            "num_excluded": self.num_excluded,
        }


def evaluate_retrieval(query_features, query_labels, gallery_features, gallery_labels,
                       max_rank: int = 20) -> RetrievalResult:
    """Rank by ascending cosine distance (stable ties) and score AP/CMC."""
    queries = np.asarray(query_features, dtype=np.float64)
    gallery = np.asarray(gallery_features, dtype=np.float64)
    q_labels = np.asarray(query_labels)
    g_labels = np.asarray(gallery_labels)
    if gallery.shape[0] == 0:
        raise InputError("gallery is empty")
    max_rank = min(max_rank, gallery.shape[0])

    qn = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
    gn = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12)
    distances = 1.0 - qn @ gn.T

    aps = []
    cmc_hits = np.zeros(max_rank, dtype=np.float64)
    excluded = 0
    for qi in range(queries.shape[0]):
        matches_any = g_labels == q_labels[qi]
        if not matches_any.any():
            excluded += 1
            continue
        order = np.argsort(distances[qi], kind="stable")
        matches = matches_any[order].astype(np.float64)
        cum_hits = matches.cumsum()
        precision_at = cum_hits / (np.arange(matches.size) + 1.0)
        aps.append(float((precision_at * matches).sum() / matches.sum()))
        first_hit = int(np.argmax(matches))
        if first_hit < max_rank:
            cmc_hits[first_hit:] += 1.0
    if not aps:
        raise InputError("no query identity appears in the gallery")
    scored = len(aps)
    return RetrievalResult(
        mAP=float(np.mean(aps)),
        cmc=cmc_hits / scored,
        per_query_ap=aps,
        num_queries=scored,
        num_excluded=excluded,
    )


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------


def extract_video_feature(frames: np.ndarray, model: BiCnet, n: int = None) -> np.ndarray:
    """Mean feature over consecutive non-overlapping n-frame segments.

    The trailing remainder of the tracklet is dropped, never padded.
    """
    cfg = model.config
    n = cfg.segment_len if n is None else n
    total = frames.shape[0]
    if total < n:
        raise InputError(f"tracklet of {total} frames is shorter than a {n}-frame segment")
    big_h, big_w = cfg.big_res
    features = []
    for start in range(0, total - n + 1, n):
        chunk = resize_bilinear(np.asarray(frames[start : start + n], dtype=np.float32), big_h, big_w)
        split = split_segment(chunk, cfg.alpha)
        f_d, f_c, _ = model.forward(split)
        features.append(aggregate_branches(f_d, f_c).data)
    return np.mean(features, axis=0)


def extract_split_features(model: BiCnet, dataset: SynthDataset):
    """Per-tracklet features for the query and gallery splits."""
    was_training = model.training
    model.eval()
    out = {"query": ([], []), "gallery": ([], [])}
    for track in dataset.tracklets:
        feats, labels = out[track.split]
        feats.append(extract_video_feature(dataset.frames(track), model))
        labels.append(track.identity)
    if was_training:
        model.train()
    return (np.stack(out["query"][0]), np.asarray(out["query"][1]),
            np.stack(out["gallery"][0]), np.asarray(out["gallery"][1]))


# ---------------------------------------------------------------------------
# attention diagnostics
# ---------------------------------------------------------------------------


def _pairwise_cosine_mean(maps) -> float:
    flats = [m.values.data.reshape(-1) for m in maps]
    flats = [f / max(np.linalg.norm(f), 1e-12) for f in flats]
    sims = [float(flats[i] @ flats[j]) for i in range(len(flats)) for j in range(i + 1, len(flats))]
    return float(np.mean(sims)) if sims else float("nan")


def attention_cosine(diagnostics) -> float:
    """Mean within-branch pairwise cosine of the attention maps, branch-averaged."""
    values = []
    for maps in diagnostics.attention.values():
        if len(maps) >= 2:
            values.append(_pairwise_cosine_mean(maps))
    return float(np.mean(values)) if values else float("nan")


def heldout_attention_cosine(model: BiCnet, dataset: SynthDataset, num_segments: int = 16,
                             stride: int = 4, seed: int = 123) -> float:
    """Attention-map similarity on freshly sampled, un-augmented segments."""
    rng = np.random.default_rng(seed)
    was_training = model.training
    model.eval()
    cfg = model.config
    values = []
    tracks = dataset.tracklets
    for _ in range(num_segments):
        track = tracks[int(rng.integers(len(tracks)))]
        seg = sample_segment(dataset.frames(track), cfg.segment_len, stride, rng)
        seg = resize_bilinear(seg, *cfg.big_res)
        _, _, diag = model.forward(split_segment(seg, cfg.alpha))
        values.append(attention_cosine(diag))
    if was_training:
        model.train()
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, state: dict):
        super().__init__(message)
        self.state = state


def train(model: BiCnet, classifier: Classifier, dataset: SynthDataset, run_cfg: RunConfig,
          log_stream=None, epochs: int = None):
    """Run the toy loop; returns one metrics dict per epoch (JSON-stable)."""
    cfg = run_cfg.train
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(np.random.SeedSequence([run_cfg.seed, 0xBEEF]))
    sampler = PKSampler(dataset, cfg.batch_p, cfg.batch_s, run_cfg.model.segment_len,
                        cfg.sample_stride, rng)
    label_index = {ident: i for i, ident in enumerate(dataset.identity_ids())}
    params = model.parameters() + classifier.parameters()
    optimizer = Adam(params, cfg)
    model.train()
    classifier.train()

    history = []
    for epoch in range(epochs):
        sums = {"loss": 0.0, "ce": 0.0, "triplet": 0.0, "divergence": 0.0}
        cosines = []
        batches = 0
        for segments, raw_labels in sampler.epoch():
            labels = np.asarray([label_index[l] for l in raw_labels])
            features = []
            divergences = []
            for seg in segments:
                split = split_segment(seg, run_cfg.model.alpha)
                f_d, f_c, diag = model.forward(split)
                features.append(aggregate_branches(f_d, f_c))
                divergences.append(diag.divergence)
                cos = attention_cosine(diag)
                if np.isfinite(cos):
                    cosines.append(cos)
            feats = T.stack(features, axis=0)
            logits = classifier.forward(feats)
            divergence = T.stack(divergences).mean() if divergences else Tensor(0.0)
            ce = cross_entropy(logits, labels)
            triplet = batch_hard_triplet(feats, labels, cfg.triplet_margin)
            loss = ce + triplet + divergence * cfg.lambda_div
            if not np.isfinite(loss.data):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}",
                    {"epoch": epoch, "ce": float(ce.data), "triplet": float(triplet.data),
                     "divergence": float(divergence.data), "labels": labels.tolist()},
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(epoch)
            sums["loss"] += float(loss.data)
            sums["ce"] += float(ce.data)
            sums["triplet"] += float(triplet.data)
            sums["divergence"] += float(divergence.data)
            batches += 1
        entry = {
            "epoch": epoch,
            "lr": cfg.lr_at_epoch(epoch),
            "loss": sums["loss"] / batches,
            "ce": sums["ce"] / batches,
            "triplet": sums["triplet"] / batches,
            "divergence": sums["divergence"] / batches,
            "attention_cosine": float(np.mean(cosines)) if cosines else None,
        }
        history.append(entry)
        if log_stream is not None:
            log_stream.write(json.dumps(entry, sort_keys=True) + "\n")
            log_stream.flush()
    return history
