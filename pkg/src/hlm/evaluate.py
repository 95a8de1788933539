"""Metric suite: style recognition accuracy, content recognition, and a
Fréchet distance in classifier feature space, plus the ablation grid that
sweeps contrastive training, guidance, and style-set size.

Multimodal text-space distance and foot-skating ratio from the motion
literature have no analogue here (no text embedding space, no foot-contact
semantics on the planar skeleton); content accuracy stands in for the
retrieval-precision family.
"""

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import motion as mo
from . import tensor as T
from .layers import MLP, Adam
from .sampler import GuidanceConfig, sample_batch
from .seeding import derive_rng
from .tensor import Tensor
from .train import TrainConfig, train_style_adapter


class EvaluationBlocked(RuntimeError):
    """Classifier below the validity gate; metric values would be noise."""


STAT_CHANNELS = slice(2, 20)        # local joints + root velocity; never
                                    # absolute root position, so the stats
                                    # are translation invariant
_SEGMENTS = 3                       # thirds-of-sequence means keep enough
                                    # time structure to tell trajectories apart
CLASSIFIER_THRESHOLD = 0.95


def pooled_stats(frames, fps=mo.DEFAULT_FPS):
    """Per-sequence statistics vector over the translation-invariant
    channels: the six style-aligned gait statistics, per-third channel
    means, stds, mean absolute frame deltas, and four root-trajectory
    scalars (speed mean/std, straightness, signed turning)."""
    f = np.asarray(frames, dtype=np.float64)
    gait = mo.style_statistics(f, fps)
    ch = f[:, STAT_CHANNELS]
    seg_means = np.concatenate([s.mean(axis=0)
                                for s in np.array_split(ch, _SEGMENTS, axis=0)])
    std = ch.std(axis=0)
    delta = np.abs(np.diff(ch, axis=0)).mean(axis=0)
    v = f[:, 18:20]
    speed = np.linalg.norm(v, axis=1)
    pace = speed.mean() + 1e-9          # scale-free direction features keep
    dirv = v.mean(axis=0) / pace        # slow styles from looking stationary
    cross = v[:-1, 0] * v[1:, 1] - v[:-1, 1] * v[1:, 0]
    turn = np.mean(cross / (speed[:-1] * speed[1:] + 1e-9))
    seg_dirs = np.concatenate([s.mean(axis=0)
                               for s in np.array_split(v, _SEGMENTS, axis=0)]) / pace
    scalars = np.array([speed.mean(), speed.std(), speed.std() / pace,
                        dirv[0], dirv[1], turn])
    return np.concatenate([gait, seg_means, std, delta, seg_dirs, scalars])


STAT_DIM = (6 + (_SEGMENTS + 2) * (STAT_CHANNELS.stop - STAT_CHANNELS.start)
            + 2 * _SEGMENTS + 6)

_N_CH = STAT_CHANNELS.stop - STAT_CHANNELS.start
_GAIT = np.arange(0, 6)
_SEG_MEANS = np.arange(6, 6 + _SEGMENTS * _N_CH)
_STD = np.arange(6 + _SEGMENTS * _N_CH, 6 + (_SEGMENTS + 1) * _N_CH)
_DELTA = np.arange(6 + (_SEGMENTS + 1) * _N_CH, 6 + (_SEGMENTS + 2) * _N_CH)

# the gait statistics plus per-channel spreads are content-invariant by the
# generator's construction; the segment means and direction features are not,
# and letting the style head see them invites content shortcuts
STYLE_FEATURES = np.concatenate([_GAIT, _STD, _DELTA])
CONTENT_FEATURES = np.arange(STAT_DIM)


def _cross_entropy(logits, onehot):
    # the per-row max shift is loss-invariant, so treating it as a constant
    # leaves gradients exact
    with T.no_grad():
        shift = logits.data.max(axis=-1, keepdims=True)
    centered = T.sub(logits, Tensor(np.broadcast_to(shift, logits.shape).copy()))
    exp = T.exp(centered)
    denom = T.sum_reduce(exp, axes=(-1,), keepdims=True)
    logp = T.sub(centered, T.log(T.broadcast_axis(denom, 1, logits.shape[1])))
    picked = T.sum_reduce(T.mul(logp, Tensor(onehot)), axes=(-1,))
    return T.scale(T.sum_reduce(picked), -1.0 / logits.shape[0])


class MotionClassifier:
    """MLP over pooled motion statistics. The activations feeding the final
    linear layer double as the feature space for the Fréchet metric."""

    def __init__(self, kind, labels, mlp, feature_idx, stat_mean, stat_std,
                 threshold):
        self.kind = kind
        self.labels = list(labels)
        self.index = {lab: i for i, lab in enumerate(self.labels)}
        self.mlp = mlp
        self.feature_idx = feature_idx
        self.stat_mean = stat_mean
        self.stat_std = stat_std
        self.threshold = threshold
        self.train_accuracy = None
        self.held_out_accuracy = None

    @property
    def feature_dim(self):
        return self.mlp.layers[-1].in_dim

    def _forward(self, motions):
        X = np.stack([pooled_stats(m.frames, m.fps)[self.feature_idx]
                      for m in motions])
        h = Tensor((X - self.stat_mean) / self.stat_std)
        with T.no_grad():
            for layer in self.mlp.layers[:-1]:
                h = T.silu(layer(h))
            logits = self.mlp.layers[-1](h)
        return logits.data, h.data

    def predict_logits(self, motions):
        return self._forward(motions)[0]

    def features(self, motions):
        """Penultimate activations, one row per motion."""
        return self._forward(motions)[1]

    def accuracy(self, motions, label_ids):
        pred = np.argmax(self.predict_logits(motions), axis=1)
        want = np.array([self.index[l] for l in label_ids])
        return float(np.mean(pred == want))

    def require_valid(self):
        if self.held_out_accuracy is None:
            raise EvaluationBlocked(f"{self.kind} classifier was never validated")
        if self.held_out_accuracy < self.threshold:
            raise EvaluationBlocked(
                f"{self.kind} classifier held-out accuracy "
                f"{self.held_out_accuracy:.3f} is below the "
                f"{self.threshold:.2f} gate; evaluation would be meaningless")


def _train_classifier(dataset, kind, epochs, lr, seed, threshold, hidden):
    train = dataset.split("train")
    test = dataset.split("test")
    if not train or not test:
        raise ValueError("classifier training needs non-empty train and test splits")
    if any(s.split == "generated" for s in dataset.sequences):
        raise ValueError("classifiers train on real motions only, "
                         "never on model outputs")
    labels = dataset.style_ids if kind == "style" else dataset.content_ids
    key = (lambda s: s.style_id) if kind == "style" else (lambda s: s.content_id)
    index = {lab: i for i, lab in enumerate(labels)}
    feature_idx = STYLE_FEATURES if kind == "style" else CONTENT_FEATURES

    X = np.stack([pooled_stats(s.frames, s.fps)[feature_idx] for s in train])
    y = np.array([index[key(s)] for s in train])
    stat_mean = X.mean(axis=0)
    stat_std = np.maximum(X.std(axis=0), 1e-8)
    onehot = np.zeros((len(y), len(labels)))
    onehot[np.arange(len(y)), y] = 1.0

    rng = derive_rng(seed, f"{kind}-classifier")
    mlp = MLP([len(feature_idx), *hidden, len(labels)], rng)
    clf = MotionClassifier(kind, labels, mlp, feature_idx, stat_mean, stat_std,
                           threshold)
    opt = Adam(mlp.params(), lr=lr)
    Xn = Tensor((X - stat_mean) / stat_std)
    for _ in range(epochs):            # full batch keeps the run order-free
        h = Xn
        for layer in mlp.layers[:-1]:
            h = T.silu(layer(h))
        loss = _cross_entropy(mlp.layers[-1](h), onehot)
        opt.zero_grad()
        T.backward(loss)
        opt.step()

    clf.train_accuracy = clf.accuracy(train, [key(s) for s in train])
    clf.held_out_accuracy = clf.accuracy(test, [key(s) for s in test])
    return clf


def train_style_classifier(dataset, epochs=300, lr=3e-3, seed=0,
                           threshold=CLASSIFIER_THRESHOLD, hidden=(64, 16)):
    return _train_classifier(dataset, "style", epochs, lr, seed, threshold, hidden)


def train_content_classifier(dataset, epochs=300, lr=3e-3, seed=0,
                             threshold=CLASSIFIER_THRESHOLD, hidden=(64, 16)):
    return _train_classifier(dataset, "content", epochs, lr, seed, threshold, hidden)


def _topk_accuracy(motions, intended_ids, classifier, k):
    classifier.require_valid()
    if len(motions) != len(intended_ids):
        raise ValueError(f"{len(motions)} motions vs {len(intended_ids)} labels")
    unknown = [i for i in intended_ids if i not in classifier.index]
    if unknown:
        raise ValueError(f"unknown {classifier.kind} ids: {sorted(set(unknown))}")
    if not 1 <= k <= len(classifier.labels):
        raise ValueError(f"k={k} outside 1..{len(classifier.labels)}")
    logits = classifier.predict_logits(motions)
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    want = np.array([classifier.index[i] for i in intended_ids])
    return float(np.mean(np.any(top == want[:, None], axis=1)))


def sra(motions, intended_style_ids, classifier, k=1):
    """Fraction of motions whose intended style is within the top-k
    predictions of the style classifier."""
    if classifier.kind != "style":
        raise ValueError(f"sra needs a style classifier, got {classifier.kind!r}")
    return _topk_accuracy(motions, intended_style_ids, classifier, k)


def content_accuracy(motions, intended_content_ids, classifier):
    if classifier.kind != "content":
        raise ValueError(f"content_accuracy needs a content classifier, "
                         f"got {classifier.kind!r}")
    return _topk_accuracy(motions, intended_content_ids, classifier, 1)


def _psd_sqrt(S):
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def latent_fid(generated_features, real_features):
    """Fréchet distance between Gaussian fits of two feature sets:
    ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}), with the matrix square
    root taken through the symmetric product S1^{1/2} S2 S1^{1/2}."""
    A = np.asarray(generated_features, dtype=np.float64)
    B = np.asarray(real_features, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"feature sets must be 2-D with equal width, "
                         f"got {A.shape} and {B.shape}")
    dim = A.shape[1]
    need = 2 * dim
    if len(A) < need or len(B) < need:
        raise ValueError(f"covariance estimation needs at least {need} samples "
                         f"per side for width {dim}, got {len(A)} and {len(B)}")
    mu1, mu2 = A.mean(axis=0), B.mean(axis=0)
    S1 = np.cov(A, rowvar=False)
    S2 = np.cov(B, rowvar=False)
    root = _psd_sqrt(S1)
    M = root @ S2 @ root
    eig = np.clip(np.linalg.eigvalsh(0.5 * (M + M.T)), 0.0, None)
    fid = float(np.sum((mu1 - mu2) ** 2) + np.trace(S1) + np.trace(S2)
                - 2.0 * np.sum(np.sqrt(eig)))
    return max(fid, 0.0)


@dataclass
class MetricReport:
    sra_top1: float
    sra_topk: float
    content_acc: float
    latent_fid: float
    n_samples: int
    config_digest: str = ""

    def __post_init__(self):
        for name in ("sra_top1", "sra_topk", "content_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.latent_fid < 0.0:
            raise ValueError(f"latent_fid={self.latent_fid} is negative")
        if self.n_samples < 1:
            raise ValueError("report needs at least one sample")

    def as_dict(self):
        return {"sra_top1": self.sra_top1, "sra_topk": self.sra_topk,
                "content_acc": self.content_acc, "latent_fid": self.latent_fid,
                "n_samples": self.n_samples, "config_digest": self.config_digest}


def evaluate_samples(motions, intended_style_ids, intended_content_ids,
                     style_clf, content_clf, real_motions, config_digest="",
                     topk=3):
    """Score one batch of generated motions against the real test pool."""
    return MetricReport(
        sra_top1=sra(motions, intended_style_ids, style_clf, 1),
        sra_topk=sra(motions, intended_style_ids, style_clf, topk),
        content_acc=content_accuracy(motions, intended_content_ids, content_clf),
        latent_fid=latent_fid(style_clf.features(motions),
                              style_clf.features(real_motions)),
        n_samples=len(motions),
        config_digest=config_digest)


# ----------------------------------------------------------- ablation grid

@dataclass
class AblationCell:
    supcon: bool
    guidance: bool
    styles_fraction: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.styles_fraction <= 1.0:
            raise ValueError(f"styles_fraction {self.styles_fraction} outside (0, 1]")


def default_grid():
    """Four training/guidance variants at the full style set and again in the
    reduced-styles regime evaluated on unseen styles."""
    return [AblationCell(s, g, f)
            for f in (1.0, 0.25) for s in (True, False) for g in (True, False)]


GRID_COLUMNS = ("supcon", "guidance", "styles_fraction", "seeds", "n_samples",
                "sra_top1", "sra_top3", "content_acc", "latent_fid", "status")


def generate_eval_set(backbone, adapter, dataset, sched, style_ids, guidance,
                      samples_per_style, length, n_steps, seed, fps=mo.DEFAULT_FPS):
    """Styled samples for evaluation: per style, references rotate through the
    test split and prompts rotate through the content list. Returns
    (motions, intended_style_ids, intended_content_ids)."""
    content_ids = dataset.content_ids
    motions, want_style, want_content = [], [], []
    for si, sid in enumerate(style_ids):
        refs = [s for s in dataset.sequences
                if s.style_id == sid and s.split == "test"]
        if not refs:
            raise ValueError(f"no test-split references for style {sid!r}")
        groups = {}
        for j in range(samples_per_style):
            groups.setdefault(content_ids[j % len(content_ids)], []).append(
                refs[j % len(refs)])
        for ci, cid in enumerate(content_ids):
            if cid not in groups:
                continue
            batch_seed = int(derive_rng(seed, "eval-set", si, ci)
                             .integers(0, 2 ** 62))
            outs, _ = sample_batch(backbone, adapter, sched,
                                   [cid] * len(groups[cid]),
                                   style_refs=groups[cid], guidance=guidance,
                                   length=length, n_steps=n_steps,
                                   seed=batch_seed, fps=fps)
            for m in outs:
                motions.append(m)
                want_style.append(sid)
                want_content.append(cid)
    return motions, want_style, want_content


def _eval_cell(backbone, dataset, sched, cell, seed, style_clf, content_clf,
               train_cfg, guidance, samples_per_style, length, n_steps):
    sub = dataset.style_subset(cell.styles_fraction)
    cfg = replace(train_cfg, seed=seed,
                  lambda_supcon=train_cfg.lambda_supcon if cell.supcon else 0.0)
    adapter, _ = train_style_adapter(backbone, sub, sched, cfg)
    if cell.styles_fraction < 1.0:
        eval_styles = dataset.held_out_styles(cell.styles_fraction)
    else:
        eval_styles = dataset.style_ids
    g = guidance if cell.guidance else replace(guidance, lambda_style=0.0)
    motions, want_style, want_content = generate_eval_set(
        backbone, adapter, dataset, sched, eval_styles, g,
        samples_per_style, length, n_steps, seed)
    real = [s for s in dataset.sequences
            if s.split == "test" and s.style_id in set(eval_styles)]
    digest = (f"supcon={int(cell.supcon)} guidance={int(cell.guidance)} "
              f"frac={cell.styles_fraction:g} seed={seed}")
    return evaluate_samples(motions, want_style, want_content, style_clf,
                            content_clf, real, config_digest=digest)


def run_ablation_grid(backbone, dataset, sched, cells, seeds, train_cfg=None,
                      guidance=None, samples_per_style=8, length=64,
                      n_steps=25, clf_seed=0, csv_path=None, json_path=None,
                      progress=None):
    """Train and score every (cell, seed) combination; rows hold per-cell
    means over seeds. A failed cell is recorded and the grid continues.

    CSV column order is fixed: supcon, guidance, styles_fraction, seeds,
    n_samples, sra_top1, sra_top3, content_acc, latent_fid, status."""
    train_cfg = train_cfg or TrainConfig()
    guidance = guidance or GuidanceConfig()
    if guidance.lambda_style == 0.0:
        raise ValueError("grid guidance config must carry a nonzero "
                         "lambda_style for the guidance-on cells")
    style_clf = train_style_classifier(dataset, seed=clf_seed)
    content_clf = train_content_classifier(dataset, seed=clf_seed)
    style_clf.require_valid()
    content_clf.require_valid()
    rows = []
    for cell in cells:
        reports, failure = [], None
        for seed in seeds:
            if progress:
                progress(f"cell supcon={cell.supcon} guidance={cell.guidance} "
                         f"frac={cell.styles_fraction:g} seed={seed}")
            try:
                reports.append(_eval_cell(
                    backbone, dataset, sched, cell, seed, style_clf,
                    content_clf, train_cfg, guidance, samples_per_style,
                    length, n_steps))
            except Exception as exc:            # noqa: BLE001 - cell isolation
                failure = f"{type(exc).__name__}: {exc}"
                break
        row = {"supcon": cell.supcon, "guidance": cell.guidance,
               "styles_fraction": cell.styles_fraction, "seeds": list(seeds)}
        if failure is None:
            row.update({
                "n_samples": sum(r.n_samples for r in reports),
                "sra_top1": float(np.mean([r.sra_top1 for r in reports])),
                "sra_top3": float(np.mean([r.sra_topk for r in reports])),
                "content_acc": float(np.mean([r.content_acc for r in reports])),
                "latent_fid": float(np.mean([r.latent_fid for r in reports])),
                "status": "ok", "reports": [r.as_dict() for r in reports]})
        else:
            row.update({"n_samples": 0, "sra_top1": None, "sra_top3": None,
                        "content_acc": None, "latent_fid": None,
                        "status": f"failed: {failure}", "reports": []})
        rows.append(row)
    if csv_path:
        write_grid_csv(rows, csv_path)
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return format(v, ".10g")
    if isinstance(v, list):
        return " ".join(str(x) for x in v)
    return str(v)


def write_grid_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in GRID_COLUMNS])
