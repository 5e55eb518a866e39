"""Episodic few-shot evaluation on top of a frozen encoder.

The encoder output v (the projection head is discarded after pretraining)
is the classification space.  Five classifier heads are supported: L2-
regularized multinomial logistic regression (LR), linear one-vs-rest SVM
with squared hinge (SVM), 1-nearest-neighbor on normalized embeddings (NN),
nearest class-mean under cosine similarity on normalized embeddings
(Cosine), and nearest class-mean under squared Euclidean distance on raw
embeddings (Proto).  Ties always resolve to the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from soi.errors import DataError, DomainError, ShapeError
from soi.nn import Encoder, Mode
from soi.tensor import Tensor

CLASSIFIER_KINDS = ("LR", "SVM", "NN", "Cosine", "Proto")


class LabeledDataset:
    """Items with integer class labels plus a class -> indices map."""

    def __init__(self, items, ids=None):
        self.items = list(items)
        if not self.items:
            raise DataError("empty dataset")
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(self.items))]
        self.class_index: dict[int, list[int]] = {}
        for i, (_, cls) in enumerate(self.items):
            self.class_index.setdefault(int(cls), []).append(i)

    @property
    def classes(self) -> list[int]:
        return sorted(self.class_index)

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class Episode:
    n_way: int
    k_shot: int
    q_query: int
    support: list  # (item, relabeled class) pairs
    query: list
    class_map: dict  # original class id -> 0..n-1


@dataclass(frozen=True)
class EvalReport:
    kind: str
    n_way: int
    k_shot: int
    q_query: int
    episodes: int
    mean_accuracy: float
    ci95_halfwidth: float
    per_episode: np.ndarray

    def formatted(self) -> str:
        """Percent-style ``49.85 ± 0.84`` rendering."""
        return f"{100 * self.mean_accuracy:.2f} ± {100 * self.ci95_halfwidth:.2f}"


def sample_episode(dataset: LabeledDataset, n: int, k: int, q: int, seed) -> Episode:
    """n classes uniformly without replacement, k support + q query items each."""
    classes = dataset.classes
    if len(classes) < n:
        raise DataError(f"need {n} classes, dataset has {len(classes)}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    chosen = [classes[i] for i in rng.choice(len(classes), size=n, replace=False)]
    support, query = [], []
    class_map = {}
    for new_label, cls in enumerate(chosen):
        class_map[cls] = new_label
        pool = dataset.class_index[cls]
        if len(pool) < k + q:
            raise DataError(f"class {cls} has {len(pool)} items, needs {k + q}")
        picked = rng.choice(len(pool), size=k + q, replace=False)
        items = [dataset.items[pool[i]][0] for i in picked]
        support += [(item, new_label) for item in items[:k]]
        query += [(item, new_label) for item in items[k:]]
    return Episode(n, k, q, support, query, class_map)


def embed(frozen_encoder: Encoder, images, batch_size: int = 128) -> np.ndarray:
    """Eval-mode embeddings (N, embed_dim) for a sequence of (C,H,W) arrays."""
    if not getattr(frozen_encoder, "frozen", False):
        raise DomainError("embedding requires a frozen encoder")
    chunks = []
    images = list(images)
    for lo in range(0, len(images), batch_size):
        batch = Tensor(np.stack(images[lo : lo + batch_size]))
        chunks.append(frozen_encoder(batch, Mode.EVAL).data)
    return np.concatenate(chunks, axis=0)


def embed_dataset(frozen_encoder: Encoder, dataset: LabeledDataset) -> LabeledDataset:
    vecs = embed(frozen_encoder, [img for img, _ in dataset.items])
    items = [(vecs[i], cls) for i, (_, cls) in enumerate(dataset.items)]
    return LabeledDataset(items, ids=dataset.ids)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def _argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; exact ties go to the lowest class index."""
    return scores.argmax(axis=1)  # numpy argmax returns the first maximum


class _GradientDescent:
    """Full-batch gradient descent with Barzilai-Borwein steps.

    The BB spectral step gives near-Newton progress on these small convex
    objectives while staying a plain descent along -grad; an Armijo
    backtrack keeps every accepted step monotone.
    """

    def __init__(self, tol: float = 1e-6, max_iter: int = 1000):
        self.tol = tol
        self.max_iter = max_iter

    def minimize(self, fun_grad, x0: np.ndarray) -> np.ndarray:
        x = x0.copy()
        f, g = fun_grad(x)
        step = 1.0
        prev_x = prev_g = None
        for _ in range(self.max_iter):
            if np.abs(g).max() < self.tol:
                break
            if prev_x is not None:
                dx = x - prev_x
                dg = g - prev_g
                curv = float(dx @ dg)
                if curv > 1e-18:
                    step = float(dx @ dx) / curv
                step = float(np.clip(step, 1e-10, 1e6))
            accepted = False
            while step > 1e-14:
                cand = x - step * g
                fc, gc = fun_grad(cand)
                if fc <= f - 1e-4 * step * (g * g).sum():
                    prev_x, prev_g = x, g
                    x, f, g = cand, fc, gc
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
        return x


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class LogisticRegressionClassifier:
    """Multinomial logistic regression, L2-regularized, full-batch descent."""

    kind = "LR"

    def __init__(self, x: np.ndarray, y: np.ndarray, reg: float, tol=1e-6, max_iter=1000):
        m, d = x.shape
        n_class = int(y.max()) + 1
        onehot = np.eye(n_class)[y]

        def fun_grad(flat):
            wb = flat.reshape(n_class, d + 1)
            w, b = wb[:, :d], wb[:, d]
            p = _softmax_rows(x @ w.T + b)
            ce = -np.log(np.maximum(p[np.arange(m), y], 1e-300)).mean()
            f = ce + 0.5 * reg * (w * w).sum() / m
            delta = (p - onehot) / m
            gw = delta.T @ x + reg * w / m
            gb = delta.sum(axis=0)
            return f, np.concatenate([gw, gb[:, None]], axis=1).reshape(-1)

        flat = _GradientDescent(tol, max_iter).minimize(fun_grad, np.zeros(n_class * (d + 1)))
        wb = flat.reshape(n_class, d + 1)
        self.w, self.b = wb[:, :d], wb[:, d]

    def predict(self, queries: np.ndarray) -> np.ndarray:
        return _argmax_lowest(queries @ self.w.T + self.b)


class LinearSVMClassifier:
    """One-vs-rest linear SVM with squared hinge loss, L2-regularized."""

    kind = "SVM"

    def __init__(self, x: np.ndarray, y: np.ndarray, reg: float, tol=1e-6, max_iter=1000):
        m, d = x.shape
        n_class = int(y.max()) + 1
        ypm = np.where(np.eye(n_class)[y] > 0, 1.0, -1.0)  # (m, n_class) in {+-1}

        def fun_grad(flat):
            wb = flat.reshape(n_class, d + 1)
            w, b = wb[:, :d], wb[:, d]
            scores = x @ w.T + b
            slack = np.maximum(0.0, 1.0 - ypm * scores)
            f = (slack * slack).mean() * n_class + 0.5 * reg * (w * w).sum() / m
            coeff = (-2.0 * ypm * slack) / m  # d/d score of the summed-over-classes loss
            gw = coeff.T @ x + reg * w / m
            gb = coeff.sum(axis=0)
            return f, np.concatenate([gw, gb[:, None]], axis=1).reshape(-1)

        flat = _GradientDescent(tol, max_iter).minimize(fun_grad, np.zeros(n_class * (d + 1)))
        wb = flat.reshape(n_class, d + 1)
        self.w, self.b = wb[:, :d], wb[:, d]

    def predict(self, queries: np.ndarray) -> np.ndarray:
        return _argmax_lowest(queries @ self.w.T + self.b)


class NearestNeighborClassifier:
    """1-NN under Euclidean distance on L2-normalized embeddings."""

    kind = "NN"

    def __init__(self, x: np.ndarray, y: np.ndarray):
        order = np.argsort(y, kind="stable")  # ties then resolve to lowest class
        self.x = _normalize_rows(x)[order]
        self.y = y[order]

    def predict(self, queries: np.ndarray) -> np.ndarray:
        qn = _normalize_rows(queries)
        d2 = ((qn[:, None, :] - self.x[None, :, :]) ** 2).sum(axis=2)
        return self.y[d2.argmin(axis=1)]


class NearestMeanClassifier:
    """Nearest class-mean; cosine on normalized or squared-Euclidean on raw."""

    def __init__(self, x: np.ndarray, y: np.ndarray, metric: str):
        self.metric = metric
        self.kind = "Cosine" if metric == "cosine" else "Proto"
        if metric == "cosine":
            x = _normalize_rows(x)
        n_class = int(y.max()) + 1
        self.means = np.stack([x[y == c].mean(axis=0) for c in range(n_class)])

    def predict(self, queries: np.ndarray) -> np.ndarray:
        if self.metric == "cosine":
            qn = _normalize_rows(queries)
            means = _normalize_rows(self.means)
            return _argmax_lowest(qn @ means.T)
        d2 = ((queries[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        return _argmax_lowest(-d2)


def fit_classifier(support_embeddings, support_labels, kind: str, reg: float = 1.0):
    """Train one classifier head on the episode's support set."""
    x = np.asarray(support_embeddings, dtype=np.float64)
    y = np.asarray(support_labels, dtype=np.intp)
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError("support embeddings must be (M,D) with one label per row")
    if kind == "LR":
        return LogisticRegressionClassifier(x, y, reg)
    if kind == "SVM":
        return LinearSVMClassifier(x, y, reg)
    if kind == "NN":
        return NearestNeighborClassifier(x, y)
    if kind == "Cosine":
        return NearestMeanClassifier(x, y, "cosine")
    if kind == "Proto":
        return NearestMeanClassifier(x, y, "euclidean")
    raise ValueError(f"unknown classifier kind {kind!r}; pick from {CLASSIFIER_KINDS}")


def predict(classifier, query_embeddings) -> np.ndarray:
    q = np.asarray(query_embeddings, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != _model_dim(classifier):
        raise ShapeError("query embedding dim does not match the fitted classifier")
    return classifier.predict(q)


def _model_dim(classifier) -> int:
    if hasattr(classifier, "w"):
        return classifier.w.shape[1]
    if hasattr(classifier, "means"):
        return classifier.means.shape[1]
    return classifier.x.shape[1]


def _episode_accuracy(embeddings: LabeledDataset, episode_seed, n, k, q, kind, reg) -> float:
    ep = sample_episode(embeddings, n, k, q, episode_seed)
    xs = np.stack([item for item, _ in ep.support])
    ys = np.array([label for _, label in ep.support])
    clf = fit_classifier(xs, ys, kind, reg)
    xq = np.stack([item for item, _ in ep.query])
    yq = np.array([label for _, label in ep.query])
    return float((predict(clf, xq) == yq).mean())


def evaluate(frozen_encoder, dataset: LabeledDataset, protocol, episodes: int,
             kind: str, seed: int, reg: float = 1.0,
             precomputed: LabeledDataset | None = None) -> EvalReport:
    """Mean accuracy with a 95% confidence interval over sampled episodes.

    ``protocol`` is (n_way, k_shot, q_query).  The dataset is embedded once;
    episode e uses the derived seed (seed, e), so runs are reproducible and
    different classifier kinds can share identical episodes.
    """
    n, k, q = protocol
    emb = precomputed if precomputed is not None else embed_dataset(frozen_encoder, dataset)
    accs = np.array([
        _episode_accuracy(emb, (seed, e), n, k, q, kind, reg) for e in range(episodes)
    ])
    std = accs.std(ddof=1) if episodes > 1 else 0.0
    ci = 1.96 * std / np.sqrt(episodes)
    return EvalReport(kind, n, k, q, episodes, float(accs.mean()), float(ci), accs)


def evaluate_kinds(frozen_encoder, dataset: LabeledDataset, protocol, episodes: int,
                   kinds, seed: int, reg: float = 1.0) -> list[EvalReport]:
    """One report per classifier kind, all sharing the same episode seeds."""
    emb = embed_dataset(frozen_encoder, dataset)
    return [
        evaluate(frozen_encoder, dataset, protocol, episodes, kind, seed, reg, precomputed=emb)
        for kind in kinds
    ]


def reports_csv(reports) -> str:
    lines = ["kind,way,shot,mean,ci95,episodes"]
    for r in reports:
        lines.append(
            f"{r.kind},{r.n_way},{r.k_shot},{r.mean_accuracy:.9g},{r.ci95_halfwidth:.9g},{r.episodes}"
        )
    return "\n".join(lines) + "\n"


def comparison_table(reports) -> str:
    """Human-readable per-kind accuracy table."""
    header = f"{'Classifier':<10}  " + "  ".join(
        f"{r.n_way}-way {r.k_shot}-shot" for r in reports[:1]
    )
    lines = [header]
    for r in reports:
        lines.append(f"{r.kind:<10}  {r.formatted()}")
    return "\n".join(lines) + "\n"


def export_embeddings(frozen_encoder, dataset: LabeledDataset, path) -> None:
    """CSV ``id,class,e0..e{D-1}`` at 9 significant digits; deterministic."""
    emb = embed_dataset(frozen_encoder, dataset)
    dim = emb.items[0][0].shape[0]
    lines = ["id,class," + ",".join(f"e{i}" for i in range(dim))]
    for idx, (vec, cls) in enumerate(emb.items):
        values = ",".join(f"{v:.9g}" for v in vec)
        lines.append(f"{emb.ids[idx]},{cls},{values}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
