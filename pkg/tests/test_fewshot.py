"""Episodic evaluation: sampling, embedding, five classifier heads, reports."""

import numpy as np
import pytest
from scipy.optimize import minimize

from soi.errors import DataError, DomainError, ShapeError
from soi.fewshot import (
    CLASSIFIER_KINDS,
    EvalReport,
    LabeledDataset,
    embed,
    embed_dataset,
    evaluate,
    evaluate_kinds,
    export_embeddings,
    fit_classifier,
    predict,
    reports_csv,
    sample_episode,
)
from soi.nn import Encoder, EncoderConfig, Mode
from soi.tensor import Tensor

ENC_CFG = EncoderConfig(stages=((8, 1),), input_size=(3, 8, 8), embed_dim=16)


def embedding_dataset(rng, n_classes=6, per_class=8, dim=5, spread=0.3):
    """Gaussian blobs around random class centers."""
    items = []
    centers = rng.normal(size=(n_classes, dim)) * 2.0
    for c in range(n_classes):
        for _ in range(per_class):
            items.append((centers[c] + spread * rng.normal(size=dim), c))
    return LabeledDataset(items)


class TestSampleEpisode:
    def _ds(self, rng):
        return embedding_dataset(rng, n_classes=8, per_class=20)

    def test_counts(self):
        ep = sample_episode(self._ds(np.random.default_rng(0)), 5, 1, 15, seed=1)
        assert len(ep.support) == 5 and len(ep.query) == 75
        assert sorted({lbl for _, lbl in ep.support}) == [0, 1, 2, 3, 4]

    def test_deterministic(self):
        ds = self._ds(np.random.default_rng(1))
        a = sample_episode(ds, 4, 2, 3, seed=9)
        b = sample_episode(ds, 4, 2, 3, seed=9)
        assert a.class_map == b.class_map
        for (xa, la), (xb, lb) in zip(a.support + a.query, b.support + b.query):
            assert la == lb and np.array_equal(xa, xb)

    def test_support_query_disjoint_over_random_protocols(self):
        ds = self._ds(np.random.default_rng(2))
        rng = np.random.default_rng(3)
        for seed in range(10_000):
            n = int(rng.integers(2, 7))
            k = int(rng.integers(1, 4))
            q = int(rng.integers(1, 6))
            ep = sample_episode(ds, n, k, q, seed=seed)
            sup = {id(x) for x, _ in ep.support}
            qry = {id(x) for x, _ in ep.query}
            assert not (sup & qry)
            assert len(ep.support) == n * k and len(ep.query) == n * q

    def test_class_choice_uniform(self):
        ds = embedding_dataset(np.random.default_rng(3), n_classes=20, per_class=3, dim=2)
        counts = np.zeros(20)
        trials = 4000
        for seed in range(trials):
            ep = sample_episode(ds, 5, 1, 1, seed=seed)
            for cls in ep.class_map:
                counts[cls] += 1
        freq = counts / trials
        assert np.all(np.abs(freq - 0.25) < 0.03)

    def test_insufficient_data_rejected(self):
        ds = embedding_dataset(np.random.default_rng(4), n_classes=3, per_class=2)
        with pytest.raises(DataError):
            sample_episode(ds, 5, 1, 1, seed=0)
        with pytest.raises(DataError):
            sample_episode(ds, 3, 2, 2, seed=0)


class TestEmbed:
    def _images(self, n=6):
        rng = np.random.default_rng(5)
        return [rng.uniform(size=(3, 8, 8)).astype(np.float32) for _ in range(n)]

    def test_requires_frozen(self):
        enc = Encoder(ENC_CFG, seed=0)
        with pytest.raises(DomainError):
            embed(enc, self._images())

    def test_shape_and_purity(self):
        enc = Encoder(ENC_CFG, seed=0).freeze()
        imgs = self._images()
        from soi.nn import state_dict

        before = {k: v.copy() for k, v in state_dict(enc).items()}
        a = embed(enc, imgs)
        b = embed(enc, imgs)
        assert a.shape == (6, 16)
        assert np.array_equal(a, b)
        after = state_dict(enc)
        for k in before:
            np.testing.assert_array_equal(before[k], after[k])

    def test_matches_eval_forward(self):
        enc = Encoder(ENC_CFG, seed=1).freeze()
        imgs = self._images(3)
        direct = enc(Tensor(np.stack(imgs)), Mode.EVAL).data
        np.testing.assert_array_equal(embed(enc, imgs), direct)


def _lr_oracle(x, y, reg):
    """Independent minimizer of the same objective (scipy BFGS)."""
    m, d = x.shape
    n_class = int(y.max()) + 1
    onehot = np.eye(n_class)[y]

    def f(flat):
        wb = flat.reshape(n_class, d + 1)
        w, b = wb[:, :d], wb[:, d]
        z = x @ w.T + b
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -logp[np.arange(m), y].mean() + 0.5 * reg * (w * w).sum() / m

    res = minimize(f, np.zeros(n_class * (d + 1)), method="BFGS",
                   options={"gtol": 1e-8, "maxiter": 2000})
    wb = res.x.reshape(n_class, d + 1)
    return wb[:, :d], wb[:, d]


def _svm_oracle(x, y, reg):
    m, d = x.shape
    n_class = int(y.max()) + 1
    ypm = np.where(np.eye(n_class)[y] > 0, 1.0, -1.0)

    def f(flat):
        wb = flat.reshape(n_class, d + 1)
        w, b = wb[:, :d], wb[:, d]
        slack = np.maximum(0.0, 1.0 - ypm * (x @ w.T + b))
        return (slack * slack).mean() * n_class + 0.5 * reg * (w * w).sum() / m

    res = minimize(f, np.zeros(n_class * (d + 1)), method="BFGS",
                   options={"gtol": 1e-8, "maxiter": 2000})
    wb = res.x.reshape(n_class, d + 1)
    return wb[:, :d], wb[:, d]


class TestClassifiers:
    def test_proto_k1_prototype_is_the_support_point(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 7))
        clf = fit_classifier(x, np.arange(4), "Proto")
        np.testing.assert_allclose(clf.means, x)

    def test_nn_zero_distance_query(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(6, 4))
        y = np.array([0, 0, 1, 1, 2, 2])
        clf = fit_classifier(x, y, "NN")
        pred = predict(clf, x[[3]])
        assert pred[0] == 1

    def test_proto_query_at_prototype(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(9, 4))
        y = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
        clf = fit_classifier(x, y, "Proto")
        for c in range(3):
            assert predict(clf, clf.means[[c]])[0] == c

    def test_separable_blobs_lr_svm_reach_full_support_accuracy(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(10, 3)) * 0.2 + np.array([4.0, 0.0, 0.0])
        b = rng.normal(size=(10, 3)) * 0.2 - np.array([4.0, 0.0, 0.0])
        x = np.vstack([a, b])
        y = np.array([0] * 10 + [1] * 10)
        for kind in ("LR", "SVM"):
            clf = fit_classifier(x, y, kind, reg=0.1)
            assert (predict(clf, x) == y).all()
        # brute-force separator exists (oracle for separability itself)
        w_oracle, b_oracle = _lr_oracle(x, y, 0.1)
        scores = x @ w_oracle.T + b_oracle
        assert (scores.argmax(axis=1) == y).all()

    @pytest.mark.parametrize("kind,oracle", [("LR", _lr_oracle), ("SVM", _svm_oracle)])
    def test_descent_matches_independent_minimizer(self, kind, oracle):
        rng = np.random.default_rng(9)
        agree = []
        for trial in range(10):
            ds = embedding_dataset(rng, n_classes=4, per_class=6, dim=6, spread=1.0)
            ep = sample_episode(ds, 3, 2, 3, seed=trial)
            xs = np.stack([e for e, _ in ep.support])
            ys = np.array([l for _, l in ep.support])
            xq = np.stack([e for e, _ in ep.query])
            mine = predict(fit_classifier(xs, ys, kind, reg=1.0), xq)
            w, b = oracle(xs, ys, 1.0)
            ref = (xq @ w.T + b).argmax(axis=1)
            agree.append((mine == ref).mean())
        assert np.mean(agree) >= 0.99

    def test_degenerate_identical_embeddings_tie_to_lowest(self):
        x = np.ones((4, 3))
        y = np.array([0, 1, 2, 3])
        for kind in CLASSIFIER_KINDS:
            clf = fit_classifier(x, y, kind)
            assert predict(clf, np.ones((2, 3)))[0] == 0

    def test_cosine_scale_invariance(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(6, 4))
        y = np.array([0, 0, 1, 1, 2, 2])
        clf = fit_classifier(x, y, "Cosine")
        q = rng.normal(size=(5, 4))
        np.testing.assert_array_equal(predict(clf, q), predict(clf, q * 11.7))

    def test_lr_invariant_to_support_ordering(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(8, 4))
        y = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        perm = rng.permutation(8)
        q = rng.normal(size=(6, 4))
        a = predict(fit_classifier(x, y, "LR"), q)
        b = predict(fit_classifier(x[perm], y[perm], "LR"), q)
        np.testing.assert_array_equal(a, b)

    def test_proto_cosine_invariant_to_within_class_permutation(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(9, 4))
        y = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
        q = rng.normal(size=(5, 4))
        shuffled = np.array([2, 0, 1, 5, 3, 4, 8, 6, 7])
        for kind in ("Proto", "Cosine"):
            a = predict(fit_classifier(x, y, kind), q)
            b = predict(fit_classifier(x[shuffled], y[shuffled], kind), q)
            np.testing.assert_array_equal(a, b)

    def test_k1_coincidence_nn_cosine_normalized_proto(self):
        rng = np.random.default_rng(13)
        for trial in range(100):
            ds = embedding_dataset(rng, n_classes=7, per_class=4, dim=6)
            ep = sample_episode(ds, 5, 1, 3, seed=trial)
            xs = np.stack([e for e, _ in ep.support])
            ys = np.array([l for _, l in ep.support])
            xq = np.stack([e for e, _ in ep.query])
            xs_n = xs / np.linalg.norm(xs, axis=1, keepdims=True)
            nn = predict(fit_classifier(xs, ys, "NN"), xq)
            cos = predict(fit_classifier(xs, ys, "Cosine"), xq)
            proto_n = predict(fit_classifier(xs_n, ys, "Proto"), xq)
            np.testing.assert_array_equal(nn, cos)
            np.testing.assert_array_equal(cos, proto_n)

    def test_unknown_kind_and_dim_mismatch(self):
        x = np.zeros((2, 3))
        y = np.array([0, 1])
        with pytest.raises(ValueError):
            fit_classifier(x, y, "MLP")
        clf = fit_classifier(x, y, "Proto")
        with pytest.raises(ShapeError):
            predict(clf, np.zeros((1, 4)))


class TestEvaluate:
    def _setup(self):
        enc = Encoder(ENC_CFG, seed=3).freeze()
        rng = np.random.default_rng(14)
        items = []
        for cls in range(6):
            base = rng.uniform(size=(3, 8, 8)).astype(np.float32)
            for _ in range(8):
                noisy = np.clip(base + 0.05 * rng.normal(size=base.shape), 0, 1)
                items.append((noisy.astype(np.float32), cls))
        return enc, LabeledDataset(items)

    def test_deterministic_report(self):
        enc, ds = self._setup()
        a = evaluate(enc, ds, (3, 1, 2), 10, "Proto", seed=5)
        b = evaluate(enc, ds, (3, 1, 2), 10, "Proto", seed=5)
        assert a.mean_accuracy == b.mean_accuracy
        assert np.array_equal(a.per_episode, b.per_episode)

    def test_perfect_classifier_zero_ci(self):
        report = EvalReport("LR", 5, 1, 15, 50, 1.0, 0.0, np.ones(50))
        recomputed = 1.96 * report.per_episode.std(ddof=1) / np.sqrt(50)
        assert recomputed == report.ci95_halfwidth == 0.0

    def test_ci_matches_stored_accuracies(self):
        enc, ds = self._setup()
        rep = evaluate(enc, ds, (3, 1, 2), 12, "NN", seed=6)
        expected = 1.96 * rep.per_episode.std(ddof=1) / np.sqrt(12)
        assert rep.ci95_halfwidth == pytest.approx(expected, abs=1e-12)

    def test_random_guess_near_chance(self):
        """Constant embeddings force ties -> always class 0 -> accuracy 1/n."""
        rng = np.random.default_rng(15)
        items = [(np.zeros(4), c) for c in range(5) for _ in range(20)]
        ds = LabeledDataset(items)
        accs = []
        for seed in range(200):
            ep = sample_episode(ds, 5, 1, 5, seed=seed)
            xs = np.stack([e for e, _ in ep.support])
            ys = np.array([l for _, l in ep.support])
            xq = np.stack([e for e, _ in ep.query])
            yq = np.array([l for _, l in ep.query])
            accs.append((predict(fit_classifier(xs, ys, "Proto"), xq) == yq).mean())
        assert np.mean(accs) == pytest.approx(0.2, abs=0.04)

    def test_evaluate_kinds_shares_episodes(self):
        enc, ds = self._setup()
        reports = evaluate_kinds(enc, ds, (3, 1, 2), 8, ["NN", "Cosine"], seed=7)
        assert [r.kind for r in reports] == ["NN", "Cosine"]
        csv = reports_csv(reports)
        assert csv.splitlines()[0] == "kind,way,shot,mean,ci95,episodes"
        assert len(csv.strip().splitlines()) == 3

    def test_formatted_percent_style(self):
        rep = EvalReport("LR", 5, 1, 15, 600, 0.49853, 0.00842, np.zeros(600))
        assert rep.formatted() == "49.85 ± 0.84"


class TestExportEmbeddings:
    def test_csv_contract_and_roundtrip(self, tmp_path):
        enc = Encoder(ENC_CFG, seed=4).freeze()
        rng = np.random.default_rng(16)
        items = [(rng.uniform(size=(3, 8, 8)).astype(np.float32), i % 3) for i in range(9)]
        ds = LabeledDataset(items, ids=[f"img{i}" for i in range(9)])
        path = tmp_path / "emb.csv"
        export_embeddings(enc, ds, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "id,class," + ",".join(f"e{i}" for i in range(16))
        assert len(lines) == 10

        ref = embed_dataset(enc, ds)
        for row, (vec, cls) in zip(lines[1:], ref.items):
            parts = row.split(",")
            assert int(parts[1]) == cls
            parsed = np.array([float(v) for v in parts[2:]])
            np.testing.assert_allclose(parsed, vec, atol=1e-7)

        path2 = tmp_path / "emb2.csv"
        export_embeddings(enc, ds, path2)
        assert path.read_bytes() == path2.read_bytes()
