import numpy as np
import pytest

from spdnet_geo import align as al
from spdnet_geo import classify as cl
from spdnet_geo import data as dat
from spdnet_geo import geometry as geo
from spdnet_geo.errors import EmptyInput, ShapeError, TrainingError
from conftest import random_spd


def separable_set(rng, dim=4, n_subjects=2, n_classes=3, n_trials=10):
    """Well-separated classes, mild noise, no subject distortion."""
    cfg = dat.SynthConfig(dim=dim, n_subjects=n_subjects, n_classes=n_classes,
                          n_trials=n_trials, class_spread=0.9, noise_scale=0.08,
                          seed=int(rng.integers(1 << 30)))
    return dat.synth_generate(cfg)


def accuracy(pred, truth):
    return float(np.mean(np.asarray(pred) == np.asarray(truth)))


class TestMdm:
    def test_prototype_query_recovers_class(self, rng):
        ds = separable_set(rng)
        model = cl.mdm_fit(ds)
        for k, proto in zip(model.classes, model.prototypes):
            assert cl.mdm_predict(model, proto) == k

    def test_two_class_diagonal_example(self):
        protos = np.stack([np.diag([np.e, 1.0]), np.diag([1.0, np.e])])
        model = cl.MdmModel(np.array([0, 1]), protos)
        assert cl.mdm_predict(model, np.diag([np.e**0.9, 1.0])) == 0

    def test_missing_class_rejected(self, rng):
        ds = separable_set(rng, n_classes=2)
        with pytest.raises(TrainingError):
            cl.mdm_fit(ds, n_classes=4)

    def test_congruence_invariance(self, rng):
        ds = separable_set(rng)
        model = cl.mdm_fit(ds)
        W = rng.standard_normal((4, 4))
        query = ds.mats[3]
        moved = cl.MdmModel(model.classes,
                            geo.sym(W.T @ model.prototypes @ W))
        assert cl.mdm_predict(model, query) == cl.mdm_predict(moved, geo.sym(W.T @ query @ W))

    def test_separable_accuracy(self, rng):
        ds = separable_set(rng)
        model = cl.mdm_fit(ds)
        assert accuracy(cl.mdm_predict_set(model, ds), ds.labels) >= 0.95


class TestTslr:
    def test_separable_reaches_full_training_accuracy(self, rng):
        ds = separable_set(rng)
        model = cl.tslr_fit(ds, steps=300)
        assert accuracy(cl.tslr_predict_set(model, ds), ds.labels) == 1.0

    def test_probabilities_normalized(self, rng):
        ds = separable_set(rng)
        model = cl.tslr_fit(ds, steps=50)
        for C in ds.mats[:10]:
            _, p = cl.tslr_predict(model, C)
            assert abs(p.sum() - 1.0) < 1e-10
            assert np.all(p >= 0)

    def test_identical_features_give_priors(self, rng):
        C = random_spd(rng, 3)
        mats = np.stack([C] * 10)
        labels = np.array([0] * 8 + [1] * 2)
        ds = dat.CovarianceSet(3, np.zeros(10, dtype=int), labels, mats)
        model = cl.tslr_fit(ds, steps=2000)
        _, p = cl.tslr_predict(model, C)
        assert abs(p[0] - 0.8) < 0.05
        assert abs(p[1] - 0.2) < 0.05

    def test_needs_two_classes(self, rng):
        ds = separable_set(rng, n_classes=1)
        with pytest.raises(TrainingError):
            cl.tslr_fit(ds, steps=5)


class TestLda:
    def test_symmetric_two_class_boundary(self, rng):
        # exactly mirrored classes: equal priors, mu_1 = -mu_0, so the
        # boundary passes through the origin (delta_0 == delta_1 there)
        mu = np.array([1.0, 0.5])
        X0 = mu + 0.1 * rng.standard_normal((40, 2))
        X = np.vstack([X0, -X0])
        y = np.r_[np.zeros(40, dtype=int), np.ones(40, dtype=int)]
        model = cl.lda_fit(X, y, shrinkage=0.0)
        d = cl.lda_decision(model, np.zeros(2))
        assert abs(d[0] - d[1]) < 1e-10
        assert cl.lda_predict(model, mu) == 0
        assert cl.lda_predict(model, -mu) == 1

    def test_priors_shift_boundary(self, rng):
        mu = np.array([1.0, 0.0])
        X0 = mu + 0.5 * rng.standard_normal((90, 2))
        X1 = -mu + 0.5 * rng.standard_normal((10, 2))
        X = np.vstack([X0, X1])
        y = np.r_[np.zeros(90, dtype=int), np.ones(10, dtype=int)]
        skewed = cl.lda_fit(X, y)
        balanced = cl.lda_fit(np.vstack([X0[:10], X1]),
                              np.r_[np.zeros(10, dtype=int), np.ones(10, dtype=int)])
        # a point between the means flips toward the frequent class
        probe = np.array([-0.15, 0.0])
        d_skew = cl.lda_decision(skewed, probe)
        d_bal = cl.lda_decision(balanced, probe)
        assert (d_skew[0] - d_skew[1]) > (d_bal[0] - d_bal[1])

    def test_tsa_lda_separable(self, rng):
        ds = separable_set(rng)
        model = cl.tsa_lda_fit(ds)
        assert accuracy(cl.tsa_lda_predict_set(model, ds), ds.labels) >= 0.95

    def test_lda_needs_two_per_class(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0], [1.1, 0.9]])
        with pytest.raises(TrainingError):
            cl.lda_fit(X, np.array([0, 1, 1]))


def make_epoch_set(rng, n_per_class=20, T=100):
    """Two classes with variance concentrated on different channels."""
    epochs, labels, subjects = [], [], []
    for i in range(n_per_class * 2):
        k = i % 2
        X = 0.1 * rng.standard_normal((3, T))
        X[k] += rng.standard_normal(T) * 2.0
        epochs.append(X)
        labels.append(k)
        subjects.append(i % 4)
    return dat.EpochSet(3, np.array(subjects), np.array(labels), epochs)


class TestCsp:
    def test_leading_filter_aligns_with_active_channel(self, rng):
        es = make_epoch_set(rng)
        model = cl.csp_fit(es, m_filters=2)
        # bank for class 0: the top (variance-enhancing) filter is the last
        # row and should point along channel 0, where class 0 has its power
        best = model.filters[0][-1]
        direction = np.abs(best) / np.linalg.norm(best)
        assert direction[0] > 0.99

    def test_filters_whiten_total_covariance(self, rng):
        es = make_epoch_set(rng)
        model = cl.csp_fit(es, m_filters=2)
        covs = np.stack([dat.estimate_covariance(X) for X in es.epochs])
        for k, bank in zip(model.classes, model.filters):
            C_t = covs[es.labels == k].mean(axis=0) + covs[es.labels != k].mean(axis=0)
            G = bank @ C_t @ bank.T
            assert np.abs(G - np.eye(len(bank))).max() < 1e-8

    def test_classifies_constructed_data(self, rng):
        es = make_epoch_set(rng)
        model = cl.csp_fit(es, m_filters=2)
        assert accuracy(cl.csp_predict_set(model, es), es.labels) >= 0.95

    def test_zscore_variant(self, rng):
        es = make_epoch_set(rng)
        plain = cl.csp_fit(es, m_filters=2)
        zed = cl.csp_fit(es, m_filters=2, zscore=True)
        acc_plain = accuracy(cl.csp_predict_set(plain, es), es.labels)
        acc_z = accuracy(cl.csp_predict_set(zed, es), es.labels)
        assert acc_z >= 0.5  # variant stays functional on standardized data
        assert plain.zscore is False and zed.zscore is True

    def test_odd_filter_count_rejected(self, rng):
        es = make_epoch_set(rng)
        with pytest.raises(ShapeError):
            cl.csp_fit(es, m_filters=3)


class TestDcNet:
    def test_width_pattern(self):
        assert cl.default_dcnet_widths(22) == (22, 44, 44, 22)

    def test_identity_stack_zero_head_ties_to_first_class(self, rng):
        d = 3
        stack = {"w_0": np.eye(d)}
        head = {"h0": np.zeros((4, geo.vec_dim(d))), "h1": np.zeros((2, 4)),
                "b": np.zeros(2)}
        model = cl.DcNetModel((d, d), 1e-6, np.array([0, 1]), stack, head)
        assert cl.dcnet_predict(model, random_spd(rng, d)) == 0

    def test_ce_only_training_reaches_95_percent(self, rng):
        ds = separable_set(rng, n_trials=15)
        cfg = cl.DcNetConfig(lambda_act=0.0, lambda_sub=0.0, steps=250,
                             batch_size=64, seed=0)
        model = cl.dcnet_fit(ds, cfg)
        assert accuracy(cl.dcnet_predict_set(model, ds), ds.labels) >= 0.95
        assert model.ce_history[-1] < model.ce_history[0]

    def test_gradient_check_full_loss(self, rng):
        import spdnet_geo.autodiff as ad

        ds = separable_set(rng, dim=6, n_classes=2, n_trials=2)
        widths = (6, 8, 6)
        U = cl.eigv_basis(ds.mats)
        params = {
            "w_0": cl.init_congruence_weight(U, 6, 8),
            "w_1": cl.init_congruence_weight(U, 8, 6),
            "h0": rng.standard_normal((5, geo.vec_dim(6))) / np.sqrt(geo.vec_dim(6)),
            "h1": rng.standard_normal((2, 5)) / np.sqrt(5),
            "b": np.zeros(2),
        }
        y_idx = np.searchsorted(np.unique(ds.labels), ds.labels)
        subj_idx, _ = al._dense(ds.subjects)

        def build(tape, leaves):
            C = tape.leaf(ds.mats, symmetric=True)
            for i in range(2):
                C = ad.add_scaled_identity(ad.congruence(C, leaves[f"w_{i}"]), 1e-4)
            z = ad.vec_upper(ad.matrix_log(C))
            hidden = ad.matmul(z, ad.transpose(leaves["h0"]))
            logits = ad.linear(hidden, leaves["h1"], leaves["b"])
            ce = ad.cross_entropy(ad.log_softmax(logits), y_idx)
            W_A, B_A, W_S, B_S = ad.fisher_stats(z, y_idx, subj_idx)
            cfg = cl.DcNetConfig(lambda_act=0.3, lambda_sub=0.2)
            return ad.add(ce, cl._fisher_penalties(cfg, W_A, B_A, W_S, B_S))

        err = ad.check_gradient(build, params, step=1e-5)
        assert err < 1e-4

    def test_predict_matches_straightline_oracle(self, rng):
        ds = separable_set(rng, n_trials=4)
        cfg = cl.DcNetConfig(steps=20, batch_size=32, seed=1)
        model = cl.dcnet_fit(ds, cfg)
        for C in ds.mats[:10]:
            # independent straight-line recomputation of the predict path
            M = C.copy()
            for i in range(len(model.widths) - 1):
                W = model.stack[f"w_{i}"]
                M = W.T @ M @ W
                M = M + model.eps * np.eye(M.shape[0])
            w, U = np.linalg.eigh(M)
            w = np.maximum(w, 1e-10 * w.max())
            S = (U * np.log(w)) @ U.T
            iu, ju = np.triu_indices(S.shape[0])
            z = S[iu, ju] * np.where(iu == ju, 1.0, np.sqrt(2.0))
            logits = model.head["h1"] @ (model.head["h0"] @ z) + model.head["b"]
            expected = int(model.classes[int(np.argmax(logits))])
            assert cl.dcnet_predict(model, C) == expected
            assert np.array_equal(cl.dcnet_logits(model, C), logits)


class TestRifuNet:
    def test_ce_only_training_reaches_95_percent(self, rng):
        ds = separable_set(rng, n_trials=15)
        cfg = cl.RifuNetConfig(lambda_act=0.0, lambda_sub=0.0, lambda_rec=0.0,
                               steps=250, batch_size=64, seed=0)
        model = cl.rifunet_fit(ds, cfg)
        assert accuracy(cl.rifunet_predict_set(model, ds), ds.labels) >= 0.95
        assert model.ce_history[-1] < model.ce_history[0]

    def test_identical_batch_gives_zero_features(self, rng):
        ds = separable_set(rng, n_trials=3)
        cfg = cl.RifuNetConfig(steps=10, batch_size=16, seed=2, base_mode="batch")
        model = cl.rifunet_fit(ds, cfg)
        C = ds.mats[0]
        _, feats = cl.rifunet_predict(model, np.stack([C] * 4))
        assert np.abs(feats).max() < 1e-6

    def test_single_item_batch_mode_predicts_bias_argmax(self, rng):
        ds = separable_set(rng, n_trials=3)
        cfg = cl.RifuNetConfig(steps=10, batch_size=16, seed=2, base_mode="batch")
        model = cl.rifunet_fit(ds, cfg)
        labels, feats = cl.rifunet_predict(model, ds.mats[0])
        assert np.abs(feats).max() < 1e-6
        assert labels[0] == int(model.classes[int(np.argmax(model.head_b))])

    def test_frozen_base_is_batch_invariant(self, rng):
        ds = separable_set(rng, n_trials=5)
        cfg = cl.RifuNetConfig(steps=30, batch_size=32, seed=3, base_mode="train")
        model = cl.rifunet_fit(ds, cfg)
        full, _ = cl.rifunet_predict(model, ds.mats)
        perm = rng.permutation(len(ds))
        permuted, _ = cl.rifunet_predict(model, ds.mats[perm])
        assert np.array_equal(full[perm], permuted)
        one_by_one = np.array([cl.rifunet_predict(model, C)[0][0] for C in ds.mats])
        assert np.array_equal(full, one_by_one)

    def test_empty_batch_rejected(self, rng):
        ds = separable_set(rng, n_trials=2)
        model = cl.rifunet_fit(ds, cl.RifuNetConfig(steps=5, batch_size=8))
        with pytest.raises(EmptyInput):
            cl.rifunet_predict(model, np.zeros((0, 4, 4)))

    def test_predict_matches_straightline_oracle(self, rng):
        ds = separable_set(rng, n_trials=4)
        model = cl.rifunet_fit(ds, cl.RifuNetConfig(steps=15, batch_size=32, seed=4))
        labels, feats = cl.rifunet_predict(model, ds.mats[:10])

        def logm(M):
            w, U = np.linalg.eigh(M)
            w = np.maximum(w, 1e-10 * w.max())
            return (U * np.log(w)) @ U.T

        def expm(S):
            w, U = np.linalg.eigh(S)
            return (U * np.exp(w)) @ U.T

        def cong(M, W):
            M = W.T @ M @ W
            return M + model.eps * np.eye(M.shape[0])

        w, U = np.linalg.eigh(model.base)
        w = np.maximum(w, 1e-10 * w.max())
        iP = (U * (1.0 / np.sqrt(w))) @ U.T
        iu, ju = np.triu_indices(4)
        wts = np.where(iu == ju, 1.0, np.sqrt(2.0))
        for i, C in enumerate(ds.mats[:10]):
            e1 = cong(C, model.weights["enc_0"])
            bott = cong(e1, model.weights["enc_1"])
            d2 = cong(bott, model.weights["dec_0"])
            m1 = expm(0.5 * (logm(d2) + logm(e1)))
            d1 = cong(m1, model.weights["dec_1"])
            out = expm(0.5 * (logm(d1) + logm(C)))
            S = logm(iP @ out @ iP)
            z = S[iu, ju] * wts
            logits = model.head_w @ z + model.head_b
            assert labels[i] == int(model.classes[int(np.argmax(logits))])
            assert np.array_equal(feats[i], z)


class TestPersistence:
    @pytest.mark.parametrize("kind", ["mdm", "tslr", "tsa-lda", "dcnet", "rifunet"])
    def test_round_trips(self, rng, tmp_path, kind):
        ds = separable_set(rng, n_trials=4)
        if kind == "mdm":
            model = cl.mdm_fit(ds)
        elif kind == "tslr":
            model = cl.tslr_fit(ds, steps=10)
        elif kind == "tsa-lda":
            model = cl.tsa_lda_fit(ds)
        elif kind == "dcnet":
            model = cl.dcnet_fit(ds, cl.DcNetConfig(steps=5, batch_size=16))
        else:
            model = cl.rifunet_fit(ds, cl.RifuNetConfig(steps=5, batch_size=16))
        path = tmp_path / "m.clsf"
        cl.save_classifier(model, path)
        back = cl.load_classifier(path)
        for C in ds.mats[:5]:
            if kind == "mdm":
                assert cl.mdm_predict(back, C) == cl.mdm_predict(model, C)
            elif kind == "tslr":
                a, pa = cl.tslr_predict(model, C)
                b, pb = cl.tslr_predict(back, C)
                assert a == b and np.array_equal(pa, pb)
            elif kind == "tsa-lda":
                assert cl.tsa_lda_predict(back, C) == cl.tsa_lda_predict(model, C)
            elif kind == "dcnet":
                assert np.array_equal(cl.dcnet_logits(back, C), cl.dcnet_logits(model, C))
            else:
                la, fa = cl.rifunet_predict(model, C)
                lb, fb = cl.rifunet_predict(back, C)
                assert np.array_equal(la, lb) and np.array_equal(fa, fb)

    def test_csp_round_trip(self, rng, tmp_path):
        es = make_epoch_set(rng)
        model = cl.csp_fit(es, m_filters=2)
        path = tmp_path / "m.clsf"
        cl.save_classifier(model, path)
        back = cl.load_classifier(path)
        assert np.array_equal(cl.csp_predict_set(back, es), cl.csp_predict_set(model, es))
