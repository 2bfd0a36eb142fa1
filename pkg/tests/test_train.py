import numpy as np
import pytest

from fbunet.autograd import Precision, backward, no_grad
from fbunet.checkpoint import dumps, load_checkpoint
from fbunet.data import DIHEDRAL, dihedral, load_pgm, make_folds, stack_samples, synthetic_samples
from fbunet.errors import ConfigError
from fbunet.losses import feedback_loss, weighted_cross_entropy
from fbunet.models import ModelConfig, build_model
from fbunet.train import (ABLATION_SETS, TrainConfig, TrainingDiverged, ablate, augment_batch, evaluate,
                          evaluate_arrays, inspect, label_gray_levels, load_splits, location_label,
                          train, train_step)

from conftest import tiny_train_config

TINY = (2, 3, 4, 5, 6)


def _batch(manifest, n=4):
    return stack_samples(manifest.load_samples(manifest.ids[:n]))


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-4 and cfg.epochs == 1500 and cfg.batch_size == 16
        assert cfg.model.lam == 0.5

    @pytest.mark.parametrize("kw, field", [(dict(lr=0.0), "lr"), (dict(epochs=-1), "epochs"),
                                           (dict(batch_size=0), "batch_size"),
                                           (dict(fold=(5, 5)), "fold")])
    def test_invalid(self, kw, field):
        with pytest.raises(ConfigError) as info:
            TrainConfig(**kw).validate()
        assert info.value.field == field

    def test_class_count_mismatch(self, tiny_manifest):
        cfg = tiny_train_config()
        cfg.model = ModelConfig(num_classes=3, filters=TINY)
        with pytest.raises(ConfigError):
            train(cfg, tiny_manifest)


class TestTwoLossPlumbing:
    def _grads(self, model, images, labels, lam, detach=False):
        for p in model.parameters():
            p.zero_grad()
        out = model.forward(images, training=True, detach_feedback=detach)
        l1 = weighted_cross_entropy(out.probs_round1, labels)
        l2 = weighted_cross_entropy(out.probs_round2, labels)
        total = l1 if lam == "first" else feedback_loss(l1, l2, lam)
        backward(total)
        return {n: p.grad.copy() for n, p in model.named_parameters()}

    def test_lambda_zero_kills_round1_only_path(self, tiny_manifest):
        images, labels = _batch(tiny_manifest)
        images = images.astype(np.float64)
        model = build_model(ModelConfig("feedback-plain", 4, TINY), seed=1, precision=Precision.EXTENDED)
        g0 = self._grads(model, images, labels, 0.0, detach=True)
        g5 = self._grads(model, images, labels, 0.5, detach=True)
        # with the feedback path cut, round-0 bn parameters (and the head's
        # round-0 use) are reached only through L_first
        round0 = [n for n in g0 if ".bn.0." in n]
        assert round0
        assert all(np.all(g0[n] == 0) for n in round0)
        assert all(np.abs(g5[n]).max() > 0 for n in round0)
        head0, head5 = g0["backbone.head.weight"], g5["backbone.head.weight"]
        assert not np.allclose(head0, head5)

    def test_gradients_linear_in_lambda(self, tiny_manifest):
        images, labels = _batch(tiny_manifest)
        images = images.astype(np.float64)
        model = build_model(ModelConfig("feedback-convlstm", 4, TINY), seed=1, precision=Precision.EXTENDED)
        g0 = self._grads(model, images, labels, 0.0)
        g5 = self._grads(model, images, labels, 0.5)
        gf = self._grads(model, images, labels, "first")
        for n in g0:
            np.testing.assert_allclose(g5[n] - g0[n], 0.5 * gf[n], rtol=1e-7, atol=1e-12)


class TestTrainStep:
    def test_single_sample_loss_decreases(self):
        images, labels = stack_samples(synthetic_samples(4, 1, 32, 11))
        model = build_model(ModelConfig(num_classes=4, filters=TINY), seed=0)
        w = np.ones(4, np.float32)

        def loss():
            with no_grad():
                out = model.forward(images, training=True)
                l1 = weighted_cross_entropy(out.probs_round1, labels, w)
                l2 = weighted_cross_entropy(out.probs_round2, labels, w)
                return feedback_loss(l1, l2, 0.5).item()

        before = loss()
        _, _, total = train_step(model, images, labels, w, 1e-4)
        assert total == pytest.approx(before, rel=1e-6)
        assert loss() < before

    def test_bn_stats_diverge(self, tiny_manifest):
        images, labels = _batch(tiny_manifest)
        model = build_model(ModelConfig(num_classes=4, filters=TINY), seed=0)
        for _ in range(10):
            train_step(model, images, labels, np.ones(4, np.float32), 1e-3)
        for name, block in model.blocks.items():
            assert not np.array_equal(block.bn[0].stats.mean, block.bn[1].stats.mean), name
            assert not np.array_equal(block.bn[0].stats.var, block.bn[1].stats.var), name

    def test_nan_aborts_with_diagnostic(self, tiny_manifest):
        cfg = tiny_train_config()
        splits = load_splits(tiny_manifest, cfg)
        splits["train"].images[...] = np.nan
        with pytest.raises(TrainingDiverged, match="epoch 1, batch 0"):
            train(cfg, tiny_manifest, splits=splits)


class TestTrain:
    def test_zero_epochs_returns_initial_model(self, tiny_manifest):
        cfg = tiny_train_config(epochs=0)
        report = train(cfg, tiny_manifest)
        fresh = build_model(cfg.model, seed=cfg.seed)
        assert dumps(report.model) == dumps(fresh)
        assert report.log_lines == []

    def test_log_format(self, tiny_manifest):
        report = train(tiny_train_config(epochs=2), tiny_manifest)
        assert len(report.log_lines) == 2
        fields = report.log_lines[0].split("\t")
        assert fields[0::2] == ["epoch", "L_first", "L_second", "L", "val_mIoU"]
        assert fields[1] == "1"
        l1, l2, l = (float(v) for v in fields[3:8:2])
        assert l == pytest.approx(0.5 * l1 + l2, abs=2e-6)

    def test_single_round_log(self, tiny_manifest):
        report = train(tiny_train_config("unet", epochs=1), tiny_manifest)
        assert report.log_lines[0].split("\t")[5] == "-"

    def test_deterministic(self, tiny_manifest, tmp_path):
        a = train(tiny_train_config(epochs=2, checkpoint_dir=str(tmp_path / "a")), tiny_manifest)
        b = train(tiny_train_config(epochs=2, checkpoint_dir=str(tmp_path / "b")), tiny_manifest)
        assert a.log_text == b.log_text
        for name in ("best.ckpt", "latest.ckpt", "metrics.log"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert (tmp_path / "a" / "metrics.log").read_text() == a.log_text

    def test_best_checkpoint_tracks_validation(self, tiny_manifest, tmp_path):
        report = train(tiny_train_config(epochs=3, checkpoint_dir=str(tmp_path)), tiny_manifest)
        vals = [h["val_miou"] for h in report.history]
        assert report.best_val == max(vals)
        assert report.best_epoch == 1 + int(np.argmax(vals))
        best, meta = load_checkpoint(tmp_path / "best.ckpt")
        assert meta["epoch"] == report.best_epoch
        assert dumps(best) == dumps(report.best_model)

    def test_eval_every(self, tiny_manifest):
        report = train(tiny_train_config(epochs=3, eval_every=2), tiny_manifest)
        vals = [h["val_miou"] for h in report.history]
        assert np.isnan(vals[0]) and not np.isnan(vals[1]) and np.isnan(vals[2])

    def test_class_weights_from_train_split(self, tiny_manifest):
        cfg = tiny_train_config(epochs=0)
        report = train(cfg, tiny_manifest)
        labels = report.splits["train"].labels
        counts = np.bincount(labels.ravel(), minlength=4)
        np.testing.assert_allclose(report.class_weights, counts.sum() / (4 * counts), rtol=1e-6)

    def test_augment_batch_applies_one_dihedral_element_per_sample(self, rng):
        images = rng.random((6, 1, 5, 5)).astype(np.float32)
        labels = rng.integers(0, 4, (6, 5, 5))
        out_img, out_lab = augment_batch(images, labels, np.random.default_rng(3))
        picks = np.random.default_rng(3).integers(0, len(DIHEDRAL), 6)
        for j, e in enumerate(picks):
            k, flip = DIHEDRAL[e]
            assert np.array_equal(out_img[j, 0], dihedral(images[j, 0], k, flip))
            assert np.array_equal(out_lab[j], dihedral(labels[j], k, flip))
        assert out_img.dtype == images.dtype and out_lab.dtype == labels.dtype

    def test_augmented_training_is_deterministic(self, tiny_manifest):
        a = train(tiny_train_config(epochs=2, augment=True), tiny_manifest)
        b = train(tiny_train_config(epochs=2, augment=True), tiny_manifest)
        plain = train(tiny_train_config(epochs=2), tiny_manifest)
        assert a.log_text == b.log_text and dumps(a.model) == dumps(b.model)
        assert a.log_text != plain.log_text

    def test_splits_follow_folds(self, tiny_manifest):
        cfg = tiny_train_config()
        fold = make_folds(tiny_manifest, 4, (2, 1, 1), 0)[0]
        splits = load_splits(tiny_manifest, cfg)
        assert splits["train"].ids == fold.train and splits["test"].ids == fold.test


class TestEvaluate:
    def test_reevaluation_identical_and_columns(self, tiny_manifest, tmp_path):
        train(tiny_train_config(epochs=1, checkpoint_dir=str(tmp_path)), tiny_manifest)
        a = evaluate(tmp_path / "latest.ckpt", tiny_manifest)
        b = evaluate(tmp_path / "latest.ckpt", tiny_manifest)
        assert np.array_equal(a.confusion["round2"].counts, b.confusion["round2"].counts)
        assert a.table("x") == b.table("x")
        header = a.table("x").splitlines()[0].split()
        assert header == ["Method", "background", "(%)", "blob1", "(%)", "blob2", "(%)",
                          "blob3", "(%)", "meanIoU", "(%)"]
        rows = a.rows("x")
        assert [r.split("\t")[2] for r in rows] == tiny_manifest.class_names + ["meanIoU"]
        assert a.confusion["round2"].total == len(tiny_manifest) * 16 * 16

    def test_config_mismatch(self, tiny_manifest, tmp_path):
        from fbunet.checkpoint import save_checkpoint
        save_checkpoint(tmp_path / "m.ckpt", build_model(ModelConfig(num_classes=3, filters=TINY)))
        with pytest.raises(ConfigError):
            evaluate(tmp_path / "m.ckpt", tiny_manifest)

    def test_single_round_result(self, tiny_manifest):
        images, labels = _batch(tiny_manifest)
        res = evaluate_arrays(build_model(ModelConfig("unet", 4, TINY)), images, labels)
        assert list(res.confusion) == ["round1"]


class TestAblate:
    def test_labels(self):
        assert [location_label(s) for s in ABLATION_SETS] == ["a", "b", "c", "d", "e", "a, b, d, e", "ours"]

    def test_single_arm_equals_train_evaluate(self, tiny_manifest):
        cfg = tiny_train_config(epochs=1)
        report = ablate(cfg, [("a", "b", "c", "d", "e")], tiny_manifest)
        (label, res, count), = report.rows
        assert label == "ours"
        trained = train(cfg, tiny_manifest)
        test = trained.splits["test"]
        direct = evaluate_arrays(trained.best_model, test.images, test.labels, cfg.batch_size)
        assert np.array_equal(res.confusion["round2"].counts, direct.confusion["round2"].counts)
        assert count == trained.model.num_parameters()
        assert report.table().splitlines()[1].startswith("ours")

    def test_parameter_counts_differ_by_substitution(self):
        plain = build_model(ModelConfig("feedback-plain", 4, TINY))
        full = build_model(ModelConfig("feedback-convlstm", 4, TINY))
        per_plain = {n: b.num_parameters() for n, b in plain.blocks.items()}
        per_full = {n: b.num_parameters() for n, b in full.blocks.items()}
        for locs in ABLATION_SETS:
            arm = build_model(ModelConfig("feedback-convlstm", 4, TINY, lstm_locations=locs))
            lstm = {n for n, b in arm.blocks.items() if type(b).__name__ == "ConvLSTMCell"}
            expected = plain.num_parameters() + sum(per_full[n] - per_plain[n] for n in lstm)
            assert arm.num_parameters() == expected

    def test_empty_set_rejected(self, tiny_manifest):
        with pytest.raises(ConfigError):
            ablate(tiny_train_config(), [()], tiny_manifest)

    def test_needs_convlstm(self, tiny_manifest):
        with pytest.raises(ConfigError):
            ablate(tiny_train_config("unet"), [("a",)], tiny_manifest)


class TestInspect:
    @pytest.fixture
    def ckpt_path(self, tmp_path):
        def make(variant):
            from fbunet.checkpoint import save_checkpoint
            path = tmp_path / f"{variant}.ckpt"
            save_checkpoint(path, build_model(ModelConfig(variant, 4, TINY), seed=5))
            return path
        return make

    def test_panels(self, tiny_manifest, ckpt_path, tmp_path):
        img, lab, _ = tiny_manifest.entries[0]
        out = inspect(ckpt_path("feedback-convlstm"), tiny_manifest.root / img, tmp_path / "p",
                      tiny_manifest.root / lab)
        assert set(out) == {"input", "truth", "pred", "prob0", "prob1", "prob2", "prob3",
                            "activation_sum"}
        pred = load_pgm(out["pred"])
        assert set(np.unique(pred)) <= {0, 85, 170, 255}
        probs = np.stack([load_pgm(out[f"prob{c}"]).astype(np.float64) for c in range(4)])
        probs /= probs.sum(axis=0, keepdims=True)
        # quantization may blur near-ties; every other pixel keeps its argmax
        recovered = label_gray_levels(probs.argmax(axis=0), 4)
        top2 = np.sort(probs, axis=0)[-2:]
        clear = (top2[1] - top2[0]) > 2 / 255
        assert np.array_equal(recovered[clear], pred[clear])
        act = load_pgm(out["activation_sum"])
        assert act.min() == 0 and act.max() == 255

    def test_no_activation_panel_for_unet(self, tiny_manifest, ckpt_path, tmp_path):
        img, _, _ = tiny_manifest.entries[0]
        out = inspect(ckpt_path("unet"), tiny_manifest.root / img, tmp_path / "u")
        assert "activation_sum" not in out and "truth" not in out

    def test_missing_label_warns(self, tiny_manifest, ckpt_path, tmp_path, caplog):
        img, _, _ = tiny_manifest.entries[0]
        out = inspect(ckpt_path("feedback-plain"), tiny_manifest.root / img, tmp_path / "w",
                      tmp_path / "nope.pgm")
        assert "truth" not in out
        assert "not found" in caplog.text

    def test_gray_levels(self):
        assert label_gray_levels(np.array([0, 1, 2]), 3).tolist() == [0, 128, 255]
