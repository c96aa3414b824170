import json
import math

import numpy as np
import pytest

from semiprop import autodiff as ad
from semiprop.data import (AnnotationSet, build_label_maps,
                           gen_synthetic_dataset, read_manifest)
from semiprop.model import HyperShape, ModelOutputs, ProposalNetwork
from semiprop.perturb import Predictions
from semiprop.trainer import (AdamState, BatchVideo, TeacherState, TrainConfig,
                              Trainer, consistency_loss, ema_update,
                              supervised_loss, train_run, train_step)

TINY = HyperShape(T=16, C=4, H=4, Hp=4, D=8, N=4, K=2)


def tiny_cfg(**kw):
    base = dict(hidden=4, pem_hidden=4, n_samples=4, max_duration=8,
                batch_labeled=2, batch_unlabeled=2, epochs=1, seed=1,
                mu=0.5)  # C=4 test inputs: the default mu selects 0 channels
    base.update(kw)
    return TrainConfig(**base)


def make_batch(net, rng, n_labeled, n_unlabeled):
    h = net.hyper
    out = []
    for j in range(n_labeled):
        f = rng.normal(size=(h.T, h.C))
        anns = AnnotationSet([(3.0, 7.0)])
        lm = build_label_maps(anns, h.T, h.D)
        out.append(BatchVideo(f"lab{j}", f, True, lm))
    for j in range(n_unlabeled):
        out.append(BatchVideo(f"unl{j}", rng.normal(size=(h.T, h.C)), False))
    return out


class TestTrainConfig:
    def test_paper_defaults(self):
        cfg = TrainConfig()
        assert cfg.alpha == 0.999
        assert cfg.lambdas() == (1.0, 0.1, 0.0001, 0.001)
        assert cfg.mu == 2.0 ** -4 and cfg.omega == 0.3 and cfg.K == 2

    @pytest.mark.parametrize("kw", [dict(alpha=1.0), dict(alpha=0.0),
                                    dict(lambda2=-1.0), dict(batch_labeled=0),
                                    dict(precision="float16"),
                                    dict(recon_support="everything")])
    def test_invalid_values_rejected(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_file_roundtrip_and_unknown_key(self, tmp_path):
        cfg = tiny_cfg(lr=0.5)
        path = tmp_path / "config.json"
        cfg.to_file(path)
        assert TrainConfig.from_file(path) == cfg
        doc = json.loads(path.read_text())
        doc["learning_rate"] = 0.1
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError, match="unknown config keys"):
            TrainConfig.from_file(path)


class TestEmaUpdate:
    def test_single_step_arithmetic(self):
        teacher = TeacherState(params={"w": np.zeros(3)})
        ema_update(teacher, {"w": np.ones(3)}, alpha=0.999)
        assert np.allclose(teacher.params["w"], 0.001)
        assert teacher.step == 1

    def test_alpha_zero_copies_student(self):
        teacher = TeacherState(params={"w": np.full(3, 5.0)})
        student = {"w": np.array([1.0, 2.0, 3.0])}
        ema_update(teacher, student, alpha=0.0)
        assert np.array_equal(teacher.params["w"], student["w"])

    def test_constant_student_matches_closed_form_k50(self):
        alpha = 0.999
        theta0, theta = 3.0, -2.0
        teacher = TeacherState(params={"w": np.full(4, theta0)})
        student = {"w": np.full(4, theta)}
        for _ in range(50):
            ema_update(teacher, student, alpha)
        expect = alpha ** 50 * theta0 + (1 - alpha ** 50) * theta
        assert np.abs(teacher.params["w"] - expect).max() <= 1e-10
        assert teacher.step == 50

    def test_varying_student_matches_recurrence_oracle(self):
        rng = np.random.default_rng(0)
        alpha = 0.9
        teacher = TeacherState(params={"w": rng.normal(size=5)})
        expect = teacher.params["w"].copy()
        for _ in range(20):
            s = rng.normal(size=5)
            ema_update(teacher, {"w": s}, alpha)
            expect = alpha * expect + (1 - alpha) * s
        assert np.abs(teacher.params["w"] - expect).max() <= 1e-12

    def test_shape_mismatch(self):
        teacher = TeacherState(params={"w": np.zeros(3)})
        with pytest.raises(ValueError):
            ema_update(teacher, {"w": np.zeros(4)}, 0.5)


def const_outputs(T, D, value=0.5):
    vm = np.zeros((D, T))
    for d in range(D):
        vm[d, : T - d] = 1.0
    full = np.full((D, T), value) * vm
    return ModelOutputs(
        p_s=ad.Tensor(np.full(T, value), requires_grad=True),
        p_e=ad.Tensor(np.full(T, value), requires_grad=True),
        m_cc=ad.Tensor(full.copy(), requires_grad=True),
        m_cr=ad.Tensor(full.copy(), requires_grad=True),
        base_feat=ad.Tensor(np.zeros((T, 1))), valid_mask=vm,
    )


def naive_supervised_loss(p_s, p_e, m_cc, m_cr, labels):
    """Straightforward scalar-loop re-implementation used as an oracle."""

    def balanced_bce(p, target, mask):
        idx = [i for i in np.ndindex(target.shape) if mask[i]]
        n = len(idx)
        pos = [i for i in idx if target[i] > 0.5]
        neg = [i for i in idx if target[i] <= 0.5]
        w_pos = 0.5 * n / len(pos) if pos else 0.0
        w_neg = 0.5 * n / len(neg) if neg else 0.0
        total = 0.0
        for i in pos:
            total += w_pos * math.log(max(p[i], 1e-12))
        for i in neg:
            total += w_neg * math.log(max(1.0 - p[i], 1e-12))
        return -total / n

    ones = np.ones_like(labels.g_start)
    valid = labels.valid_mask.astype(bool)
    loss = balanced_bce(p_s, labels.g_start, ones.astype(bool))
    loss += balanced_bce(p_e, labels.g_end, ones.astype(bool))
    cls_mask = valid & ((labels.g_iou > 0.9) | (labels.g_iou < 0.3))
    loss += balanced_bce(m_cc, labels.g_iou, cls_mask)

    pos = [i for i in np.ndindex(labels.g_iou.shape)
           if valid[i] and labels.g_iou[i] > 0]
    neg = [i for i in np.ndindex(labels.g_iou.shape)
           if valid[i] and labels.g_iou[i] == 0]
    sel = pos + neg[: len(pos)] if pos else neg
    sq = sum((m_cr[i] - labels.g_iou[i]) ** 2 for i in sel)
    return loss + sq / max(len(sel), 1)


class TestSupervisedLoss:
    def test_uniform_half_prediction_value(self):
        T, D = 4, 2
        labels = build_label_maps(AnnotationSet([(0.0, 2.0)]), T, D)
        # force a fully specified tiny label set
        labels.g_start[:] = [1.0, 1.0, 0.0, 0.0]
        labels.g_end[:] = [0.0, 0.0, 1.0, 1.0]
        labels.g_iou[:] = 0.0
        labels.g_iou[1, 0] = 1.0
        out = const_outputs(T, D)
        got = supervised_loss(out, labels).item()
        # boundary terms ln2 each; cls term ln2 (both classes present);
        # regression: one positive + one subsampled negative at 0.5
        expect = 3 * math.log(2) + ((0.5 - 1.0) ** 2 + 0.25) / 2
        assert got == pytest.approx(expect, abs=1e-12)

    def test_saturated_predictions_drive_loss_to_zero(self):
        T, D = 8, 4
        labels = build_label_maps(AnnotationSet([(2.0, 6.0)]), T, D)
        out = const_outputs(T, D)
        eps = 1e-9
        out.p_s.data[:] = np.where(labels.g_start > 0.5, 1 - eps, eps)
        out.p_e.data[:] = np.where(labels.g_end > 0.5, 1 - eps, eps)
        out.m_cc.data[:] = np.where(labels.g_iou > 0.5, 1 - eps, eps)
        out.m_cr.data[:] = labels.g_iou
        assert supervised_loss(out, labels).item() < 1e-6

    def test_matches_naive_reimplementation(self):
        rng = np.random.default_rng(5)
        T, D = 10, 5
        for trial in range(10):
            s = rng.uniform(0, 6)
            labels = build_label_maps(AnnotationSet([(s, s + rng.uniform(1, 4))]),
                                      T, D)
            out = const_outputs(T, D)
            out.p_s.data[:] = rng.uniform(0.05, 0.95, T)
            out.p_e.data[:] = rng.uniform(0.05, 0.95, T)
            out.m_cc.data[:] = rng.uniform(0.05, 0.95, (D, T)) * labels.valid_mask
            out.m_cr.data[:] = rng.uniform(0.05, 0.95, (D, T)) * labels.valid_mask
            got = supervised_loss(out, labels).item()
            want = naive_supervised_loss(out.p_s.data, out.p_e.data,
                                         out.m_cc.data, out.m_cr.data, labels)
            assert abs(got - want) <= 1e-10

    def test_shape_mismatch(self):
        labels = build_label_maps(AnnotationSet([]), 8, 4)
        with pytest.raises(ValueError):
            supervised_loss(const_outputs(9, 4), labels)


class TestConsistencyLoss:
    def test_identical_outputs_zero(self):
        out = const_outputs(8, 4)
        assert consistency_loss(out, out.detach()).item() == 0.0

    def test_constant_offset_point_zero_one_per_field(self):
        out = const_outputs(8, 4, value=0.6)
        teacher = const_outputs(8, 4, value=0.5).detach()
        got = consistency_loss(out, teacher).item()
        assert got == pytest.approx(4 * 0.01, abs=1e-12)

    def test_gradient_reaches_student_only(self):
        out = const_outputs(8, 4, value=0.6)
        teacher = const_outputs(8, 4, value=0.5).detach()
        before = teacher.p_s.copy()
        consistency_loss(out, teacher).backward()
        assert out.p_s.grad is not None and np.abs(out.p_s.grad).max() > 0
        assert np.array_equal(teacher.p_s, before)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            consistency_loss(const_outputs(8, 4), const_outputs(9, 4).detach())


def fresh_state(cfg, seed_data=0, n_labeled=2, n_unlabeled=2):
    net = ProposalNetwork(TINY)
    student = net.init_params(cfg.seed, dtype=cfg.dtype)
    teacher = TeacherState(params=student.copy_store())
    opt = AdamState.like(student)
    batch = make_batch(net, np.random.default_rng(seed_data),
                       n_labeled, n_unlabeled)
    return net, student, teacher, opt, batch


class TestTrainStep:
    def test_report_has_all_terms_and_exact_composition(self):
        cfg = tiny_cfg()
        net, student, teacher, opt, batch = fresh_state(cfg)
        rng = np.random.default_rng(7)
        rep = train_step(net, student, teacher, batch, cfg, rng, opt)
        for key in ("supervised", "shift", "flip", "recon", "order"):
            assert rep[key] > 0.0
        l1, l2, l3, l4 = cfg.lambdas()
        composed = (rep["supervised"] + l1 * rep["shift"] + l2 * rep["flip"]
                    + l3 * rep["recon"] + l4 * rep["order"])
        assert rep["total"] == pytest.approx(composed, abs=1e-12)
        assert opt.t == 1 and teacher.step == 1

    def test_all_lambda_zero_reports_zero_aux(self):
        cfg = tiny_cfg(lambda1=0, lambda2=0, lambda3=0, lambda4=0)
        net, student, teacher, opt, batch = fresh_state(cfg)
        rep = train_step(net, student, teacher, batch, cfg,
                         np.random.default_rng(7), opt)
        assert rep["shift"] == rep["flip"] == rep["recon"] == rep["order"] == 0.0
        assert rep["total"] == rep["supervised"] > 0.0

    def test_unlabeled_only_with_zero_lambdas_rejected(self):
        cfg = tiny_cfg(lambda1=0, lambda2=0, lambda3=0, lambda4=0)
        net, student, teacher, opt, batch = fresh_state(cfg, n_labeled=0)
        with pytest.raises(ValueError):
            train_step(net, student, teacher, batch, cfg,
                       np.random.default_rng(0), opt)

    def test_three_steps_bitwise_deterministic(self):
        cfg = tiny_cfg()

        def run():
            net, student, teacher, opt, batch = fresh_state(cfg)
            rng = np.random.default_rng(11)
            reports = [train_step(net, student, teacher, batch, cfg, rng, opt)
                       for _ in range(3)]
            return reports, student

        r1, s1 = run()
        r2, s2 = run()
        assert r1 == r2
        for k in s1:
            assert np.array_equal(s1[k], s2[k])

    def test_zero_lambdas_make_unlabeled_videos_irrelevant(self):
        cfg = tiny_cfg(lambda1=0, lambda2=0, lambda3=0, lambda4=0)

        def run(n_unlabeled):
            net, student, teacher, opt, batch = fresh_state(
                cfg, n_unlabeled=n_unlabeled)
            rng = np.random.default_rng(13)
            for _ in range(2):
                train_step(net, student, teacher, batch, cfg, rng, opt)
            return student, teacher

        s_mixed, t_mixed = run(n_unlabeled=2)
        s_only, t_only = run(n_unlabeled=0)
        for k in s_mixed:
            assert np.array_equal(s_mixed[k], s_only[k])
            assert np.array_equal(t_mixed.params[k], t_only.params[k])

    def test_teacher_tracks_ema_closed_form(self):
        cfg = tiny_cfg(alpha=0.9)
        net, student, teacher, opt, batch = fresh_state(cfg)
        theta0 = student.copy_store()
        rng = np.random.default_rng(17)
        expect = {k: v.copy() for k, v in theta0.items()}
        for _ in range(5):
            train_step(net, student, teacher, batch, cfg, rng, opt)
            for k in expect:
                expect[k] = 0.9 * expect[k] + 0.1 * student[k]
        for k in expect:
            assert np.abs(teacher.params[k] - expect[k]).max() <= 1e-8


class TestTrainerRun:
    def _dataset(self, tmp_path, n=4, frac=0.5, T=16, C=4, seed=2):
        root = tmp_path / "data"
        gen_synthetic_dataset(root, n_videos=n, T=T, C=C,
                              label_fraction=frac, seed=seed)
        return root / "manifest.json", read_manifest(root / "manifest.json")

    def test_single_epoch_accounting(self, tmp_path):
        mpath, manifest = self._dataset(tmp_path, n=4, frac=0.5)
        cfg = tiny_cfg(epochs=1)
        ckpt, trainer = train_run(manifest, mpath, cfg, tmp_path / "run")
        assert trainer.epoch == 1
        assert trainer.opt.t == 1  # 2 labeled / batch of 2 -> one step
        assert trainer.teacher.step == 1
        lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 1
        rec = json.loads(lines[0])
        assert {"epoch", "steps", "wall_time_s", "supervised", "total"} <= set(rec)

    def test_resume_reproduces_trajectory_bitwise(self, tmp_path):
        mpath, manifest = self._dataset(tmp_path, n=4, frac=0.5)
        cfg2 = tiny_cfg(epochs=2)
        _, straight = train_run(manifest, mpath, cfg2, tmp_path / "run_a")

        cfg1 = tiny_cfg(epochs=1)
        ckpt, _ = train_run(manifest, mpath, cfg1, tmp_path / "run_b")
        _, resumed = train_run(manifest, mpath, cfg2, tmp_path / "run_b",
                               resume_from=ckpt)
        for k in straight.student:
            assert np.array_equal(straight.student[k], resumed.student[k])
            assert np.array_equal(straight.teacher.params[k],
                                  resumed.teacher.params[k])
        assert straight.opt.t == resumed.opt.t

    def test_no_labeled_videos_rejected(self, tmp_path):
        mpath, manifest = self._dataset(tmp_path, n=2, frac=0.0)
        with pytest.raises(ValueError):
            train_run(manifest, mpath, tiny_cfg(), tmp_path / "run")
