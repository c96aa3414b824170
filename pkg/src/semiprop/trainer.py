"""Mean-teacher training: EMA updates, supervised and consistency losses,
pretext losses, loss composition, batching, and the Adam optimizer.

Per step, the student sees the clean input (supervised loss on labeled
videos), a channel-shifted input and a flipped input (consistency against the
teacher's clean-pass predictions, the flip branch aligned back), a masked
input (reconstruction) and a clip-shuffled input (order prediction). The
teacher runs in evaluation mode and receives no gradients; after each
optimizer step its weights follow the student by exponential moving average.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import pretext
from .data import DatasetManifest, LabelMaps, build_label_maps, load_video
from .model import (HyperShape, ModelOutputs, ParamStore, ProposalNetwork,
                    backward, load_checkpoint, save_checkpoint, wrap_params)
from .perturb import Predictions, align_flip_outputs, temporal_flip, temporal_shift

log = logging.getLogger(__name__)

LOG_EPS = 1e-12


@dataclass
class TrainConfig:
    alpha: float = 0.999
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.0001
    lambda4: float = 0.001
    mu: float = 2.0 ** -4
    omega: float = 0.3
    K: int = 2
    p_drop: float = 0.1
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    seed: int = 1
    precision: str = "float64"
    recon_support: str = "all"  # or "masked_only"
    hidden: int = 32
    pem_hidden: int = 16
    n_samples: int = 8
    max_duration: int | None = None  # None -> D = T

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must be in (0,1), got {self.alpha}")
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_labeled < 1:
            raise ValueError("batch_labeled must be >= 1")
        if self.batch_unlabeled < 0:
            raise ValueError("batch_unlabeled must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.recon_support not in ("all", "masked_only"):
            raise ValueError(f"unknown recon_support {self.recon_support!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def lambdas(self):
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        doc.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TeacherState:
    params: ParamStore
    step: int = 0


def ema_update(teacher: TeacherState, student: ParamStore, alpha: float) -> TeacherState:
    """theta' <- alpha * theta' + (1 - alpha) * theta, in place."""
    for name, tv in teacher.params.items():
        sv = student[name]
        if sv.shape != tv.shape:
            raise ValueError(f"shape mismatch for {name}: {tv.shape} vs {sv.shape}")
        tv *= alpha
        tv += (1.0 - alpha) * sv
    teacher.step += 1
    return teacher


def _balanced_bce(p: ad.Tensor, target: np.ndarray, mask: np.ndarray | None,
                  what: str) -> ad.Tensor:
    """Class-balanced binary logistic loss; targets binarized at 0.5,
    positives/negatives reweighted by inverse frequency inside `mask`."""
    if mask is None:
        mask = np.ones_like(target)
    mask = mask.astype(bool)
    pos = (target > 0.5) & mask
    neg = (~(target > 0.5)) & mask
    n = float(mask.sum())
    n_pos, n_neg = float(pos.sum()), float(neg.sum())
    if n_pos == 0.0:
        log.warning("no positive entries for %s; positive term dropped", what)
    w_pos = 0.5 * n / n_pos if n_pos else 0.0
    w_neg = 0.5 * n / n_neg if n_neg else 0.0
    dt = p.data.dtype
    pos_w = (pos * w_pos).astype(dt)
    neg_w = (neg * w_neg).astype(dt)
    term = ad.mul(ad.log(p, eps=LOG_EPS), pos_w) + ad.mul(ad.log(1.0 - p, eps=LOG_EPS), neg_w)
    return ad.tsum(term) * (-1.0 / n)


def supervised_loss(out: ModelOutputs, labels: LabelMaps,
                    rng: np.random.Generator | None = None) -> ad.Tensor:
    """Boundary losses + candidate-map classification and regression losses.

    Classification uses positives g_iou > 0.9 and negatives g_iou < 0.3 on
    the valid region; regression is MSE over positives (g_iou > 0) plus a
    1:1 randomly subsampled set of zero-target negatives.
    """
    if out.p_s.data.shape != labels.g_start.shape or out.m_cr.data.shape != labels.g_iou.shape:
        raise ValueError("prediction/label shape mismatch")
    loss = _balanced_bce(out.p_s, labels.g_start, None, "start boundaries")
    loss = loss + _balanced_bce(out.p_e, labels.g_end, None, "end boundaries")

    valid = labels.valid_mask.astype(bool)
    cls_mask = valid & ((labels.g_iou > 0.9) | (labels.g_iou < 0.3))
    loss = loss + _balanced_bce(out.m_cc, labels.g_iou, cls_mask, "confidence map")

    pos = valid & (labels.g_iou > 0.0)
    neg = valid & (labels.g_iou == 0.0)
    n_pos = int(pos.sum())
    sel = pos.copy()
    neg_idx = np.flatnonzero(neg.ravel())
    if n_pos and neg_idx.size:
        take = min(n_pos, neg_idx.size)
        if rng is not None and take < neg_idx.size:
            chosen = rng.choice(neg_idx, size=take, replace=False)
        else:
            chosen = neg_idx[:take]
        sel.ravel()[chosen] = True
    elif not n_pos:
        sel = neg
    count = max(float(sel.sum()), 1.0)
    dt = out.m_cr.data.dtype
    sq = ad.square(out.m_cr - labels.g_iou.astype(dt))
    loss = loss + ad.tsum(ad.mul(sq, sel.astype(dt))) / count
    return loss


def consistency_loss(student_out: ModelOutputs, teacher_aligned: Predictions) -> ad.Tensor:
    """Sum of per-field mean squared differences; maps restricted to the
    intersection of valid masks. Teacher values are constants."""
    if student_out.p_s.data.shape != teacher_aligned.p_s.shape:
        raise ValueError("student/teacher shape mismatch")
    dt = student_out.p_s.data.dtype
    loss = ad.tmean(ad.square(student_out.p_s - teacher_aligned.p_s.astype(dt)))
    loss = loss + ad.tmean(ad.square(student_out.p_e - teacher_aligned.p_e.astype(dt)))
    inter = (student_out.valid_mask * teacher_aligned.valid_mask).astype(dt)
    denom = max(float(inter.sum()), 1.0)
    for s_map, t_map in ((student_out.m_cc, teacher_aligned.m_cc),
                         (student_out.m_cr, teacher_aligned.m_cr)):
        sq = ad.square(s_map - t_map.astype(dt))
        loss = loss + ad.tsum(ad.mul(sq, inter)) / denom
    return loss


@dataclass
class AdamState:
    m: ParamStore
    v: ParamStore
    t: int = 0

    @classmethod
    def like(cls, params: ParamStore) -> "AdamState":
        zeros = lambda: ParamStore({k: np.zeros_like(v) for k, v in params.items()})
        return cls(m=zeros(), v=zeros())


def adam_step(params: ParamStore, grads: ParamStore, state: AdamState,
              cfg: TrainConfig) -> None:
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


@dataclass
class BatchVideo:
    video_id: str
    features: np.ndarray  # (T, C) in training dtype
    labeled: bool
    label_maps: LabelMaps | None = None


def train_step(net: ProposalNetwork, student: ParamStore, teacher: TeacherState,
               batch: list[BatchVideo], cfg: TrainConfig, rng: np.random.Generator,
               opt: AdamState) -> dict:
    """One optimizer step over a mixed batch, then the EMA update.

    Returns a report with the raw (unweighted) mean of each loss term and
    the composed total.
    """
    l1, l2, l3, l4 = cfg.lambdas()
    labeled = [bv for bv in batch if bv.labeled]
    if not labeled and l1 == l2 == l3 == l4 == 0.0:
        raise ValueError("batch has no labeled videos and all loss weights are zero")

    wrapped = wrap_params(student)
    sup_terms, shift_terms, flip_terms, recon_terms, order_terms = [], [], [], [], []
    need_teacher = l1 > 0.0 or l2 > 0.0

    for bv in batch:
        f1 = bv.features
        teacher_pred = None
        if need_teacher:
            t_out = net.forward(teacher.params, f1, heads={"proposal"},
                                train_mode=False, requires_grad=False)
            teacher_pred = t_out.detach()
        if bv.labeled:
            s_out = net.forward(wrapped, f1, heads={"proposal"}, train_mode=True,
                                rng=rng, p_drop=cfg.p_drop)
            sup_terms.append(supervised_loss(s_out, bv.label_maps, rng=rng))
        if l1 > 0.0:
            f_shift, _plan = temporal_shift(f1, cfg.mu, rng)
            s_out = net.forward(wrapped, f_shift, heads={"proposal"}, train_mode=True,
                                rng=rng, p_drop=cfg.p_drop)
            shift_terms.append(consistency_loss(s_out, teacher_pred))
        if l2 > 0.0:
            s_out = net.forward(wrapped, temporal_flip(f1), heads={"proposal"},
                                train_mode=True, rng=rng, p_drop=cfg.p_drop)
            flip_terms.append(consistency_loss(s_out, align_flip_outputs(teacher_pred)))
        if l3 > 0.0:
            f2, m = pretext.mask_features(f1, cfg.omega, rng)
            s_out = net.forward(wrapped, f2, heads={"recon"}, train_mode=True,
                                rng=rng, p_drop=cfg.p_drop)
            recon_terms.append(pretext.recon_loss(
                s_out.recon, f1, m if cfg.recon_support == "masked_only" else None))
        if l4 > 0.0:
            sample = pretext.make_order_sample(f1, cfg.K, rng)
            s_out = net.forward(wrapped, net.pad_to_length(sample.shuffled),
                                heads={"order"}, train_mode=True, rng=rng,
                                p_drop=cfg.p_drop)
            order_terms.append(pretext.order_loss(s_out.order_logits, sample.label))

    def mean_term(terms):
        if not terms:
            return None
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        return acc * (1.0 / len(terms))

    parts = {
        "supervised": mean_term(sup_terms),
        "shift": mean_term(shift_terms),
        "flip": mean_term(flip_terms),
        "recon": mean_term(recon_terms),
        "order": mean_term(order_terms),
    }
    weights = {"supervised": 1.0, "shift": l1, "flip": l2, "recon": l3, "order": l4}
    total = None
    for name, term in parts.items():
        if term is None:
            continue
        piece = term * weights[name]
        total = piece if total is None else total + piece

    grads = backward(total, wrapped)
    adam_step(student, grads, opt, cfg)
    ema_update(teacher, student, cfg.alpha)

    report = {k: (v.item() if v is not None else 0.0) for k, v in parts.items()}
    report["total"] = total.item()
    return report


@dataclass
class Trainer:
    """Owns the student/teacher parameter stores and the training loop."""

    net: ProposalNetwork
    cfg: TrainConfig
    student: ParamStore
    teacher: TeacherState
    opt: AdamState
    rng_labeled: np.random.Generator
    rng_unlabeled: np.random.Generator
    rng_aux: np.random.Generator
    epoch: int = 0

    @classmethod
    def create(cls, hyper: HyperShape, cfg: TrainConfig) -> "Trainer":
        net = ProposalNetwork(hyper)
        student = net.init_params(cfg.seed, dtype=cfg.dtype)
        teacher = TeacherState(params=student.copy_store())
        seqs = np.random.SeedSequence(cfg.seed).spawn(3)
        return cls(net=net, cfg=cfg, student=student, teacher=teacher,
                   opt=AdamState.like(student),
                   rng_labeled=np.random.Generator(np.random.PCG64(seqs[0])),
                   rng_unlabeled=np.random.Generator(np.random.PCG64(seqs[1])),
                   rng_aux=np.random.Generator(np.random.PCG64(seqs[2])))

    def epoch_batches(self, labeled: list[BatchVideo], unlabeled: list[BatchVideo]):
        cfg = self.cfg
        lab = list(labeled)
        unl = list(unlabeled)
        self.rng_labeled.shuffle(lab)
        self.rng_unlabeled.shuffle(unl)
        b_u = cfg.batch_unlabeled if unl else 0
        n_steps = math.ceil(len(lab) / cfg.batch_labeled)
        if b_u:
            n_steps = max(n_steps, math.ceil(len(unl) / b_u))
        for s in range(n_steps):
            batch = [lab[(s * cfg.batch_labeled + j) % len(lab)]
                     for j in range(min(cfg.batch_labeled, len(lab)))]
            if b_u:
                batch += [unl[(s * b_u + j) % len(unl)] for j in range(b_u)]
            yield batch

    def run(self, labeled: list[BatchVideo], unlabeled: list[BatchVideo],
            out_dir: str | os.PathLike, epochs: int | None = None) -> list[dict]:
        if not labeled:
            raise ValueError("training needs at least one labeled video")
        os.makedirs(out_dir, exist_ok=True)
        epochs = self.cfg.epochs if epochs is None else epochs
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        records = []
        mode = "a" if self.epoch else "w"
        with open(metrics_path, mode, encoding="utf-8") as metrics_fh:
            while self.epoch < epochs:
                t0 = time.perf_counter()
                reports = [train_step(self.net, self.student, self.teacher, b,
                                      self.cfg, self.rng_aux, self.opt)
                           for b in self.epoch_batches(labeled, unlabeled)]
                self.epoch += 1
                rec = {"epoch": self.epoch,
                       "steps": len(reports),
                       "wall_time_s": round(time.perf_counter() - t0, 4)}
                for key in ("supervised", "shift", "flip", "recon", "order", "total"):
                    rec[key] = float(np.mean([r[key] for r in reports]))
                metrics_fh.write(json.dumps(rec) + "\n")
                metrics_fh.flush()
                records.append(rec)
                self.save(os.path.join(out_dir, "checkpoint.bin"))
        return records

    def save(self, path) -> None:
        tensors = {}
        for k, v in self.student.items():
            tensors[f"student.{k}"] = v
        for k, v in self.teacher.params.items():
            tensors[f"teacher.{k}"] = v
        for k, v in self.opt.m.items():
            tensors[f"adam.m.{k}"] = v
        for k, v in self.opt.v.items():
            tensors[f"adam.v.{k}"] = v
        extra = {
            "epoch": self.epoch,
            "adam_t": self.opt.t,
            "teacher_step": self.teacher.step,
            "config": dataclasses.asdict(self.cfg),
            "rng": {
                "labeled": self.rng_labeled.bit_generator.state,
                "unlabeled": self.rng_unlabeled.bit_generator.state,
                "aux": self.rng_aux.bit_generator.state,
            },
        }
        save_checkpoint(path, self.net.hyper, self.cfg.seed, self.opt.t,
                        self.cfg.precision, tensors, extra=extra)

    @classmethod
    def load(cls, path, cfg: TrainConfig | None = None) -> "Trainer":
        header, tensors = load_checkpoint(path)
        hyper = HyperShape(**header["hyper"])
        extra = header["extra"]
        if cfg is None:
            cfg = TrainConfig(**extra["config"])
        net = ProposalNetwork(hyper)
        pick = lambda prefix: ParamStore(
            {k[len(prefix):]: v.copy() for k, v in tensors.items() if k.startswith(prefix)})
        student = pick("student.")
        teacher = TeacherState(params=pick("teacher."), step=extra["teacher_step"])
        opt = AdamState(m=pick("adam.m."), v=pick("adam.v."), t=extra["adam_t"])
        trainer = cls(net=net, cfg=cfg, student=student, teacher=teacher, opt=opt,
                      rng_labeled=np.random.Generator(np.random.PCG64()),
                      rng_unlabeled=np.random.Generator(np.random.PCG64()),
                      rng_aux=np.random.Generator(np.random.PCG64()),
                      epoch=extra["epoch"])
        trainer.rng_labeled.bit_generator.state = extra["rng"]["labeled"]
        trainer.rng_unlabeled.bit_generator.state = extra["rng"]["unlabeled"]
        trainer.rng_aux.bit_generator.state = extra["rng"]["aux"]
        return trainer


def hyper_from(cfg: TrainConfig, T: int, C: int) -> HyperShape:
    return HyperShape(T=T, C=C, H=cfg.hidden, Hp=cfg.pem_hidden,
                      D=cfg.max_duration or T, N=cfg.n_samples, K=cfg.K)


def load_training_set(manifest: DatasetManifest, manifest_path, cfg: TrainConfig):
    """Read all videos into memory and build label maps for the labeled ones."""
    Ts = {v.T for v in manifest.videos}
    Cs = {v.C for v in manifest.videos}
    if len(Ts) != 1 or len(Cs) != 1:
        raise ValueError("all videos in a training manifest must share T and C")
    T, C = Ts.pop(), Cs.pop()
    hyper = hyper_from(cfg, T, C)
    labeled, unlabeled = [], []
    for entry in manifest.videos:
        seq = load_video(manifest_path, entry)
        feats = seq.values.astype(cfg.dtype)
        if entry.labeled:
            lm = build_label_maps(seq.annotations, T, hyper.D)
            labeled.append(BatchVideo(entry.video_id, feats, True, lm))
        else:
            unlabeled.append(BatchVideo(entry.video_id, feats, False))
    return hyper, labeled, unlabeled


def train_run(manifest: DatasetManifest, manifest_path, cfg: TrainConfig,
              out_dir, resume_from=None) -> tuple[str, Trainer]:
    """Full training entry point: epoch loop, metrics log, checkpointing."""
    hyper, labeled, unlabeled = load_training_set(manifest, manifest_path, cfg)
    if resume_from:
        trainer = Trainer.load(resume_from, cfg=cfg)
        if trainer.net.hyper != hyper:
            raise ValueError("checkpoint hyper shape does not match dataset")
    else:
        trainer = Trainer.create(hyper, cfg)
    trainer.run(labeled, unlabeled, out_dir)
    return os.path.join(os.fspath(out_dir), "checkpoint.bin"), trainer
