"""Adam, VAE and detector pretraining, and the collaborative training loop.

All randomness comes from generators keyed by (seed, stage, step, purpose),
so adding or removing a consumer of random numbers in one branch never
shifts the draws seen by another. This is what lets the collaborative loop
with zero consistency weight reproduce plain VAE fine-tuning exactly.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import losses as L
from . import nets
from . import tensor as T
from .dataset import augment_scale, config_hash, Sample
from .losses import LossWeights
from .nets import NetConfig
from .tensor import NumericError, Tensor

# stream keys
_SHUFFLE, _AUG, _NOISE, _PRIOR, _DROPOUT = 1, 2, 3, 4, 5
STAGE_CODES = {"vae": 10, "detector": 20, "stage1": 31, "stage1-fine": 32, "stage2": 40}

LOG_COLUMNS = ("step", "stage", "l_rec", "l_kl", "l_struct_c", "l_struct_r",
               "l_consist", "total", "grad_norm", "wall_ms")


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, key)])


class TrainingDivergence(RuntimeError):
    """Raised when a loss or gradient turns non-finite.

    ``params`` holds the last parameters that produced a finite step and
    ``log`` the records up to that point.
    """

    def __init__(self, msg, params=None, log=None):
        super().__init__(msg)
        self.params = params
        self.log = log


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> dict:
    """One bias-corrected Adam update; returns new parameter arrays.

    Keys missing from ``grads`` are left untouched. A non-finite gradient
    aborts before anything (parameters or moments) is modified.
    """
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != np.shape(params[k]):
            raise T.DimensionError(f"gradient shape {np.shape(g)} != parameter shape "
                                   f"{np.shape(params[k])} for {k!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    out = dict(params)
    for k, g in grads.items():
        p = params[k]
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[k], state.v[k] = m, v
        out[k] = (p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return out


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_norm(grads: dict, max_norm: float | None) -> tuple[dict, float]:
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm:
        s = max_norm / norm
        grads = {k: (g * s).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------- config

@dataclass
class PhaseConfig:
    lr: float
    batch: int
    epochs: int

    def validate(self, name):
        if not self.lr > 0:
            raise ValueError(f"{name}.lr must be positive")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError(f"{name}: batch >= 1 and epochs >= 0 required")


@dataclass
class Stage1Config:
    lr: float = 1e-2
    batch: int = 32
    iters: int = 150
    fine_lr: float = 1e-3
    fine_batches: tuple = (16, 8, 4, 2)
    fine_iters: int = 20

    def validate(self):
        if not (self.lr > 0 and self.fine_lr > 0):
            raise ValueError("stage1 learning rates must be positive")
        if self.batch < 1 or self.iters < 1 or self.fine_iters < 1 or not self.fine_batches \
                or min(self.fine_batches) < 1:
            raise ValueError("stage1 batch sizes and iteration counts must be >= 1")


@dataclass
class TrainConfig:
    prior_mu: float = 0.0
    prior_sigma: float = 1.0
    vae: PhaseConfig = field(default_factory=lambda: PhaseConfig(3e-4, 16, 60))
    detector: PhaseConfig = field(default_factory=lambda: PhaseConfig(1e-3, 16, 150))
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: PhaseConfig = field(default_factory=lambda: PhaseConfig(1e-6, 32, 2))
    detector_collab_lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    clip_norm: float | None = 10.0
    augment: bool = True
    checkpoint_every: int = 10
    seed: int = 0
    dtype: str = "float32"
    record_timing: bool = False

    def __post_init__(self):
        for name in ("vae", "detector", "stage2"):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, PhaseConfig(**v))
        if isinstance(self.stage1, dict):
            d = dict(self.stage1)
            if "fine_batches" in d:
                d["fine_batches"] = tuple(d["fine_batches"])
            self.stage1 = Stage1Config(**d)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.validate()

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        base = dict(vae=PhaseConfig(3e-4, 100, 200), detector=PhaseConfig(1e-4, 32, 500),
                    stage2=PhaseConfig(1e-6, 32, 50), dtype="float32")
        base.update(kw)
        return cls(**base)

    def validate(self):
        if self.prior_sigma <= 0:
            raise ValueError("prior_sigma must be positive")
        for name in ("vae", "detector", "stage2"):
            getattr(self, name).validate(name)
        self.stage1.validate()
        if not self.detector_collab_lr > 0:
            raise ValueError("detector_collab_lr must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage1"]["fine_batches"] = list(self.stage1.fine_batches)
        return d


# ---------------------------------------------------------------- log

class TrainLog:
    """Append-only per-step records."""

    def __init__(self):
        self.records: list[dict] = []

    def append(self, **rec):
        row = {c: rec.get(c, 0.0) for c in LOG_COLUMNS}
        row["step"] = len(self.records)
        self.records.append(row)

    def __len__(self):
        return len(self.records)

    def column(self, name: str, stage: str | None = None) -> np.ndarray:
        return np.array([r[name] for r in self.records if stage is None or r["stage"] == stage])

    def extend(self, other: "TrainLog"):
        for r in other.records:
            self.append(**r)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r["step"], r["stage"]]
                           + [repr(float(r[c])) for c in LOG_COLUMNS[2:-1]]
                           + [int(r["wall_ms"])])


class _Clock:
    def __init__(self, on: bool):
        self.on = on
        self.t = time.perf_counter()

    def lap(self) -> int:
        if not self.on:
            return 0
        now = time.perf_counter()
        ms, self.t = int(round((now - self.t) * 1000)), now
        return ms


# ---------------------------------------------------------------- helpers

def _leaves(params: Mapping[str, np.ndarray], trainable: bool) -> dict:
    return {k: Tensor(v, requires_grad=trainable, name=k) for k, v in params.items()}


def _grads(leaves: Mapping[str, Tensor]) -> dict:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in leaves.items() if t.requires_grad}


def _cast(params: Mapping, dtype) -> dict:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def _flat_landmarks(lm: np.ndarray) -> np.ndarray:
    return np.asarray(lm).reshape(len(lm), -1)


def batch_order(n: int, batch: int, seed: int, stage: int, epoch: int) -> list[np.ndarray]:
    perm = keyed_rng(seed, stage, epoch, _SHUFFLE).permutation(n)
    return [perm[i:i + batch] for i in range(0, n, batch)]


def augment_batch(shapes: np.ndarray, landmarks: np.ndarray | None, ids, seed: int, stage: int,
                  epoch: int):
    """Per-sample random anisotropic scaling in [0.7, 1.3) keyed by (epoch, id).

    Samples whose scaled occupancy or landmarks would leave the box are kept
    unscaled so landmark targets stay exact.
    """
    out_s = np.empty_like(shapes)
    out_l = None if landmarks is None else np.empty_like(landmarks)
    for j, i in enumerate(ids):
        f = keyed_rng(seed, stage, epoch, _AUG, int(i)).uniform(0.7, 1.3, 3)
        lm = None if landmarks is None else landmarks[j]
        a = augment_scale(Sample(shapes[j], lm, None, int(i)), *f)
        if a.meta["clipped"]:
            out_s[j] = shapes[j]
            if out_l is not None:
                out_l[j] = lm
        else:
            out_s[j] = a.shape
            if out_l is not None:
                out_l[j] = a.landmarks
    return out_s, out_l


def _check_finite(stage: str, step: int, **vals):
    for k, v in vals.items():
        if not np.isfinite(v):
            raise NumericError(f"{stage} step {step}: non-finite {k}")


def _save_group_ckpt(out_dir, name: str, *groups):
    if out_dir is None:
        return
    merged = {}
    for g in groups:
        merged.update(g)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    nets.save_checkpoint(Path(out_dir) / name, merged)


def write_run_config(out_dir, net_cfg: NetConfig, train_cfg: TrainConfig, extra: dict | None = None):
    doc = {"net": net_cfg.to_dict(), "train": train_cfg.to_dict()}
    if extra:
        doc.update(extra)
    doc["config_hash"] = config_hash({k: v for k, v in doc.items() if k != "config_hash"})
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc["config_hash"]


# ---------------------------------------------------------------- VAE

def vae_losses(enc: Mapping, gen: Mapping, s: np.ndarray, cfg: NetConfig, noise: np.ndarray):
    """(recon, kl, reconstruction) for a batch with fixed reparameterization noise."""
    mu, logvar = nets.encode(enc, s, cfg)
    z = T.reparameterize(mu, logvar, noise)
    recon = nets.generate(gen, z, cfg)
    return L.recon_loss(recon, s), L.kl_loss(mu, logvar), recon


def pretrain_vae(shapes: np.ndarray, net_cfg: NetConfig, cfg: TrainConfig,
                 init: tuple | None = None, out_dir=None,
                 on_epoch: Callable | None = None) -> tuple[dict, dict, TrainLog]:
    """Minimize recon + KL on ``shapes`` [n,D,D,D]; returns (enc, gen, log)."""
    shapes = np.asarray(shapes)
    if len(shapes) == 0:
        raise ValueError("pretrain_vae needs a non-empty training set")
    dt = cfg.np_dtype
    if init is None:
        enc, gen, _ = nets.init_params(net_cfg, cfg.seed, dt)
    else:
        enc, gen = _cast(init[0], dt), _cast(init[1], dt)
    ph, code = cfg.vae, STAGE_CODES["vae"]
    opt = AdamState(ph.lr)
    log, clock, w = TrainLog(), _Clock(cfg.record_timing), cfg.weights
    step = 0
    for epoch in range(ph.epochs):
        for ids in batch_order(len(shapes), ph.batch, cfg.seed, code, epoch):
            s = shapes[ids]
            if cfg.augment:
                s, _ = augment_batch(s, None, ids, cfg.seed, code, epoch)
            noise = keyed_rng(cfg.seed, code, step, _NOISE).standard_normal(
                (len(ids), net_cfg.latent_dim)).astype(dt)
            try:
                with T.Tape():
                    e, g = _leaves(enc, True), _leaves(gen, True)
                    rec, kl, _ = vae_losses(e, g, s, net_cfg, noise)
                    total = rec + kl * w.kl_weight
                    T.backward(total)
                grads, norm = clip_by_norm({**_grads(e), **_grads(g)}, None)
                _check_finite("vae", step, total=total.item(), grad_norm=norm)
                new = adam_step({**enc, **gen}, grads, opt)
            except NumericError as exc:
                _save_group_ckpt(out_dir, "last_good.ckpt", enc, gen)
                raise TrainingDivergence(str(exc), (enc, gen), log) from exc
            enc = {k: new[k] for k in enc}
            gen = {k: new[k] for k in gen}
            log.append(stage="vae", l_rec=rec.item(), l_kl=kl.item(), total=total.item(),
                       grad_norm=norm, wall_ms=clock.lap())
            step += 1
        if out_dir is not None and (epoch + 1) % cfg.checkpoint_every == 0:
            _save_group_ckpt(out_dir, f"vae_epoch{epoch + 1:04d}.ckpt", enc, gen)
        if on_epoch is not None:
            on_epoch(epoch, enc, gen, log)
    return enc, gen, log


# ---------------------------------------------------------------- detector

def detector_error(det: Mapping, shapes, landmarks, cfg: NetConfig, batch: int = 64) -> float:
    """Mean Euclidean landmark error in normalized units (eval mode)."""
    errs = []
    for i in range(0, len(shapes), batch):
        pred = nets.detect(det, shapes[i:i + batch], cfg).data.reshape(-1, 10, 3)
        errs.append(np.linalg.norm(pred - landmarks[i:i + batch], axis=-1).ravel())
    return float(np.concatenate(errs).mean())


def reconstruct_all(enc, gen, shapes, cfg: NetConfig, batch: int = 64) -> np.ndarray:
    return np.concatenate([nets.reconstruct(enc, gen, shapes[i:i + batch], cfg)
                           for i in range(0, len(shapes), batch)])


def pretrain_detector(shapes: np.ndarray, landmarks: np.ndarray, net_cfg: NetConfig,
                      cfg: TrainConfig, reconstructor: tuple | None = None,
                      init: Mapping | None = None, out_dir=None) -> tuple[dict, TrainLog]:
    """Minimize the structure loss on annotated shapes.

    With ``reconstructor=(enc, gen)`` each batch also scores the detector on
    the VAE reconstructions (through the encoder mean) of the same, already
    augmented, samples (robustness term).
    """
    shapes = np.asarray(shapes)
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if len(shapes) == 0:
        raise ValueError("pretrain_detector needs annotated samples")
    if not np.all(np.isfinite(landmarks)):
        raise ValueError("pretrain_detector: landmarks contain NaN (unannotated samples?)")
    dt = cfg.np_dtype
    det = nets.init_params(net_cfg, cfg.seed, dt)[2] if init is None else _cast(init, dt)
    if reconstructor is not None:
        enc, gen = (_cast(p, dt) for p in reconstructor)
    ph, code = cfg.detector, STAGE_CODES["detector"]
    opt = AdamState(ph.lr)
    log, clock, w = TrainLog(), _Clock(cfg.record_timing), cfg.weights
    step = 0
    for epoch in range(ph.epochs):
        for ids in batch_order(len(shapes), ph.batch, cfg.seed, code, epoch):
            s, lm = shapes[ids], landmarks[ids]
            if cfg.augment:
                s, lm = augment_batch(s, lm, ids, cfg.seed, code, epoch)
            truth = _flat_landmarks(lm)
            rng = keyed_rng(cfg.seed, code, step, _DROPOUT)
            try:
                with T.Tape():
                    d = _leaves(det, True)
                    pc = nets.detect(d, s.astype(dt), net_cfg, training=True, rng=rng)
                    pr = None
                    if reconstructor is not None:
                        s_hat = nets.reconstruct(enc, gen, s.astype(dt), net_cfg)
                        pr = nets.detect(d, s_hat, net_cfg, training=True, rng=rng)
                    total = L.struct_loss(pc, pr, truth, w)
                    T.backward(total)
                grads, norm = clip_by_norm(_grads(d), None)
                _check_finite("detector", step, total=total.item(), grad_norm=norm)
                det = adam_step(det, grads, opt)
            except NumericError as exc:
                _save_group_ckpt(out_dir, "last_good.ckpt", det)
                raise TrainingDivergence(str(exc), det, log) from exc
            lc = L.struct_loss(Tensor(pc.data), None, truth, LossWeights()).item()
            lr_ = 0.0 if pr is None else L.struct_loss(Tensor(pr.data), None, truth, LossWeights()).item()
            log.append(stage="detector", l_struct_c=lc, l_struct_r=lr_, total=total.item(),
                       grad_norm=norm, wall_ms=clock.lap())
            step += 1
        if out_dir is not None and (epoch + 1) % cfg.checkpoint_every == 0:
            _save_group_ckpt(out_dir, f"det_epoch{epoch + 1:04d}.ckpt", det)
    return det, log


# ---------------------------------------------------------------- collaborative

@dataclass
class SubStage:
    name: str
    lr: float
    batch: int
    steps: int
    train_encoder: bool


def stage_schedule(cfg: TrainConfig, n_full: int) -> list[SubStage]:
    """Stage 1 (encoder frozen): lr, batch 32 for ``iters`` steps, then the
    finer lr at each batch size of the decreasing sequence for ``fine_iters``
    steps each. Stage 2 (everything trains): ``epochs`` passes over the full set."""
    s1, s2 = cfg.stage1, cfg.stage2
    out = [SubStage("stage1", s1.lr, s1.batch, s1.iters, False)]
    out += [SubStage("stage1-fine", s1.fine_lr, b, s1.fine_iters, False) for b in s1.fine_batches]
    if s2.epochs > 0:
        out.append(SubStage("stage2", s2.lr, s2.batch,
                            s2.epochs * math.ceil(n_full / s2.batch), True))
    return out


def _stream(n: int, batch: int, seed: int, key: tuple):
    """Endless shuffled batches; yields (pass_index, ids, first_in_pass)."""
    p = 0
    while True:
        perm = keyed_rng(seed, *key, p, _SHUFFLE).permutation(n)
        for j, i in enumerate(range(0, n, batch)):
            yield p, perm[i:i + batch], j == 0
        p += 1


def shape_phase_loss(enc_t, gen_t, det: Mapping | None, s: np.ndarray, noise: np.ndarray,
                     prior_z: np.ndarray | None, net_cfg: NetConfig, w: LossWeights):
    """α₁·(L_rec + kl_w·L_KL) + α₂·L_consist for one shape-phase batch.

    The consistency branch generates from prior samples, detects landmarks
    with the (frozen, eval-mode) detector and scores the pair; it is skipped
    when ``det`` or ``prior_z`` is None.
    """
    rec, kl, _ = vae_losses(enc_t, gen_t, s, net_cfg, noise)
    total = (rec + kl * w.kl_weight) * w.alpha1
    cons = None
    if det is not None and prior_z is not None:
        s_bar = nets.generate(gen_t, prior_z, net_cfg)
        l_bar = nets.detect(det, s_bar, net_cfg, training=False)
        cons = L.consistency_loss(s_bar, l_bar)
        total = total + cons * w.alpha2
    return total, rec, kl, cons


def _phase_a(enc, gen, det, opt_det, shapes_l, lm_l, net_cfg, cfg, sub_code, batch, pass_idx,
             dt, log, clock):
    """Detector update over every labeled batch with θ, φ frozen."""
    w = cfg.weights
    for ids in batch_order(len(shapes_l), batch, cfg.seed, sub_code * 100 + 1, pass_idx):
        s, lm = shapes_l[ids], lm_l[ids]
        if cfg.augment:
            s, lm = augment_batch(s, lm, ids, cfg.seed, sub_code * 100 + 1, pass_idx)
        s = s.astype(dt)
        truth = _flat_landmarks(lm)
        key = (sub_code * 100 + 1, pass_idx, int(ids[0]))
        noise = keyed_rng(cfg.seed, *key, _NOISE).standard_normal(
            (len(ids), net_cfg.latent_dim)).astype(dt)
        _, _, s_hat = vae_losses(enc, gen, s, net_cfg, noise)  # no tape: θ, φ frozen
        rng = keyed_rng(cfg.seed, *key, _DROPOUT)
        with T.Tape():
            d = _leaves(det, True)
            l_dot = nets.detect(d, s, net_cfg, training=True, rng=rng)
            l_hat = nets.detect(d, s_hat.data, net_cfg, training=True, rng=rng)
            total = L.struct_loss(l_dot, l_hat, truth, w)
            T.backward(total)
        grads, norm = clip_by_norm(_grads(d), cfg.clip_norm)
        _check_finite("phase-a", len(log), total=total.item(), grad_norm=norm)
        det = adam_step(det, grads, opt_det)
        log.append(stage=f"detector@{_stage_name(sub_code)}",
                   l_struct_c=L.struct_loss(Tensor(l_dot.data), None, truth, LossWeights()).item(),
                   l_struct_r=L.struct_loss(Tensor(l_hat.data), None, truth, LossWeights()).item(),
                   total=total.item(), grad_norm=norm, wall_ms=clock.lap())
    return det


def _stage_name(code: int) -> str:
    return {v: k for k, v in STAGE_CODES.items()}[code]


def _sub_code(sub: SubStage) -> int:
    return STAGE_CODES[sub.name]


def _shape_step(enc, gen, det, opt, sub: SubStage, ids, step: int, shapes_full, net_cfg,
                cfg: TrainConfig, dt, with_consistency: bool):
    code = _sub_code(sub)
    s = shapes_full[ids]
    if cfg.augment:
        s, _ = augment_batch(s, None, ids, cfg.seed, code * 1000 + sub.batch, step)
    s = s.astype(dt)
    key = (code, sub.batch, step)
    noise = keyed_rng(cfg.seed, *key, _NOISE).standard_normal((len(ids), net_cfg.latent_dim)).astype(dt)
    prior_z = None
    if with_consistency:
        prior_z = (cfg.prior_mu + cfg.prior_sigma * keyed_rng(cfg.seed, *key, _PRIOR).standard_normal(
            (len(ids), net_cfg.latent_dim))).astype(dt)
    with T.Tape():
        e = _leaves(enc, sub.train_encoder)
        g = _leaves(gen, True)
        total, rec, kl, cons = shape_phase_loss(e, g, det, s, noise, prior_z, net_cfg, cfg.weights)
        T.backward(total)
    grads = _grads(g)
    if sub.train_encoder:
        grads.update(_grads(e))
    grads, norm = clip_by_norm(grads, cfg.clip_norm)
    _check_finite(sub.name, step, total=total.item(), grad_norm=norm)
    new = adam_step({**enc, **gen}, grads, opt)
    enc = {k: new[k] for k in enc}
    gen = {k: new[k] for k in gen}
    rec_ = dict(l_rec=rec.item(), l_kl=kl.item(), total=total.item(), grad_norm=norm,
                l_consist=0.0 if cons is None else cons.item())
    return enc, gen, rec_


def collaborative_train(enc: Mapping, gen: Mapping, det: Mapping, labeled_shapes: np.ndarray,
                        labeled_landmarks: np.ndarray, full_shapes: np.ndarray,
                        net_cfg: NetConfig, cfg: TrainConfig, out_dir=None,
                        on_step: Callable | None = None) -> tuple[dict, dict, dict, TrainLog]:
    """Alternating training of the detector (phase a) and the shape VAE (phase b).

    Each pass over the full set Φ starts with a detector pass over the
    labeled set Ω; shape steps follow until the pass or the sub-stage's step
    budget ends. Stage boundaries always write checkpoints when ``out_dir``
    is given. ``on_step(kind, enc, gen, det)`` is called after each detector
    pass (kind "a") and each shape step (kind "b").
    """
    dt = cfg.np_dtype
    enc, gen, det = _cast(enc, dt), _cast(gen, dt), _cast(det, dt)
    labeled_shapes = np.asarray(labeled_shapes)
    labeled_landmarks = np.asarray(labeled_landmarks, dtype=np.float64)
    full_shapes = np.asarray(full_shapes)
    if len(labeled_shapes) == 0 or len(full_shapes) == 0:
        raise ValueError("collaborative_train needs non-empty labeled and full sets")
    if not np.all(np.isfinite(labeled_landmarks)):
        raise ValueError("labeled landmarks contain NaN")
    log, clock = TrainLog(), _Clock(cfg.record_timing)
    opt_det = AdamState(cfg.detector_collab_lr)
    for sub in stage_schedule(cfg, len(full_shapes)):
        code = _sub_code(sub)
        opt = AdamState(sub.lr)
        stream = _stream(len(full_shapes), sub.batch, cfg.seed, (code, sub.batch))
        step = 0
        try:
            while step < sub.steps:
                p, ids, first = next(stream)
                if first:
                    det = _phase_a(enc, gen, det, opt_det, labeled_shapes, labeled_landmarks,
                                   net_cfg, cfg, code, sub.batch, p * 1000 + sub.batch, dt, log,
                                   clock)
                    if on_step is not None:
                        on_step("a", enc, gen, det)
                enc, gen, rec = _shape_step(enc, gen, det, opt, sub, ids, step, full_shapes,
                                            net_cfg, cfg, dt, True)
                log.append(stage=sub.name, wall_ms=clock.lap(), **rec)
                if on_step is not None:
                    on_step("b", enc, gen, det)
                step += 1
        except NumericError as exc:
            _save_group_ckpt(out_dir, "last_good.ckpt", enc, gen, det)
            raise TrainingDivergence(str(exc), (enc, gen, det), log) from exc
        _save_group_ckpt(out_dir, f"{sub.name}_b{sub.batch}.ckpt", enc, gen, det)
    return enc, gen, det, log


def finetune_vae(enc: Mapping, gen: Mapping, full_shapes: np.ndarray, net_cfg: NetConfig,
                 cfg: TrainConfig) -> tuple[dict, dict, TrainLog]:
    """Plain VAE continuation on the collaborative schedule.

    Uses the same sub-stages, batch streams, noise keys, α₁ scaling, encoder
    freeze and clipping as :func:`collaborative_train`, with no detector and
    no consistency branch. It is the reference for the degenerate-weight
    reduction (α₂ = 0).
    """
    dt = cfg.np_dtype
    enc, gen = _cast(enc, dt), _cast(gen, dt)
    full_shapes = np.asarray(full_shapes)
    log, clock = TrainLog(), _Clock(cfg.record_timing)
    for sub in stage_schedule(cfg, len(full_shapes)):
        code = _sub_code(sub)
        opt = AdamState(sub.lr)
        stream = _stream(len(full_shapes), sub.batch, cfg.seed, (code, sub.batch))
        for step in range(sub.steps):
            _, ids, _ = next(stream)
            enc, gen, rec = _shape_step(enc, gen, None, opt, sub, ids, step, full_shapes,
                                        net_cfg, cfg, dt, False)
            log.append(stage=sub.name, wall_ms=clock.lap(), **rec)
    return enc, gen, log
