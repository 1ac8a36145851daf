"""Two-stage optimization: VAE pretraining, then conditional latent diffusion.

Both stages share mixup (Beta(alpha, alpha) pair blending), a per-step cosine
learning-rate decay, and a per-epoch TrainHistory. The diffusion stage keeps
the VAE frozen, diffuses the scaled mean of the dose encoding, and adds the
soft constraint loss on the dose implied by each noise estimate.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_into, read_manifest, save_checkpoint
from .conditioning import STRUCTURE_LAYOUT, ConditionConfig, case_condition_inputs
from .constraints import compliance_report, cond_loss, default_constraints
from .denoiser import DenoiserConfig
from .diffusion import make_schedule, predict_z0, q_sample, sample
from .model import DoseDenoiser
from .patching import plan_patches
from .vae import DOSE_UNIT, CT_HIGH, CT_LOW, LightweightVAE3D, VAEConfig, anneal_beta, kl_divergence, latent_shape
from .volumes import DoseScale, DoseVolume, Structure, StructureSet

log = logging.getLogger(__name__)

STAGES = ("vae", "diffusion")
# Dose reconstruction error is rescaled by the ratio of the decoder output
# spans so both modalities are fitted to the same relative precision.
DOSE_LOSS_WEIGHT = (CT_HIGH - CT_LOW) / DOSE_UNIT
VAE_PATCH = (32, 32, 32)
VAE_OVERLAP = (8, 8, 8)

_STAGE_DEFAULTS = {
    "vae": dict(epochs=200, batch_size=8, lr=1e-3, lr_min=1e-5),
    "diffusion": dict(epochs=1000, batch_size=2, lr=5e-4, lr_min=1e-6),
}


class TrainingError(RuntimeError):
    """Empty dataset, divergence or an unusable checkpoint."""


@dataclass
class TrainConfig:
    stage: str = "vae"
    epochs: int | None = None
    batch_size: int | None = None
    lr: float | None = None
    lr_min: float | None = None
    lambda_mse: float = 1.0
    lambda_cond: float = 0.5
    lambda_kl: float = 0.001
    kl_warmup_epochs: int = 20
    mixup_alpha: float = 0.4
    patience: int = 20
    seed: int = 0
    weight_decay: float = 0.0
    desk: bool = False
    steps: int = 1000  # diffusion T
    beta_start: float = 1e-4
    beta_end: float = 0.02
    patch: tuple = VAE_PATCH
    overlap: tuple = VAE_OVERLAP
    vae_channels: tuple = (32, 64, 128, 256)
    denoiser_channels: tuple | None = None
    max_steps: int | None = None  # optimizer-step cap; overrides epochs when set
    val_fraction: float = 0.2
    val_every: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        for k, v in _STAGE_DEFAULTS[self.stage].items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        if self.desk and self.steps == 1000:
            self.steps = 100
        self.patch = tuple(int(v) for v in self.patch)
        self.overlap = tuple(int(v) for v in self.overlap)
        self.vae_channels = tuple(int(v) for v in self.vae_channels)
        if self.denoiser_channels is None:
            ladder = DenoiserConfig.desk() if self.desk else DenoiserConfig()
            self.denoiser_channels = ladder.channels
        self.denoiser_channels = tuple(int(v) for v in self.denoiser_channels)
        positive = ("epochs", "batch_size", "lr", "lr_min", "mixup_alpha", "steps", "val_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if any(p % 16 for p in self.patch):
            raise ValueError(f"VAE patch {self.patch} must be divisible by 16 on every axis")

    @classmethod
    def for_stage(cls, stage, desk=False, **overrides):
        return cls(stage=stage, desk=desk, **overrides)

    def to_dict(self):
        return asdict(self)

    def vae_config(self):
        return VAEConfig(channels=self.vae_channels, beta_max=self.lambda_kl, warmup_epochs=self.kl_warmup_epochs)

    def model_configs(self):
        if self.desk:
            dcfg = DenoiserConfig.desk(channels=self.denoiser_channels)
            ccfg = ConditionConfig.desk(temb_width=dcfg.temb_width, fused_width=dcfg.cond_width)
        else:
            dcfg = DenoiserConfig(channels=self.denoiser_channels)
            ccfg = ConditionConfig(temb_width=dcfg.temb_width, fused_width=dcfg.cond_width)
        return dcfg, ccfg


def load_config(path, **overrides):
    """Read a JSON config whose keys mirror TrainConfig; ``overrides`` lose to the file."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    merged = {k: v for k, v in overrides.items() if v is not None}
    merged.update(data)
    return TrainConfig(**merged)


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)

    def append(self, row):
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("history epochs must increase")
        self.rows.append(dict(row))

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [r.get(name, math.nan) for r in self.rows]

    def compliance(self):
        """Validation compliance rates in order, skipping epochs without validation."""
        return [v for v in self.column("val_compliance") if not math.isnan(v)]

    def write(self, path):
        keys = list(dict.fromkeys(k for r in self.rows for k in r))
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(keys)
            for r in self.rows:
                w.writerow([_cell(r.get(k, math.nan)) for k in keys])


def _cell(v):
    return f"{v:.8g}" if isinstance(v, float) else str(v)


# ----------------------------------------------------------- small contracts

def sample_mixup_lam(alpha, rng):
    if alpha <= 0:
        raise ValueError(f"mixup alpha must be positive, got {alpha}")
    return float(rng.beta(alpha, alpha))


def mixup(a, b, lam):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"cannot mix shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return lam * a + (1.0 - lam) * b


def cosine_lr(step, total, lr0, lr_min):
    if total <= 0 or not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total))


def early_stop(history, patience):
    """True once the best compliance is older than ``patience`` evaluations.

    ``history`` is a TrainHistory or a plain sequence of compliance rates.
    """
    rates = history.compliance() if isinstance(history, TrainHistory) else list(history)
    if not rates:
        raise ValueError("empty history")
    best_at = int(np.argmax(rates))  # first occurrence: later ties are not improvements
    return len(rates) - 1 - best_at >= patience


def split_cases(cases, val_fraction):
    """Deterministic split by case-id hash: a case goes to validation when its
    hash bucket falls below ``val_fraction``."""
    train, val = [], []
    for c in cases:
        bucket = int(hashlib.sha256(c.id.encode("utf-8")).hexdigest()[:8], 16) / 0xFFFFFFFF
        (val if bucket < val_fraction else train).append(c)
    if not train:
        train, val = val, []
    return train, val


def _optimizer(params, cfg):
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _check_finite(loss, epoch):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at epoch {epoch}")


# -------------------------------------------------------------- VAE pretrain

def _tiles(cases, cfg):
    """Stack every patch of every case: CT tiles and (where present) dose tiles."""
    ct_tiles, dose_tiles = [], []
    for c in cases:
        plan = plan_patches(c.grid.shape, cfg.patch, cfg.overlap)
        for origin in plan.origins:
            win = plan.window(origin)
            ct_tiles.append(c.ct.values[win])
            if c.dose is not None:
                dose_tiles.append(c.dose.values[win])
    ct = torch.from_numpy(np.stack(ct_tiles).astype(np.float32))[:, None]
    dose = torch.from_numpy(np.stack(dose_tiles).astype(np.float32))[:, None] if dose_tiles else None
    return ct, dose


def _vae_batch_loss(vae, x, modality, beta, gen):
    stats = vae.encode(x, modality)
    z = stats.mu + torch.exp(0.5 * stats.logvar) * torch.randn(stats.mu.shape, generator=gen)
    l1 = (vae.decode(z, modality) - x).abs().mean()
    return l1, kl_divergence(stats)


def _mixed(x, rng, gen, alpha):
    n = x.shape[0]
    lam = torch.tensor([sample_mixup_lam(alpha, rng) for _ in range(n)], dtype=x.dtype).view(-1, 1, 1, 1, 1)
    partner = torch.randint(0, n, (n,), generator=gen)
    return mixup(x, x[partner], lam)


def pretrain_vae(cases, config=None, out=None):
    """Fit the CT/dose VAE on patch tiles; returns (vae, history).

    Each step blends a batch of tiles with Beta(alpha, alpha) mixup, reconstructs
    CT (and dose, through the dose heads) from a reparameterized draw, and adds
    the linearly warmed-up KL term. Writes a checkpoint when ``out`` is given.
    """
    cfg = config or TrainConfig(stage="vae")
    if len(cases) < 2:
        raise TrainingError(f"VAE pretraining needs at least 2 cases, got {len(cases)}")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    vae = LightweightVAE3D(cfg.vae_config())
    ct, dose = _tiles(cases, cfg)
    n = ct.shape[0]
    per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.max_steps or cfg.epochs * per_epoch
    opt = _optimizer(vae.parameters(), cfg)
    history = TrainHistory()
    step = 0
    epoch = 0
    while step < total:
        beta = anneal_beta(epoch, cfg.kl_warmup_epochs, cfg.lambda_kl)
        perm = torch.randperm(n, generator=gen)
        sums = np.zeros(4)
        batches = 0
        for b in range(per_epoch):
            if step >= total:
                break
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = cosine_lr(step, total, cfg.lr, cfg.lr_min)
            _set_lr(opt, lr)
            pair = torch.cat([ct[idx], dose[idx]], dim=1) if dose is not None else ct[idx]
            pair = _mixed(pair, rng, gen, cfg.mixup_alpha)
            l1_ct, kl = _vae_batch_loss(vae, pair[:, :1], "ct", beta, gen)
            l1_dose = torch.zeros(())
            if dose is not None:
                l1_dose, kl_dose = _vae_batch_loss(vae, pair[:, 1:], "dose", beta, gen)
                kl = kl + kl_dose
            loss = l1_ct + DOSE_LOSS_WEIGHT * l1_dose + beta * kl
            _check_finite(loss, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            batches += 1
            sums += [loss.item(), l1_ct.item(), l1_dose.item(), kl.item()]
        loss, l1_ct, l1_dose, kl = sums / batches
        history.append(dict(epoch=epoch, loss=loss, l1_ct=l1_ct, l1_dose=l1_dose, kl=kl, beta=beta, lr=lr,
                            val_compliance=math.nan))
        log.info("vae epoch %d loss %.5f ct-L1 %.5f dose-L1 %.6f", epoch, loss, l1_ct, l1_dose)
        epoch += 1
    vae.eval()
    if out is not None:
        save_vae(out, vae, cfg, history)
    return vae, history


@torch.no_grad()
def reconstruct(vae, values, modality="ct", patch=VAE_PATCH, overlap=VAE_OVERLAP):
    """Patch-tiled, noise-free reconstruction of a full-resolution volume."""
    from .patching import merge

    plan = plan_patches(values.shape, patch, overlap)
    vol = torch.from_numpy(np.asarray(values, dtype=np.float32))
    outs = []
    for origin in plan.origins:
        x = vol[plan.window(origin)][None, None]
        outs.append(vae.decode(vae.encode(x, modality).mu, modality)[0, 0].numpy())
    return merge(outs, plan)


def reconstruction_l1(vae, cases, modality="ct", patch=VAE_PATCH, overlap=VAE_OVERLAP):
    """Mean absolute reconstruction error over all voxels of all cases."""
    errs = []
    for c in cases:
        values = c.ct.values if modality == "ct" else c.dose.values
        errs.append(np.abs(reconstruct(vae, values, modality, patch, overlap) - values).mean())
    return float(np.mean(errs))


def save_vae(path, vae, cfg, history, epoch=None):
    manifest = dict(
        stage="vae",
        config=cfg.to_dict(),
        vae=vae.config.to_dict(),
        epoch=len(history) - 1 if epoch is None else epoch,
        history=history.rows,
    )
    return save_checkpoint(path, {"vae": vae}, manifest)


def load_vae(path):
    manifest = read_manifest(path)
    if "vae" not in manifest:
        raise CheckpointError(f"{path} holds no VAE configuration")
    vae = LightweightVAE3D(VAEConfig(**manifest["vae"]))
    load_into(path, {"vae": vae}, manifest)
    vae.eval()
    return vae, manifest


# ------------------------------------------------------ diffusion training

def _freeze(module):
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


@torch.no_grad()
def encode_dose(vae, dose_values):
    """Mean of the dose encoding for a (B, 1, D, H, W) normalized dose batch."""
    return vae.encode(dose_values, "dose").mu


def fit_latent_scale(vae, cases):
    """1 / std of the dose latents, so the diffusion target has unit scale."""
    dose = torch.from_numpy(np.stack([c.dose.values for c in cases]).astype(np.float32))[:, None]
    std = float(encode_dose(vae, dose).std())
    if not std > 0:
        raise TrainingError("dose latents have zero spread; cannot fit a latent scale")
    return 1.0 / std


@dataclass
class _Tensors:
    masks: torch.Tensor  # (N, 8, D, H, W)
    context: torch.Tensor  # (N, 5)
    dose: torch.Tensor  # (N, 1, D, H, W) normalized
    gy_per_unit: torch.Tensor  # (N,)
    prescription: torch.Tensor  # (N,)
    extra: list  # per case: {name: mask} for constraint-only structures


def _case_tensors(cases):
    masks, ctx, dose, gpu, rx, extra = [], [], [], [], [], []
    for c in cases:
        if c.dose is None:
            raise TrainingError(f"case {c.id!r} has no dose")
        m, v = case_condition_inputs(c)
        masks.append(m)
        ctx.append(v)
        dose.append(c.dose.values)
        gpu.append(c.dose.scale.gy_per_unit)
        rx.append(c.structures.primary_ptv().prescription)
        extra.append({s.name: s.mask for s in c.structures.oars() if s.name not in STRUCTURE_LAYOUT})
    return _Tensors(
        torch.from_numpy(np.stack(masks)),
        torch.from_numpy(np.stack(ctx)),
        torch.from_numpy(np.stack(dose).astype(np.float32))[:, None],
        torch.tensor(gpu, dtype=torch.float32),
        torch.tensor(rx, dtype=torch.float32),
        extra,
    )


def structures_from_masks(masks, prescription, extra=None):
    """Rebuild a StructureSet from a condition mask stack (thresholded at 0.5)."""
    binary = (np.asarray(masks) >= 0.5).astype(np.uint8)
    out = StructureSet()
    for i, name in enumerate(STRUCTURE_LAYOUT):
        if not binary[i].any():
            continue
        if name.startswith("PTV["):
            out.add(Structure("PTV" if i == 0 else f"PTV{i}", binary[i], float(prescription)))
        else:
            out.add(Structure(name, binary[i]))
    for name, m in (extra or {}).items():
        out.add(Structure(name, np.asarray(m, dtype=np.uint8)))
    return out


def diffusion_loss(model, vae, batch, t, eps, sched, latent_scale, specs, lambda_mse=1.0, lambda_cond=0.5):
    """Composite loss on one (already mixed) batch; returns (total, mse, cond).

    ``batch`` holds masks, context, dose, gy_per_unit, prescription and a list of
    StructureSets used for the constraint term.
    """
    z0 = encode_dose(vae, batch["dose"]) * latent_scale
    z_t = q_sample(z0, t, eps, sched)
    eps_hat = model(z_t, t, batch["masks"], batch["context"])
    mse = ((eps_hat - eps) ** 2).mean()
    cond = torch.zeros(())
    if lambda_cond != 0:
        z0_hat = predict_z0(z_t, t, eps_hat, sched) / latent_scale
        dose_gy = vae.decode(z0_hat, "dose")[:, 0] * batch["gy_per_unit"].view(-1, 1, 1, 1)
        terms = [cond_loss(dose_gy[i], s, specs, mode="soft")[0] for i, s in enumerate(batch["structures"])]
        cond = torch.stack(terms).mean().to(mse.dtype)
    return lambda_mse * mse + lambda_cond * cond, mse, cond


def _make_batch(data, idx, rng, gen, alpha):
    n = len(idx)
    lam = torch.tensor([sample_mixup_lam(alpha, rng) for _ in range(n)], dtype=torch.float32)
    partner = torch.randint(0, data.masks.shape[0], (n,), generator=gen)
    lv = lam.view(-1, 1, 1, 1, 1)
    masks = mixup(data.masks[idx], data.masks[partner], lv)
    dose = mixup(data.dose[idx], data.dose[partner], lv)
    context = mixup(data.context[idx], data.context[partner], lam.view(-1, 1))
    gpu = mixup(data.gy_per_unit[idx], data.gy_per_unit[partner], lam)
    structures = []
    for k in range(n):
        lead = int(idx[k]) if lam[k] >= 0.5 else int(partner[k])
        structures.append(structures_from_masks(masks[k].numpy(), float(data.prescription[lead]), data.extra[lead]))
    return dict(masks=masks, context=context, dose=dose, gy_per_unit=gpu, structures=structures)


@dataclass
class Pipeline:
    vae: LightweightVAE3D
    model: DoseDenoiser
    schedule: object
    latent_scale: float
    manifest: dict = field(default_factory=dict)


def train_diffusion(cases, vae, config=None, out=None, specs=None, resume=None):
    """Train the conditional noise predictor against a frozen VAE; returns (pipeline, history)."""
    cfg = config or TrainConfig(stage="diffusion")
    if not cases:
        raise TrainingError("empty dataset")
    specs = default_constraints() if specs is None else specs
    _freeze(vae)
    train, val = split_cases(cases, cfg.val_fraction)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dcfg, ccfg = cfg.model_configs()
    model = DoseDenoiser(dcfg, ccfg)
    sched = make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
    latent_scale = fit_latent_scale(vae, train)
    if resume is not None:
        manifest = read_manifest(resume)
        load_into(resume, {"denoiser": model}, manifest)
        latent_scale = manifest["latent_scale"]
    data = _case_tensors(train)
    n = len(train)
    per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.max_steps or cfg.epochs * per_epoch
    opt = _optimizer(model.parameters(), cfg)
    history = TrainHistory()
    pipe = Pipeline(vae, model, sched, latent_scale)
    step = 0
    epoch = 0
    while step < total:
        model.train()
        perm = torch.randperm(n, generator=gen)
        sums = np.zeros(3)
        batches = 0
        for b in range(per_epoch):
            if step >= total:
                break
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = _make_batch(data, idx, rng, gen, cfg.mixup_alpha)
            t = torch.randint(1, sched.T + 1, (len(idx),), generator=gen)
            eps = torch.randn((len(idx),) + latent_shape(data.dose.shape[2:]), generator=gen)
            lr = cosine_lr(step, total, cfg.lr, cfg.lr_min)
            _set_lr(opt, lr)
            loss, mse, cond = diffusion_loss(model, vae, batch, t, eps, sched, latent_scale, specs,
                                             cfg.lambda_mse, cfg.lambda_cond)
            _check_finite(loss, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            batches += 1
            sums += [loss.item(), mse.item(), cond.item()]
        loss, mse, cond = sums / batches
        row = dict(epoch=epoch, loss=loss, mse=mse, cond=cond, lr=lr, val_compliance=math.nan)
        if val and (epoch + 1) % cfg.val_every == 0:
            row["val_compliance"] = validation_compliance(pipe, val, specs, cfg.seed)
        history.append(row)
        log.info("diffusion epoch %d loss %.5f mse %.5f cond %.5f val %.3f", epoch, loss, mse, cond,
                 row["val_compliance"])
        epoch += 1
        if history.compliance() and early_stop(history, cfg.patience):
            log.info("early stop at epoch %d", epoch - 1)
            break
    model.eval()
    pipe.manifest = _pipeline_manifest(pipe, cfg, history)
    if out is not None:
        save_pipeline(out, pipe)
    return pipe, history


def validation_compliance(pipe, cases, specs, seed):
    rates = [compliance_report(predict(pipe, c, seed).to_gy(), c.structures, specs).rate for c in cases]
    return float(np.mean(rates))


def _pipeline_manifest(pipe, cfg, history):
    return dict(
        stage="diffusion",
        config=cfg.to_dict(),
        vae=pipe.vae.config.to_dict(),
        denoiser=pipe.model.denoiser_config.to_dict(),
        condition=pipe.model.condition_config.to_dict(),
        structure_layout=list(STRUCTURE_LAYOUT),
        schedule=dict(T=pipe.schedule.T, beta_start=cfg.beta_start, beta_end=cfg.beta_end),
        latent_scale=pipe.latent_scale,
        epoch=len(history) - 1,
        history=history.rows,
    )


def save_pipeline(path, pipe):
    return save_checkpoint(path, {"vae": pipe.vae, "denoiser": pipe.model}, pipe.manifest)


def load_pipeline(path):
    manifest = read_manifest(path)
    if manifest.get("stage") != "diffusion":
        raise CheckpointError(f"{path} is not a diffusion checkpoint (stage {manifest.get('stage')!r})")
    if manifest.get("structure_layout") != list(STRUCTURE_LAYOUT):
        raise CheckpointError(f"{path} was trained with a different structure layout")
    vae = LightweightVAE3D(VAEConfig(**manifest["vae"]))
    model = DoseDenoiser(DenoiserConfig(**manifest["denoiser"]), ConditionConfig(**manifest["condition"]))
    load_into(path, {"vae": vae, "denoiser": model}, manifest)
    s = manifest["schedule"]
    sched = make_schedule(s["T"], s["beta_start"], s["beta_end"])
    return Pipeline(_freeze(vae), _freeze(model), sched, manifest["latent_scale"], manifest)


@torch.no_grad()
def predict(pipe, case, seed):
    """Sample a dose latent for ``case``, decode it and attach a prescription-based scale.

    The reference dose of a prediction is taken as the primary prescription,
    since the case's own dose (if any) must not leak into inference.
    """
    masks, context = case_condition_inputs(case)
    masks = torch.from_numpy(masks)[None]
    context = torch.from_numpy(context)[None]
    shape = (1,) + latent_shape(case.grid.shape, pipe.vae.config.latent_channels)
    z0 = sample(pipe.model.noise_fn(masks, context), None, pipe.schedule, seed, shape)
    values = pipe.vae.decode(z0 / pipe.latent_scale, "dose")[0, 0].numpy().astype(np.float32)
    scale = DoseScale(float(case.structures.primary_ptv().prescription))
    return DoseVolume(case.grid, values, scale)
