"""Training loop, milestone schedule, checkpoints and evaluation."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, config_from_dict
from .data import DatasetManifest, bicubic_resize, load_image, mod_crop, sample_batch, split_dataset, stack_pairs
from .metrics import ImageScore, MetricReport, StubFeatureNet, clipscore, lpips, psnr, rgb_to_y, ssim
from .srnet import SegSrModel, build_encoder, build_model, l1_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "segsr-checkpoint/1"
EXIT_OK, EXIT_NAN, EXIT_CONFIG = 0, 2, 3

# trainer keys that must agree between a checkpoint and the config resuming it
RESUME_KEYS = ("lr", "factor", "betas", "eps", "batch", "patch", "augment", "seed", "milestones")


class NanLossError(RuntimeError):
    exit_code = EXIT_NAN


class ResumeMismatchError(ValueError):
    exit_code = EXIT_CONFIG


@dataclass
class Schedule:
    base_lr: float = 1e-4
    milestones: tuple = ()
    factor: float = 0.5
    total_iters: int = 80000

    def __post_init__(self):
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if ms and ms[-1] >= self.total_iters:
            raise ValueError(f"milestone {ms[-1]} is not below total_iters {self.total_iters}")

    @classmethod
    def from_config(cls, t):
        return cls(t.lr, tuple(t.milestones), t.factor, t.total_iters)


def lr_at(schedule: Schedule, iteration: int) -> float:
    """``base_lr * factor ** (number of milestones <= iteration)`` for 0-based ``iteration``."""
    if not 0 <= iteration < schedule.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {schedule.total_iters})")
    passed = sum(1 for m in schedule.milestones if m <= iteration)
    return schedule.base_lr * schedule.factor**passed


# ---------------------------------------------------------------- checkpoints

def frozen_hash(model) -> str:
    """SHA-256 over the frozen encoder tensors ('' when the model has no encoder)."""
    enc = getattr(model, "encoder", None)
    if enc is None:
        return ""
    h = hashlib.sha256()
    for name, t in sorted(enc.frozen_state().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model, config: ExperimentConfig, iteration=0, optimizer=None, rng=None, best=None):
    state = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "iteration": iteration,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": rng.bit_generator.state if rng is not None else None,
        "best": best or {},
        "frozen_hash": frozen_hash(model),
        "parameters": model.parameter_counts(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=True)
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    return state


def load_model(checkpoint):
    """Rebuild the model stored in a checkpoint; returns ``(model, config)``."""
    state = read_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    cfg = config_from_dict(state["config"])
    model = build_model(cfg.model, load_weights=False)
    model.load_state_dict(state["model"])
    return model, cfg


# ---------------------------------------------------------------- evaluation

def eval_multiple(model) -> int:
    """HR sides must be divisible by this so the LR input satisfies the model's constraints."""
    scale = model.scale
    enc = getattr(model, "encoder", None)
    return math.lcm(scale, enc.patch_size) if enc is not None else scale


def clip_embedder(model_cfg):
    """Adapter-free encoder ``embed`` for CLIPScore, sharing the model's frozen weights source."""
    enc_cfg = model_cfg.encoder
    plain = type(enc_cfg.lora)(rank=0, targets="none")
    enc = build_encoder(type(enc_cfg)(**{**enc_cfg.__dict__, "lora": plain}))
    enc.eval()
    return enc.embed


def super_resolve(model, lr):
    """Full-image inference on a ``3 x H x W`` array; returns the unclamped ``3 x sH x sW`` tensor."""
    with torch.no_grad():
        return model(torch.from_numpy(np.array(lr, dtype=np.float32))[None])[0]


def evaluate(model, manifest: DatasetManifest, split="test", classes=None, metrics_cfg=None,
             max_images=None, model_cfg=None) -> MetricReport:
    """Full-image evaluation: mod-crop HR, bicubic-degrade, super-resolve, clamp, score."""
    items = manifest.paths(split, classes)
    if not items:
        raise ValueError(f"split {split!r} has no images")
    if max_images:
        items = items[:max_images]
    y_only = bool(metrics_cfg and metrics_cfg.y_channel)
    lp_net = StubFeatureNet() if metrics_cfg and metrics_cfg.lpips else None
    embed = clip_embedder(model_cfg) if metrics_cfg and metrics_cfg.clipscore and model_cfg else None
    report = MetricReport(class_balanced=bool(metrics_cfg and metrics_cfg.class_balanced))
    was_training = model.training
    model.eval()
    scale = model.scale
    multiple = eval_multiple(model)
    for path, name in items:
        hr = mod_crop(load_image(path), multiple)
        h, w = hr.shape[-2:]
        lr = bicubic_resize(hr, (h // scale, w // scale))
        sr = super_resolve(model, lr).clamp(0.0, 1.0).double()
        hr_t = torch.from_numpy(np.array(hr, dtype=np.float64))
        a, b = (rgb_to_y(sr), rgb_to_y(hr_t)) if y_only else (sr, hr_t)
        report.add(ImageScore(
            path=str(path), class_name=name, psnr=psnr(a, b), ssim=ssim(a, b),
            lpips=lpips(sr, hr_t, lp_net) if lp_net is not None else None,
            clipscore=clipscore(sr.float(), hr_t.float(), embed) if embed is not None else None,
        ))
    model.train(was_training)
    return report


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    out_dir: Path
    last_checkpoint: Path
    best_checkpoint: Path | None
    losses: list = field(default_factory=list)
    log_path: Path | None = None


def resolve_manifest(cfg: ExperimentConfig) -> DatasetManifest:
    if cfg.data.manifest and Path(cfg.data.manifest).is_file():
        return DatasetManifest.load(cfg.data.manifest)
    if cfg.data.root:
        return split_dataset(cfg.data.root, tuple(cfg.data.ratio), cfg.data.seed, cfg.model.scale)
    raise FileNotFoundError("config needs data.manifest (existing file) or data.root")


def _plain(v):
    return list(v) if isinstance(v, (list, tuple)) else v


def check_resume(state, cfg: ExperimentConfig):
    saved = config_from_dict(state["config"])
    problems = []
    if saved.model != cfg.model:
        problems.append("model section differs")
    for key in RESUME_KEYS:
        a, b = getattr(saved.trainer, key), getattr(cfg.trainer, key)
        if _plain(a) != _plain(b):
            problems.append(f"trainer.{key}: checkpoint {a!r} vs config {b!r}")
    if problems:
        raise ResumeMismatchError("config does not match the checkpoint being resumed: " + "; ".join(problems))


def train(cfg: ExperimentConfig, resume=None, manifest: DatasetManifest | None = None,
          stop_at=None, on_backward=None) -> TrainResult:
    """Adam on L1 loss for ``trainer.total_iters`` steps.

    Step ``n`` (1-based) uses ``lr_at(schedule, n - 1)``. The log is one JSON
    object per line. ``stop_at`` ends the run early after that step (the
    checkpoint cadence is unchanged), which is how interrupted runs are tested.
    ``on_backward(step, model)`` is called after each backward pass, before
    clipping and the optimizer step.
    """
    t = cfg.trainer
    out_dir = Path(t.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = manifest or resolve_manifest(cfg)
    schedule = Schedule.from_config(t)
    model = build_model(cfg.model)
    if not isinstance(model, SegSrModel):
        raise ValueError(f"model.arch {cfg.model.arch!r} has no trainable parameters")
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=t.lr, betas=tuple(t.betas), eps=t.eps)
    rng = np.random.default_rng(t.seed)
    start, best = 0, {}

    log_path = out_dir / "train_log.jsonl"
    if resume is not None:
        state = read_checkpoint(resume)
        check_resume(state, cfg)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        rng.bit_generator.state = state["rng"]
        start, best = state["iteration"], dict(state["best"])
        mode = "a"
    else:
        (out_dir / "config.yaml").write_text(cfg.to_yaml())
        mode = "w"

    eval_every = t.eval_every or max(1, t.total_iters // 10)
    can_eval = bool(manifest.paths("test"))
    if not can_eval:
        log.warning("test split is empty; periodic evaluation and best.pt are skipped")
    losses = []
    last = out_dir / "last.pt"
    best_path = out_dir / "best.pt" if best else None
    model.train()
    end = t.total_iters if stop_at is None else min(stop_at, t.total_iters)
    with open(log_path, mode) as logf:
        for n in range(start + 1, end + 1):
            lr_now = lr_at(schedule, n - 1)
            for group in optimizer.param_groups:
                group["lr"] = lr_now
            lr_np, hr_np = stack_pairs(sample_batch(manifest, t.patch, t.batch, rng, cfg.model.scale,
                                                    do_augment=t.augment))
            pred = model(torch.from_numpy(lr_np))
            loss = l1_loss(pred, torch.from_numpy(hr_np))
            if not torch.isfinite(loss):
                diag = save_checkpoint(out_dir / "nan_abort.pt", model, cfg, n - 1, optimizer, rng, best)
                raise NanLossError(f"non-finite loss at iteration {n}; diagnostic checkpoint {diag}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if on_backward is not None:
                on_backward(n, model)
            if t.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, t.grad_clip)
            optimizer.step()
            value = loss.item()
            losses.append(value)
            if n % t.log_every == 0:
                logf.write(json.dumps({"iter": n, "loss": value, "lr": lr_now}) + "\n")

            if can_eval and (n % eval_every == 0 or n == t.total_iters):
                report = evaluate(model, manifest, "test", max_images=t.eval_max_images,
                                  metrics_cfg=cfg.metrics, model_cfg=cfg.model)
                overall = report.overall()
                logf.write(json.dumps({"iter": n, "eval": overall}) + "\n")
                score = overall["psnr"]
                if score is not None and score > best.get("psnr", -math.inf):
                    best = {"psnr": score, "iter": n}
                    best_path = save_checkpoint(out_dir / "best.pt", model, cfg, n, optimizer, rng, best)
            if n % t.checkpoint_every == 0:
                save_checkpoint(out_dir / f"iter_{n:07d}.pt", model, cfg, n, optimizer, rng, best)
            logf.flush()
    save_checkpoint(last, model, cfg, end, optimizer, rng, best)
    return TrainResult(out_dir, last, best_path, losses, log_path)
