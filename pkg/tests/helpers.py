import torch

from segsr.config import config_from_dict
from segsr.encoder import SemanticEncoder


def central_difference(fn, param, step=1e-3):
    """Numerical gradient of scalar ``fn()`` w.r.t. every entry of ``param`` (in place perturbation)."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = fn().item()
        flat[i] = orig - step
        down = fn().item()
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    """Max-abs difference relative to the larger gradient magnitude."""
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / scale


def tiny_encoder(**kw):
    opts = dict(width=16, depth=2, heads=2, patch_size=8, grid=4, lora_rank=4, lora_targets="attn+ffn", seed=0)
    opts.update(kw)
    return SemanticEncoder(**opts)


def smoke_config(out_dir=None, trainer=None, **model):
    """C_f=16, k=2 hybrid model with a width-32 stub encoder."""
    m = {"scale": 4, "channels": 16, "units": 2, "total_blocks": 2, "heads": 2,
         "encoder": {"width": 32, "depth": 2, "heads": 2, "patch_size": 8, "grid": 4, "lora": {"rank": 4}}}
    m.update(model)
    t = {"total_iters": 50, "milestones": [], "lr": 2e-3, "patch": 16, "batch": 4,
         "checkpoint_every": 25, "eval_every": 1000, "eval_max_images": 2,
         "out_dir": str(out_dir or "runs/test")}
    t.update(trainer or {})
    return config_from_dict({"model": m, "trainer": t})
