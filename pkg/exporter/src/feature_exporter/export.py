"""Run an encoder over image patches and dump per-block feature grids.

Works with any torch module exposing an indexable ``blocks`` list whose
outputs are token sequences (B, N, C) or feature maps (B, C, H, W). Token
sequences are reshaped to (C, h, w) grids after dropping class/register
tokens. Hub models load through timm when it is installed.
"""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .fmap_format import write_fmap

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ExportError(RuntimeError):
    """Export failed in a way the operator must act on."""


@dataclass
class ExportJob:
    model_id: str                      # hub name, or "local" with an injected module
    block_indices: tuple[int, int, int, int]
    input_dir: str
    output_dir: str
    resolution: int                    # input side length the encoder expects
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if len(self.block_indices) != 4:
            raise ExportError(f"need exactly 4 block indices, got {self.block_indices}")
        if list(self.block_indices) != sorted(set(self.block_indices)):
            raise ExportError(f"block indices must be strictly increasing: {self.block_indices}")

    def validate_against(self, n_blocks: int) -> None:
        bad = [b for b in self.block_indices if not 0 <= b < n_blocks]
        if bad:
            raise ExportError(
                f"block indices {bad} out of range for a {n_blocks}-block model")


def load_hub_model(model_id: str) -> torch.nn.Module:
    """Load a pretrained encoder by hub name via timm."""
    try:
        import timm
    except ImportError as err:
        raise ExportError(
            "timm is required to load hub models; install it with "
            "`pip install timm`, or pass a local torch module instead") from err
    try:
        model = timm.create_model(model_id, pretrained=True)
    except Exception as err:  # gated weights, auth, network
        raise ExportError(
            f"could not obtain weights for {model_id!r}: {err}. Gated models "
            "need a Hugging Face token (huggingface-cli login) and accepted "
            "terms on the model page") from err
    return model.eval()


def _to_grid(feat: torch.Tensor, grid: int) -> np.ndarray:
    """One sample's block output -> (c, h, w) float32 grid.

    Token layouts (N, C) drop leading class/register tokens beyond grid*grid;
    map layouts (C, H, W) pass through after a shape check.
    """
    if feat.ndim == 2:
        n_tokens, c = feat.shape
        extras = n_tokens - grid * grid
        if extras < 0:
            raise ExportError(
                f"block produced {n_tokens} tokens, fewer than the {grid}x{grid} grid")
        tokens = feat[extras:]
        return (tokens.transpose(0, 1).reshape(c, grid, grid)
                .detach().cpu().numpy().astype(np.float32))
    if feat.ndim == 3:
        c, h, w = feat.shape
        if (h, w) != (grid, grid):
            raise ExportError(f"block produced a {h}x{w} map, expected {grid}x{grid}")
        return feat.detach().cpu().numpy().astype(np.float32)
    raise ExportError(f"unsupported block output rank {feat.ndim}")


def _load_patch(path: str, job: ExportJob) -> torch.Tensor:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (job.resolution, job.resolution):
            im = im.resize((job.resolution, job.resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(job.mean, dtype=np.float32)) \
        / np.asarray(job.std, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1))[None]


def _infer_patch_size(model: torch.nn.Module) -> int | None:
    embed = getattr(model, "patch_embed", None)
    proj = getattr(embed, "proj", embed)
    stride = getattr(proj, "stride", None)
    if stride:
        return int(stride[0] if isinstance(stride, (tuple, list)) else stride)
    return None


def export_features(job: ExportJob, model: torch.nn.Module | None = None) -> list[str]:
    """Write one FMAP file per input patch; returns the written paths.

    ``model`` short-circuits hub loading (local modules, tests). The model
    must expose ``blocks`` as an indexable sequence of token/feature stages.
    """
    if model is None:
        model = load_hub_model(job.model_id)
    model.eval()
    blocks = getattr(model, "blocks", None)
    if blocks is None:
        raise ExportError(f"model {job.model_id!r} has no indexable `blocks`")
    job.validate_against(len(blocks))

    patch = _infer_patch_size(model)
    grid = job.resolution // patch if patch else None

    patches = sorted(glob.glob(os.path.join(job.input_dir, "*.png")))
    if not patches:
        raise ExportError(f"no .png patches in {job.input_dir}")
    os.makedirs(job.output_dir, exist_ok=True)

    wanted = set(job.block_indices)
    written = []
    for path in patches:
        x = _load_patch(path, job)
        captured: dict[int, torch.Tensor] = {}
        handles = []
        for i in wanted:
            def hook(_mod, _inp, out, idx=i):
                captured[idx] = out[0] if isinstance(out, tuple) else out
            handles.append(blocks[i].register_forward_hook(hook))
        try:
            with torch.no_grad():
                model(x)
        finally:
            for h in handles:
                h.remove()
        missing = wanted - set(captured)
        if missing:
            raise ExportError(f"blocks {sorted(missing)} never ran in forward()")
        levels = []
        for b in job.block_indices:
            feat = captured[b][0]  # single-sample batch
            g = grid or (int(feat.shape[0] ** 0.5) if feat.ndim == 2 else feat.shape[1])
            levels.append((b, _to_grid(feat, g)))
        stem = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(job.output_dir, f"{stem}.fmap")
        write_fmap(out_path, levels)
        written.append(out_path)
    return written
