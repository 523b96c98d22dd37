"""Exporter: token-grid reshaping, FMAP bytes, hub error surfaces."""

import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

from feature_exporter.export import ExportError, ExportJob, export_features
from feature_exporter.fmap_format import FmapValidationError, validate_fmap_bytes, write_fmap


class TinyViT(nn.Module):
    """Patch embedding, class + register tokens, pointwise mixing blocks."""

    def __init__(self, dim=32, patch=14, n_blocks=4, n_registers=0, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.extras = nn.Parameter(torch.randn(1, 1 + n_registers, dim) * 0.02)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))
            for _ in range(n_blocks))

    def forward(self, x):
        t = self.patch_embed(x).flatten(2).transpose(1, 2)   # (B, N, C)
        t = torch.cat([self.extras.expand(t.shape[0], -1, -1), t], dim=1)
        for blk in self.blocks:
            t = t + blk(t)
        return t


def write_patches(tmp_path, n=2, size=224, seed=0):
    rng = np.random.default_rng(seed)
    in_dir = tmp_path / "patches"
    in_dir.mkdir(exist_ok=True)
    for i in range(n):
        arr = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
        Image.fromarray(arr, "RGB").save(in_dir / f"patch_{i:03d}.png")
    return str(in_dir)


def make_job(tmp_path, blocks=(0, 1, 2, 3), resolution=224):
    return ExportJob(model_id="local", block_indices=blocks,
                     input_dir=write_patches(tmp_path), output_dir=str(tmp_path / "out"),
                     resolution=resolution)


class TestExport:
    def test_224_patch14_gives_16x16_grids(self, tmp_path):
        job = make_job(tmp_path)
        written = export_features(job, model=TinyViT(dim=32, patch=14))
        assert len(written) == 2
        shapes = validate_fmap_bytes(open(written[0], "rb").read())
        assert shapes == [(0, 32, 16, 16), (1, 32, 16, 16),
                          (2, 32, 16, 16), (3, 32, 16, 16)]

    def test_register_tokens_dropped(self, tmp_path):
        job = make_job(tmp_path)
        written = export_features(job, model=TinyViT(dim=16, patch=14, n_registers=4))
        shapes = validate_fmap_bytes(open(written[0], "rb").read())
        assert all(s[2] == s[3] == 16 for s in shapes)

    def test_repeat_runs_identical_within_tolerance(self, tmp_path):
        model = TinyViT(dim=16, patch=14, seed=3)
        job_a = ExportJob("local", (0, 1, 2, 3), write_patches(tmp_path),
                          str(tmp_path / "a"), 224)
        job_b = ExportJob("local", (0, 1, 2, 3), write_patches(tmp_path),
                          str(tmp_path / "b"), 224)
        a = export_features(job_a, model=model)
        b = export_features(job_b, model=model)
        for pa, pb in zip(a, b):
            ra = np.frombuffer(open(pa, "rb").read()[12 + 16:], dtype="<f4")
            rb = np.frombuffer(open(pb, "rb").read()[12 + 16:], dtype="<f4")
            assert np.abs(ra - rb).max() < 1e-5

    def test_block_indices_validated_against_model(self, tmp_path):
        job = make_job(tmp_path, blocks=(0, 1, 2, 9))
        with pytest.raises(ExportError, match="out of range"):
            export_features(job, model=TinyViT(n_blocks=4))

    def test_bad_indices_rejected_at_construction(self, tmp_path):
        with pytest.raises(ExportError):
            ExportJob("local", (3, 2, 1, 0), "in", "out", 224)

    def test_resize_mismatched_inputs(self, tmp_path):
        in_dir = write_patches(tmp_path, n=1, size=100)
        job = ExportJob("local", (0, 1, 2, 3), in_dir, str(tmp_path / "out"), 224)
        written = export_features(job, model=TinyViT(dim=16, patch=14))
        shapes = validate_fmap_bytes(open(written[0], "rb").read())
        assert all(s[2] == 16 for s in shapes)

    def test_missing_timm_message_is_actionable(self, tmp_path):
        job = make_job(tmp_path)
        with pytest.raises(ExportError, match="timm"):
            export_features(job)  # no injected model, no timm installed


class TestValidator:
    def test_rejects_bad_magic(self):
        with pytest.raises(FmapValidationError) as err:
            validate_fmap_bytes(b"JUNK" + b"\x00" * 24)
        assert err.value.offset == 0

    def test_rejects_truncation(self, tmp_path):
        path = str(tmp_path / "x.fmap")
        write_fmap(path, [(i, np.zeros((2, 3, 3), dtype=np.float32)) for i in range(4)])
        data = open(path, "rb").read()
        with pytest.raises(FmapValidationError):
            validate_fmap_bytes(data[:-5])

    def test_rejects_trailing_bytes(self, tmp_path):
        path = str(tmp_path / "x.fmap")
        write_fmap(path, [(i, np.zeros((1, 2, 2), dtype=np.float32)) for i in range(4)])
        with pytest.raises(FmapValidationError, match="trailing"):
            validate_fmap_bytes(open(path, "rb").read() + b"\x00")
