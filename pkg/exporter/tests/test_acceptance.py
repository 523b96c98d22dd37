"""Exporter acceptance: round trip into the segmentation pipeline."""

import numpy as np
import pytest

from feature_exporter.export import ExportJob, export_features
from feature_exporter.fmap_format import validate_fmap_bytes

from test_export import TinyViT, write_patches

cellfuse_encoders = pytest.importorskip(
    "cellfuse.encoders", reason="primary package needed for the round-trip check")


def test_exporter_round_trip_into_primary(tmp_path):
    """A 224x224 / patch-14 export parses in the primary component as 16x16
    grids and passes the byte-format validator."""
    job = ExportJob(model_id="local", block_indices=(0, 1, 2, 3),
                    input_dir=write_patches(tmp_path, n=1),
                    output_dir=str(tmp_path / "out"), resolution=224)
    written = export_features(job, model=TinyViT(dim=24, patch=14))
    data = open(written[0], "rb").read()

    shapes = validate_fmap_bytes(data)
    assert [s[1:] for s in shapes] == [(24, 16, 16)] * 4

    pyramid = cellfuse_encoders.read_feature_dump(written[0])
    assert pyramid.kind == "isotropic"
    assert [lv.tensor.shape for lv in pyramid.levels] == [(1, 24, 16, 16)] * 4
    assert [lv.source_block for lv in pyramid.levels] == [0, 1, 2, 3]
    print("\n[PASS] exporter-round-trip: 224x224/patch-14 -> 16x16 grids, "
          "validator ok, parsed by the primary component")
