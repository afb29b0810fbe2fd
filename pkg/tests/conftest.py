"""Shared fixtures.

The session-scoped trained stack runs the full default pipeline once and
caches every artifact under OVSAM_TEST_CACHE (default .ovsam_cache/), so
repeated test runs skip retraining. Delete the cache directory for a cold
run.
"""

import os
from pathlib import Path

import numpy as np
import pytest
import torch

from ovsam import synthdata
from ovsam.archive import load_archive
from ovsam.pipeline import ARCHIVE_NAMES, RunConfig, run_all_stages


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """A 1%-scale corpus for fast mechanical tests."""
    root = tmp_path_factory.mktemp("tiny_data")
    manifests = synthdata.build_datasets(root, seed=11, scale=0.01)
    return root, manifests


def _stack_config(cache: Path) -> RunConfig:
    cfg = RunConfig()
    cfg.seed = 0
    cfg.data_root = str(cache / "data")
    cfg.out_dir = str(cache / "out")
    return cfg


@pytest.fixture(scope="session")
def trained_stack():
    """Full-scale artifacts for the default seed; trained on first use."""
    cache = Path(os.environ.get("OVSAM_TEST_CACHE", ".ovsam_cache")).absolute()
    cfg = _stack_config(cache)
    histories = run_all_stages(cfg)
    out = Path(cfg.out_dir)

    from ovsam.model import OpenVocabSam

    bundle = OpenVocabSam.load(out / ARCHIVE_NAMES["model"])
    return {
        "cfg": cfg,
        "out": out,
        "data_root": Path(cfg.data_root),
        "histories": histories,
        "bundle": bundle,
        "paths": {k: out / v for k, v in ARCHIVE_NAMES.items()},
    }


@pytest.fixture(scope="session")
def eval_manifest(trained_stack):
    return synthdata.load_manifest(trained_stack["data_root"], "eval")


@pytest.fixture(scope="session")
def teacher_parts(trained_stack):
    """Teacher encoder + its co-trained decoder, loaded frozen."""
    from ovsam.decoder import PromptableDecoder
    from ovsam.mini_sam import TeacherConfig, TeacherEncoder

    tensors, meta = load_archive(trained_stack["paths"]["teacher"])
    encoder = TeacherEncoder(TeacherConfig(**meta["config"]))
    encoder.load_state_dict(
        {
            k[len("teacher.") :]: torch.from_numpy(np.array(v))
            for k, v in tensors.items()
            if k.startswith("teacher.")
        }
    )
    decoder = PromptableDecoder()
    decoder.load_state_dict(
        {
            k[len("decoder.") :]: torch.from_numpy(np.array(v))
            for k, v in tensors.items()
            if k.startswith("decoder.")
        }
    )
    encoder.eval()
    decoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder, decoder, meta
