from __future__ import annotations

import numpy as np
import pytest
import torch

from gan_pad.synthdata import ATTACK_KINDS, AttackKind, SynthParams, build_corpus

torch.use_deterministic_algorithms(True)

SMALL_WIDTHS = (2, 4, 4, 8)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """8 bona fide train, 2 bona fide val, 2 PA val images of 96x96."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    attacks = [AttackKind(k, 0.5) for k in ATTACK_KINDS]
    return build_corpus(8, 2, 2, SynthParams(image_size=(96, 96)), attacks, seed=3, out_dir=root)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
