"""Shared fixtures: desk-scale acceptance artifacts (datasets + a trained
checkpoint), cached under runs/acceptance so repeat sessions are fast.

Set TONELAB_ACCEPT_DIR to relocate the cache. The first acceptance run
trains the desk model on CPU (roughly half an hour on two cores); every
later run reuses the cached checkpoint.
"""

import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(2)

POOL_SEED = 11
TRAIN_SEED = 11
PROXY_SEED = 1200
HOLDOUT_SEED = 1100
RAMP_SEED = 777
PAGE = 256
PHASE1_STEPS = 10000
PHASE2_STEPS = 4000


def acceptance_root() -> Path:
    default = Path(__file__).resolve().parents[1] / "runs" / "acceptance"
    return Path(os.environ.get("TONELAB_ACCEPT_DIR", default))


def _ensure_datasets(root: Path) -> None:
    from tonelab import tonegen
    from tonelab.tonegen import (
        DatasetConfig,
        IntensityDirective,
        compose_page,
        extract_regions,
        random_line_art,
        sample_spec_pool,
    )

    for name, n_pages, seed in (("train", 200, TRAIN_SEED),
                                ("proxy", 24, PROXY_SEED),
                                ("holdout", 24, HOLDOUT_SEED)):
        if not (root / name / "manifest.json").exists():
            tonegen.build_dataset(DatasetConfig(
                out_dir=str(root / name), n_pages=n_pages, height=PAGE, width=PAGE,
                n_base_specs=16, seed=seed, pool_seed=POOL_SEED,
            ))

    ramp_dir = root / "ramps"
    if (ramp_dir / "ramps.json").exists():
        return
    pool = sample_spec_pool(16, np.random.default_rng(POOL_SEED))
    meta = []
    for i in range(20):
        rng = np.random.default_rng((RAMP_SEED, i))
        line = random_line_art(PAGE, PAGE, rng)
        regions, n = extract_regions(line)
        sizes = np.bincount(regions.ravel(), minlength=n)
        ramp_region = int(np.argmax(sizes))
        chosen = rng.choice(len(pool), size=3, replace=False)
        assignment = {}
        for region in range(n):
            if region == ramp_region:
                assignment[region] = (pool[int(chosen[0])], IntensityDirective(
                    kind="linear_ramp", start=0.2, end=0.8,
                    axis="x" if rng.random() < 0.5 else "y",
                ))
            else:
                assignment[region] = (pool[int(chosen[1 + (region % 2)])],
                                      IntensityDirective(
                    kind="constant", value=float(rng.uniform(0.15, 0.85))))
        page = compose_page(line, assignment)
        tonegen.save_page(ramp_dir / f"{i:04d}", page)
        meta.append({"dir": f"{i:04d}",
                     "ramp_type": page.specs.index(pool[int(chosen[0])])})
    (ramp_dir / "ramps.json").write_text(json.dumps(meta))


def desk_train_config(root: Path):
    from tonelab.losses import LossWeights
    from tonelab.network import ModelConfig
    from tonelab.trainer import TrainConfig

    return TrainConfig(
        synth_manifest=str(root / "train" / "manifest.json"),
        real_manifest=str(root / "proxy" / "manifest.json"),
        out_dir=str(root / "run"),
        batch_size=4,
        crop_size=64,
        learning_rate=5e-4,
        phase1_steps=PHASE1_STEPS,
        phase2_steps=PHASE2_STEPS,
        seed=0,
        model=ModelConfig(base_channels=16),
        weights=LossWeights(rec=10.0, adv=1.0, itn=15.0, kl=1.0, fcons=20.0,
                            frec=1.0),
        checkpoint_every=2000,
        threads=2,
        log_every=100,
        fcons_on_mean=True,
        reg_warmup_steps=1500,
        adv_warmup_steps=1500,
        decode_mean=True,
    )


@pytest.fixture(scope="session")
def acceptance_artifacts() -> Path:
    root = acceptance_root()
    root.mkdir(parents=True, exist_ok=True)
    _ensure_datasets(root)
    return root


@pytest.fixture(scope="session")
def desk_checkpoint(acceptance_artifacts) -> Path:
    from tonelab import trainer

    final = acceptance_artifacts / "run" / "ckpt_final"
    if not final.exists():
        print("\n[acceptance] no cached desk checkpoint; training "
              f"{PHASE1_STEPS + PHASE2_STEPS} steps on CPU (this is slow)...")
        trainer.run_training(desk_train_config(acceptance_artifacts))
    return final


@pytest.fixture(scope="session")
def desk_model(desk_checkpoint):
    from tonelab.network import load_model

    model, _, _ = load_model(desk_checkpoint)
    return model
