"""Optimization loop: alternating adversarial updates, two-phase curriculum,
checkpointing and JSON-line telemetry.

All randomness (page choice, crops, flips, posterior noise, random intensity
maps) is derived statelessly from ``(seed, step)``, so resuming from a
checkpoint reproduces the loss trajectory of an uninterrupted run exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from tonelab import losses, tonegen
from tonelab.core import ContractError, extract_intensity, fallback_line_mask
from tonelab.losses import LossReport, LossWeights, TrainingAbort, total_loss
from tonelab.network import (
    ModelConfig,
    ScreenModel,
    load_model,
    sample_random_intensity,
    save_model,
)


@dataclass
class TrainConfig:
    synth_manifest: str
    out_dir: str
    real_manifest: str | None = None
    batch_size: int = 8
    learning_rate: float = 1e-4
    crop_size: int = 256
    phase1_steps: int = 1000
    phase2_steps: int = 1000
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    betas: tuple[float, float] = (0.5, 0.999)
    grad_clip: float = 10.0
    checkpoint_every: int = 1000
    threads: int = 0
    log_every: int = 25
    # apply the region-consistency loss to the posterior mean rather than the
    # sampled feature; sampling noise then stays governed by the KL term alone
    fcons_on_mean: bool = True
    # linearly ramp the kl/fcons weights from 0 over this many steps so the
    # reconstruction path can establish a live type code before the
    # regularizers consolidate it (0 disables the ramp)
    reg_warmup_steps: int = 0
    # same ramp for the adversarial game; early GAN gradients mostly add
    # noise while the autoencoder is still forming
    adv_warmup_steps: int = 0
    # decode the posterior mean during training instead of a sample. With
    # per-pixel sampled types the decoder's cheapest policy is to ignore the
    # type channels altogether (their variation is mostly uninformative
    # noise), which stalls desk-scale runs; the KL term still regularizes
    # (mu, sigma) and stochastic encoding remains available at inference.
    decode_mean: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_json(self.model)
        self.betas = tuple(self.betas)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


class PageStore:
    """Lazy page loader over a dataset manifest with a small cache."""

    def __init__(self, manifest_path, cache_size: int = 256):
        manifest_path = Path(manifest_path)
        if not manifest_path.exists():
            raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
        self.root = manifest_path.parent
        self.manifest = json.loads(manifest_path.read_text())
        self.dirs = [self.root / p["dir"] for p in self.manifest["pages"]]
        if not self.dirs:
            raise ContractError(f"manifest {manifest_path} lists no pages")
        self._cache: dict[int, tonegen.SyntheticPage] = {}
        self._cache_size = cache_size

    def __len__(self):
        return len(self.dirs)

    def page(self, index: int) -> tonegen.SyntheticPage:
        if index not in self._cache:
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[index] = tonegen.load_page(self.dirs[index])
        return self._cache[index]


def augment(sample: dict, rng: np.random.Generator, crop_size: int) -> dict:
    """Random crop plus horizontal flip, identical across aligned rasters.

    Samples smaller than the crop are reflect-padded first.
    """
    h, w = sample["image"].shape
    pad_h = max(0, crop_size - h)
    pad_w = max(0, crop_size - w)

    def prep(arr):
        if pad_h or pad_w:
            arr = np.pad(arr, ((0, pad_h), (0, pad_w)), mode="reflect")
        return arr

    rasters = {k: prep(v) for k, v in sample.items() if v is not None}
    hh, ww = rasters["image"].shape
    top = int(rng.integers(0, hh - crop_size + 1))
    left = int(rng.integers(0, ww - crop_size + 1))
    flip = bool(rng.random() < 0.5)
    out = {}
    for k, arr in rasters.items():
        view = arr[top : top + crop_size, left : left + crop_size]
        out[k] = np.ascontiguousarray(view[:, ::-1]) if flip else view.copy()
    for k in sample:
        out.setdefault(k, None)
    return out


def _step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, step, stream)))


def build_batch(
    store: PageStore,
    config: TrainConfig,
    step: int,
    labeled: bool,
) -> dict:
    """Stateless batch assembly: everything follows from (seed, step)."""
    rng = _step_rng(config.seed, step)
    b = config.batch_size
    crop = config.crop_size
    images, intensities, labels, masks, rand_itn = [], [], [], [], []
    for _ in range(b):
        page = store.page(int(rng.integers(0, len(store))))
        sample = augment(
            {
                "image": page.image,
                "intensity": page.intensity,
                "labels": page.labels.astype(np.float32),
                "line_mask": page.line_mask,
            },
            rng,
            crop,
        )
        lab = sample["labels"].astype(np.int64)
        images.append(sample["image"])
        intensities.append(sample["intensity"])
        masks.append(sample["line_mask"])
        labels.append(lab)
        rand_itn.append(
            sample_random_intensity(rng, lab if labeled else None, crop, crop)
        )
    batch = {
        "image": torch.from_numpy(np.stack(images))[:, None],
        "intensity": torch.from_numpy(np.stack(intensities))[:, None],
        "line_mask": torch.from_numpy(np.stack(masks))[:, None],
        "labels": torch.from_numpy(np.stack(labels)) if labeled else None,
        "rand_itn": torch.from_numpy(np.stack(rand_itn))[:, None],
        "eps": torch.from_numpy(
            rng.standard_normal((b, 3, crop, crop)).astype(np.float32)
        ),
    }
    return batch


@dataclass
class TrainState:
    model: ScreenModel
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    config: TrainConfig
    step: int = 0

    @property
    def phase(self) -> int:
        return 1 if self.step < self.config.phase1_steps else 2


def init_state(config: TrainConfig) -> TrainState:
    model = ScreenModel(config.model, seed=config.seed)
    model.train()
    gen_params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=config.learning_rate, betas=config.betas)
    opt_d = torch.optim.Adam(
        model.discriminator.parameters(), lr=config.learning_rate, betas=config.betas
    )
    return TrainState(model=model, opt_g=opt_g, opt_d=opt_d, config=config)


def train_step(state: TrainState, batch: dict) -> tuple[TrainState, LossReport]:
    """One alternating update: discriminator first, then encoder/decoder."""
    import dataclasses as _dc

    model = state.model
    w = state.config.weights
    warmup = state.config.reg_warmup_steps
    if warmup and state.step < warmup:
        scale = state.step / warmup
        w = _dc.replace(w, kl=w.kl * scale, fcons=w.fcons * scale)
    adv_warmup = state.config.adv_warmup_steps
    if adv_warmup and state.step < adv_warmup:
        w = _dc.replace(w, adv=w.adv * state.step / adv_warmup)
    x = batch["image"]
    i_itn = batch["intensity"]
    eps = batch["eps"]
    rand_itn = batch["rand_itn"]

    itn, mu, sigma = model.encode_t(x)
    s_scr = mu if state.config.decode_mean else mu + sigma * eps
    x_hat = model.decode_t(itn, s_scr)
    # the random-intensity path carries the deterministic representation:
    # the decoder must render mu faithfully enough for the encoder to read
    # it back, which keeps the type channel informative
    x_r = model.decode_t(rand_itn, mu)

    # discriminator update on detached fakes
    scores_real = model.discriminate_t(x)
    scores_rec_d = model.discriminate_t(x_hat.detach())
    scores_rand_d = model.discriminate_t(x_r.detach())
    _, d_term = losses.loss_adv(scores_real, scores_rec_d, scores_rand_d)
    if w.adv > 0:
        state.opt_d.zero_grad(set_to_none=True)
        (w.adv * d_term).backward()
        torch.nn.utils.clip_grad_norm_(
            model.discriminator.parameters(), state.config.grad_clip
        )
        state.opt_d.step()

    # generator update through the (updated) discriminator
    itn_r, mu_r, _ = model.encode_t(x_r)
    s_r = torch.cat([rand_itn, mu], dim=1)
    s_r_tilde = torch.cat([itn_r, mu_r], dim=1)
    g_term, _ = losses.loss_adv(
        scores_real.detach(),
        model.discriminate_t(x_hat),
        model.discriminate_t(x_r),
    )
    if batch["labels"] is not None and w.fcons > 0:
        fcons_input = mu if state.config.fcons_on_mean else s_scr
        fcons = losses.loss_fcons(fcons_input, batch["labels"], batch["line_mask"][:, 0])
    else:
        fcons = torch.zeros(())
    terms = {
        "rec": losses.loss_rec(x_hat, x),
        "adv_g": g_term,
        "adv_d": d_term.detach(),
        "itn": losses.loss_itn(itn, i_itn),
        "kl": losses.loss_kl(mu, sigma),
        "fcons": fcons,
        "frec": losses.loss_frec(s_r_tilde, s_r),
    }
    total, report = total_loss(terms, w, step=state.step)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    torch.nn.utils.clip_grad_norm_(
        list(model.encoder.parameters()) + list(model.decoder.parameters()),
        state.config.grad_clip,
    )
    state.opt_g.step()

    state.step += 1
    return state, report


# -- checkpointing ----------------------------------------------------------


def _optimizer_tensors(opt: torch.optim.Adam, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            arr = val.detach().numpy() if torch.is_tensor(val) else np.asarray(val)
            out[f"{prefix}.{idx}.{key}"] = np.asarray(arr, dtype=np.float32)
    return out


def _load_optimizer(opt: torch.optim.Adam, tensors: dict, prefix: str) -> None:
    state: dict[int, dict] = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        _, idx, key = name.split(".", 2)
        entry = state.setdefault(int(idx), {})
        tensor = torch.from_numpy(np.asarray(arr))
        entry[key] = tensor.reshape(()) if key == "step" and tensor.numel() == 1 else tensor
    if state:
        sd = opt.state_dict()
        sd["state"] = state
        opt.load_state_dict(sd)


def save_checkpoint(path, state: TrainState) -> None:
    extra_tensors = {}
    extra_tensors.update(_optimizer_tensors(state.opt_g, "opt_g"))
    extra_tensors.update(_optimizer_tensors(state.opt_d, "opt_d"))
    save_model(
        path,
        state.model,
        step=state.step,
        phase=state.phase,
        extra={"train_config": state.config.to_json()},
        extra_tensors=extra_tensors,
    )


def load_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    model, header, leftovers = load_model(path)
    if config is None:
        config = TrainConfig.from_json(header["train_config"])
    state = init_state(config)
    state.model = model
    model.train()
    gen_params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    state.opt_g = torch.optim.Adam(gen_params, lr=config.learning_rate, betas=config.betas)
    state.opt_d = torch.optim.Adam(
        model.discriminator.parameters(), lr=config.learning_rate, betas=config.betas
    )
    _load_optimizer(state.opt_g, leftovers, "opt_g")
    _load_optimizer(state.opt_d, leftovers, "opt_d")
    state.step = int(header["step"])
    return state


def prepare_unlabeled_page(image: np.ndarray, out_dir) -> None:
    """Turn a bare screened page into dataset-shaped rasters.

    Intensity comes from TV flattening, the line mask from the morphological
    fallback; the label raster is a single region and is only a placeholder
    (unlabeled pages never contribute to the region-consistency loss).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from tonelab import rasters

    bitonal = np.where(image < 0.5, 0.0, 1.0).astype(np.float32)
    rasters.save_gray_png(out_dir / "image.png", image)
    rasters.write_f32(out_dir / "intensity.f32", extract_intensity(image), channels=["itn"])
    rasters.write_u16(out_dir / "labels.u16", np.zeros(image.shape, dtype=np.int32))
    rasters.save_gray_png(out_dir / "linemask.png", fallback_line_mask(bitonal))
    (out_dir / "spec.json").write_text(json.dumps({"specs": [None], "directives": [None]}))


def run_training(config: TrainConfig, resume: str | None = None) -> Path:
    """Phase 1 on labeled synthetic batches, phase 2 alternating labeled and
    unlabeled 1:1. Returns the final checkpoint path."""
    if config.threads > 0:
        torch.set_num_threads(config.threads)
    synth = PageStore(config.synth_manifest)
    real = PageStore(config.real_manifest) if config.real_manifest else synth
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "log.jsonl"

    if resume:
        state = load_checkpoint(resume, config)
        log = open(log_path, "a")
    else:
        state = init_state(config)
        log = open(log_path, "w")

    total_steps = config.phase1_steps + config.phase2_steps
    try:
        while state.step < total_steps:
            step = state.step
            in_phase1 = step < config.phase1_steps
            labeled = in_phase1 or (step % 2 == 0)
            store = synth if labeled else real
            batch = build_batch(store, config, step, labeled=labeled)
            try:
                state, report = train_step(state, batch)
            except TrainingAbort:
                save_checkpoint(out / f"ckpt_{step}", state)
                raise
            if step % config.log_every == 0 or state.step == total_steps:
                log.write(report.to_json_line() + "\n")
                log.flush()
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{state.step}", state)
        final = out / "ckpt_final"
        save_checkpoint(final, state)
        return final
    finally:
        log.close()
