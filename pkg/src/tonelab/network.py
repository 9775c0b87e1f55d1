"""Encoder, decoder and discriminator networks plus the checkpoint format.

The encoder maps a screened page to a per-pixel 4-channel representation:
one intensity channel bounded to [0, 1] and three unit-scale type channels
predicted as a per-pixel Gaussian (mu, sigma). The decoder consumes the
intensity channel concatenated with the type channels scaled by
sin(pi * intensity), so type information vanishes exactly at tone extremes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from tonelab.core import (
    ContractError,
    LatentMap,
    PaddingRequiredError,
    as_gray,
    as_labels,
)


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    encoder_levels: int = 3
    encoder_residual_blocks: int = 6
    decoder_levels: int = 7
    discriminator_blocks: int = 4
    latent_channels: int = 4
    sigma_min: float = 1e-4
    sigma_max: float = 10.0
    # the decoder reads a low-passed copy of the intensity channel so tone
    # texture cannot smuggle itself through it; the type scaling still uses
    # the raw intensity (exact zeros at pure black/white). 0 disables.
    intensity_blur_sigma: float = 2.5

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_json(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


# desk-scale override for tests and CPU experiments
DESK_CONFIG = ModelConfig(base_channels=16)


def sinpi01_t(x: torch.Tensor) -> torch.Tensor:
    """Torch twin of core.sinpi01: exact zeros at 0 and 1."""
    return torch.sin(torch.pi * torch.minimum(x, 1.0 - x))


_BLUR_KERNELS: dict = {}


def gaussian_blur_t(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable reflect-padded Gaussian blur on (B, 1, H, W) maps."""
    if sigma <= 0:
        return x
    key = (round(sigma, 4), x.dtype)
    if key not in _BLUR_KERNELS:
        half = max(1, int(np.ceil(3 * sigma)))
        grid = np.arange(-half, half + 1, dtype=np.float64)
        kernel = np.exp(-0.5 * (grid / sigma) ** 2)
        kernel /= kernel.sum()
        _BLUR_KERNELS[key] = torch.tensor(kernel, dtype=x.dtype)
    kernel = _BLUR_KERNELS[key]
    half = kernel.numel() // 2
    pad_w = min(half, x.shape[-1] - 1)
    pad_h = min(half, x.shape[-2] - 1)
    out = nn.functional.pad(x, (pad_w, pad_w, 0, 0), mode="reflect")
    if pad_w < half:
        out = nn.functional.pad(out, (half - pad_w, half - pad_w, 0, 0),
                                mode="replicate")
    out = nn.functional.conv2d(out, kernel.view(1, 1, 1, -1))
    out = nn.functional.pad(out, (0, 0, pad_h, pad_h), mode="reflect")
    if pad_h < half:
        out = nn.functional.pad(out, (0, 0, half - pad_h, half - pad_h),
                                mode="replicate")
    return nn.functional.conv2d(out, kernel.view(1, 1, -1, 1))


def _norm(ch: int) -> nn.Module:
    return nn.GroupNorm(min(8, ch), ch)


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1),
            _norm(ch),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(ch, ch, 3, padding=1),
            _norm(ch),
        )
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x):
        return self.act(x + self.body(x))


class ToneEncoder(nn.Module):
    """Downscale, residual trunk, upscale back to full resolution; emits
    intensity plus the type posterior (mu, log-variance)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        base = config.base_channels
        self.levels = config.encoder_levels
        ch = [min(base * 2**i, base * 8) for i in range(self.levels + 1)]
        self.stem = nn.Sequential(
            nn.Conv2d(1, ch[0], 3, padding=1), nn.LeakyReLU(0.2, inplace=True)
        )
        downs = []
        for i in range(self.levels):
            downs += [
                nn.Conv2d(ch[i], ch[i + 1], 4, stride=2, padding=1),
                _norm(ch[i + 1]),
                nn.LeakyReLU(0.2, inplace=True),
            ]
        self.down = nn.Sequential(*downs)
        self.trunk = nn.Sequential(
            *[ResidualBlock(ch[-1]) for _ in range(config.encoder_residual_blocks)]
        )
        ups = []
        for i in range(self.levels, 0, -1):
            ups += [
                nn.ConvTranspose2d(ch[i], ch[i - 1], 4, stride=2, padding=1),
                _norm(ch[i - 1]),
                nn.LeakyReLU(0.2, inplace=True),
            ]
        self.up = nn.Sequential(*ups)
        self.head = nn.Conv2d(ch[0], 7, 3, padding=1)
        self.sigma_min = config.sigma_min
        self.sigma_max = config.sigma_max

    def forward(self, x):
        h = self.stem(x)
        h = self.down(h)
        h = self.trunk(h)
        h = self.up(h)
        out = self.head(h)
        intensity = torch.sigmoid(out[:, :1])
        mu = out[:, 1:4]
        log_var = out[:, 4:7]
        sigma = torch.exp(0.5 * log_var).clamp(self.sigma_min, self.sigma_max)
        return intensity, mu, sigma


class ToneDecoder(nn.Module):
    """U-net over the 4-channel latent; pads internally so any H, W works."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        base = config.base_channels
        self.levels = config.decoder_levels
        ch = [min(base * 2**i, base * 8) for i in range(self.levels)]
        self.stem = nn.Sequential(
            nn.Conv2d(config.latent_channels, ch[0], 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.downs = nn.ModuleList()
        for i in range(self.levels - 1):
            self.downs.append(nn.Sequential(
                nn.Conv2d(ch[i], ch[i + 1], 4, stride=2, padding=1),
                _norm(ch[i + 1]),
                nn.LeakyReLU(0.2, inplace=True),
            ))
        self.ups = nn.ModuleList()
        for i in range(self.levels - 1, 0, -1):
            self.ups.append(nn.Sequential(
                nn.ConvTranspose2d(ch[i], ch[i - 1], 4, stride=2, padding=1),
                _norm(ch[i - 1]),
                nn.ReLU(inplace=True),
            ))
        self.fuses = nn.ModuleList()
        for i in range(self.levels - 1, 0, -1):
            self.fuses.append(nn.Sequential(
                nn.Conv2d(2 * ch[i - 1], ch[i - 1], 3, padding=1),
                _norm(ch[i - 1]),
                nn.ReLU(inplace=True),
            ))
        self.head = nn.Conv2d(ch[0], 1, 3, padding=1)

    def forward(self, latent):
        b, c, h, w = latent.shape
        mult = 2 ** (self.levels - 1)
        pad_h = (-h) % mult
        pad_w = (-w) % mult
        x = latent
        if pad_h or pad_w:
            x = nn.functional.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
        skips = []
        x = self.stem(x)
        for down in self.downs:
            skips.append(x)
            x = down(x)
        for up, fuse in zip(self.ups, self.fuses):
            x = up(x)
            x = fuse(torch.cat([x, skips.pop()], dim=1))
        out = torch.sigmoid(self.head(x))
        return out[:, :, :h, :w]


class PatchDiscriminator(nn.Module):
    """Strided downscaling stack scoring patch realness in (0, 1)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        base = config.base_channels
        layers = []
        in_ch = 1
        for i in range(config.discriminator_blocks):
            out_ch = min(base * 2**i, base * 8)
            layers += [nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1)]
            if i > 0:
                layers += [_norm(out_ch)]
            layers += [nn.LeakyReLU(0.2, inplace=True)]
            in_ch = out_ch
        layers += [nn.Conv2d(in_ch, 1, 3, padding=1)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        # clamp keeps scores inside the open interval even when the logits
        # saturate float32 sigmoid
        return torch.sigmoid(self.body(x)).clamp(1e-7, 1.0 - 1e-7)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.kaiming_normal_(module.weight, a=0.2, nonlinearity="leaky_relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


@dataclass
class EncoderOutput:
    intensity: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray


class ScreenModel:
    """Bundles the three networks with numpy-facing inference helpers."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.encoder = ToneEncoder(config)
            self.decoder = ToneDecoder(config)
            self.discriminator = PatchDiscriminator(config)
            self.encoder.apply(_init_weights)
            self.decoder.apply(_init_weights)
            self.discriminator.apply(_init_weights)
        self.eval()

    def eval(self):
        for m in (self.encoder, self.decoder, self.discriminator):
            m.eval()
        return self

    def train(self):
        for m in (self.encoder, self.decoder, self.discriminator):
            m.train()
        return self

    def modules(self) -> dict[str, nn.Module]:
        return {"enc": self.encoder, "dec": self.decoder, "disc": self.discriminator}

    # -- tensor-level paths used by the trainer ---------------------------

    def encode_t(self, x: torch.Tensor):
        return self.encoder(x)

    def decode_t(self, intensity: torch.Tensor, type_feature: torch.Tensor):
        scaled = sinpi01_t(intensity) * type_feature
        smooth = gaussian_blur_t(intensity, self.config.intensity_blur_sigma)
        return self.decoder(torch.cat([smooth, scaled], dim=1))

    def discriminate_t(self, x: torch.Tensor):
        return self.discriminator(x)

    # -- numpy-facing operations ------------------------------------------

    def _check_divisible(self, image: np.ndarray) -> None:
        mult = 2**self.config.encoder_levels
        h, w = image.shape
        if h % mult or w % mult:
            raise PaddingRequiredError(
                f"image {h}x{w} not divisible by {mult}; pad first "
                f"(see encode_padded)"
            )

    def encode(
        self,
        image: np.ndarray,
        stochastic: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[LatentMap, EncoderOutput]:
        image = as_gray(image)
        self._check_divisible(image)
        x = torch.from_numpy(image)[None, None]
        with torch.no_grad():
            intensity, mu, sigma = self.encode_t(x)
        intensity = intensity[0, 0].numpy()
        mu_np = mu[0].numpy()
        sigma_np = sigma[0].numpy()
        if stochastic:
            rng = rng or np.random.default_rng()
            eps = rng.standard_normal(mu_np.shape).astype(np.float32)
            type_feature = mu_np + sigma_np * eps
        else:
            type_feature = mu_np
        latent = LatentMap(intensity=intensity, type_feature=type_feature)
        return latent, EncoderOutput(intensity=intensity, mu=mu_np, sigma=sigma_np)

    def encode_padded(self, image: np.ndarray, **kwargs):
        """encode() for arbitrary sizes: reflect-pads, then crops the latent."""
        image = as_gray(image)
        mult = 2**self.config.encoder_levels
        h, w = image.shape
        pad_h = (-h) % mult
        pad_w = (-w) % mult
        if pad_h == 0 and pad_w == 0:
            return self.encode(image, **kwargs)
        padded = np.pad(image, ((0, pad_h), (0, pad_w)), mode="reflect")
        latent, enc = self.encode(padded, **kwargs)
        crop = lambda a: a[..., :h, :w]
        return (
            LatentMap(crop(latent.intensity), crop(latent.type_feature)),
            EncoderOutput(crop(enc.intensity), crop(enc.mu), crop(enc.sigma)),
        )

    def decode(self, latent: LatentMap) -> np.ndarray:
        itn = torch.from_numpy(latent.intensity)[None, None]
        typ = torch.from_numpy(latent.type_feature)[None]
        with torch.no_grad():
            out = self.decode_t(itn, typ)
        return out[0, 0].numpy()

    def discriminate(self, image: np.ndarray) -> np.ndarray:
        image = as_gray(image)
        x = torch.from_numpy(image)[None, None]
        with torch.no_grad():
            scores = self.discriminate_t(x)
        return scores[0, 0].numpy()


def sample_random_intensity(
    rng: np.random.Generator,
    labels: np.ndarray | None,
    height: int,
    width: int,
    blur_sigma: float = 2.0,
) -> np.ndarray:
    """Per-region random intensity field: constant or linear ramp per region,
    softly blurred across region boundaries."""
    from scipy import ndimage

    if labels is None:
        labels = np.zeros((height, width), dtype=np.int32)
    else:
        labels = as_labels(labels)
        if labels.shape != (height, width):
            raise ContractError("label map does not match requested size")
    out = np.zeros((height, width), dtype=np.float64)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    for lab in np.unique(labels):
        mask = labels == lab
        if rng.random() < 0.5:
            out[mask] = rng.uniform(0.1, 0.9)
        else:
            a, b = rng.uniform(0.1, 0.9, size=2)
            theta = rng.uniform(0, 2 * np.pi)
            proj = xx * np.cos(theta) + yy * np.sin(theta)
            p = proj[mask]
            span = p.max() - p.min()
            t = (p - p.min()) / span if span > 0 else np.zeros_like(p)
            out[mask] = a + (b - a) * t
    if blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=blur_sigma)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def random_intensity_path(
    model: ScreenModel,
    image: np.ndarray,
    rng: np.random.Generator,
    labels: np.ndarray | None = None,
) -> tuple[LatentMap, np.ndarray, LatentMap]:
    """Swap in a random intensity, decode, re-encode.

    Returns (injected latent, decoded image, re-encoded latent). The
    injected intensity channel is the sampled map itself.
    """
    image = as_gray(image)
    latent, _ = model.encode(image, stochastic=False)
    rand_itn = sample_random_intensity(rng, labels, *image.shape)
    s_r = LatentMap(intensity=rand_itn, type_feature=latent.type_feature)
    x_r = model.decode(s_r)
    s_r_tilde, _ = model.encode(np.clip(x_r, 0.0, 1.0), stochastic=False)
    return s_r, x_r, s_r_tilde


# -- named-parameter checkpoint container ---------------------------------

_MAGIC = "tonelab-ckpt"


def write_param_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """JSON header line + concatenated raw little-endian blobs."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float32:
            dtype = "f32le"
            raw = arr.astype("<f4").tobytes()
        elif arr.dtype == np.int64:
            dtype = "i64le"
            raw = arr.astype("<i8").tobytes()
        else:
            raise ContractError(f"unsupported tensor dtype {arr.dtype} for {name}")
        entries.append({
            "name": name, "shape": list(arr.shape), "dtype": dtype,
            "offset": offset, "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    doc = {"format": _MAGIC, **header, "tensors": entries}
    data = json.dumps(doc).encode("utf-8") + b"\n" + b"".join(blobs)
    Path(path).write_bytes(data)


def read_param_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise ContractError("checkpoint missing header line")
    header = json.loads(data[:newline].decode("utf-8"))
    if header.get("format") != _MAGIC:
        raise ContractError("not a tonelab checkpoint")
    payload = data[newline + 1 :]
    tensors = {}
    for entry in header.pop("tensors"):
        start, nbytes = entry["offset"], entry["nbytes"]
        dtype = {"f32le": "<f4", "i64le": "<i8"}[entry["dtype"]]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=dtype)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, tensors


def model_tensors(model: ScreenModel) -> dict[str, np.ndarray]:
    out = {}
    for prefix, module in model.modules().items():
        for name, tensor in module.state_dict().items():
            out[f"{prefix}.{name}"] = tensor.detach().numpy()
    return out


def save_model(path, model: ScreenModel, step: int = 0, phase: int = 0,
               extra: dict | None = None,
               extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    header = {
        "version": 1,
        "step": step,
        "phase": phase,
        "config": model.config.to_json(),
    }
    if extra:
        header.update(extra)
    tensors = model_tensors(model)
    if extra_tensors:
        tensors.update(extra_tensors)
    write_param_container(path, header, tensors)


def load_model(path) -> tuple[ScreenModel, dict, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint.

    Returns (model, header, leftover_tensors); leftover tensors are the
    entries that do not belong to the three networks (optimizer state).
    """
    header, tensors = read_param_container(path)
    model = ScreenModel(ModelConfig.from_json(header["config"]), seed=0)
    leftovers = dict(tensors)
    for prefix, module in model.modules().items():
        state = {}
        for name, ref in module.state_dict().items():
            key = f"{prefix}.{name}"
            if key not in leftovers:
                raise ContractError(f"checkpoint missing tensor {key}")
            arr = leftovers.pop(key)
            if tuple(arr.shape) != tuple(ref.shape):
                raise ContractError(
                    f"tensor {key} shape {arr.shape} does not match model "
                    f"{tuple(ref.shape)}"
                )
            state[name] = torch.from_numpy(arr)
        module.load_state_dict(state)
    model.eval()
    return model, header, leftovers
