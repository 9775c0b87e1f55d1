"""Command-line interface: one entry point, one verb per workflow."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from tonelab.core import ContractError


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _emit(doc: dict, as_json: bool, human: str | None = None) -> None:
    if as_json:
        click.echo(json.dumps(doc))
    elif human:
        click.echo(human)


@click.group(context_settings={"auto_envvar_prefix": "TONELAB"})
@click.option("--threads", type=int, default=0, help="Torch worker thread cap.")
@click.option("--log-level", default="warning", show_default=True)
def main(threads: int, log_level: str):
    """Screentone analysis and rescreening workbench."""
    logging.basicConfig(level=getattr(logging, log_level.upper(), logging.WARNING),
                        stream=sys.stderr)
    if threads > 0:
        import torch

        torch.set_num_threads(threads)


@main.command()
@click.option("--n", type=int, required=True, help="Number of pages.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--height", type=int, default=256, show_default=True)
@click.option("--width", type=int, default=256, show_default=True)
@click.option("--n-specs", type=int, default=16, show_default=True,
              help="Base specs; inverses double this.")
@click.option("--families", default=None,
              help="Comma list, optionally weighted: dot=1.0,line=0.5")
@click.option("--ramp-frac", type=float, default=0.3, show_default=True)
@click.option("--specs-per-page", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def synth(n, out_dir, height, width, n_specs, families, ramp_frac,
          specs_per_page, seed, as_json):
    """Generate a labeled synthetic dataset."""
    from tonelab import tonegen

    family_weights = None
    family_tuple = tonegen.FAMILIES
    if families:
        parts = [p.strip() for p in families.split(",") if p.strip()]
        if any("=" in p for p in parts):
            family_weights = {}
            for p in parts:
                name, _, w = p.partition("=")
                family_weights[name] = float(w or 1.0)
            family_tuple = tuple(family_weights)
        else:
            family_tuple = tuple(parts)
    try:
        config = tonegen.DatasetConfig(
            out_dir=out_dir, n_pages=n, height=height, width=width,
            n_base_specs=n_specs, families=family_tuple,
            family_weights=family_weights, ramp_fraction=ramp_frac,
            specs_per_page=specs_per_page, seed=seed,
        )
        tonegen.build_dataset(config)
    except (ContractError, OSError) as exc:
        _fail(str(exc))
    manifest = Path(out_dir) / "manifest.json"
    digest = tonegen.manifest_hash(manifest)
    _emit({"manifest": str(manifest), "pages": n, "sha256": digest},
          as_json, f"wrote {n} pages; manifest {manifest} sha256={digest}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True),
              help="JSON document mirroring the training configuration.")
@click.option("--resume", type=click.Path(exists=True), default=None)
@click.option("--json", "as_json", is_flag=True)
def train(config_path, resume, as_json):
    """Run the two-phase training loop."""
    from tonelab import trainer
    from tonelab.losses import TrainingAbort

    try:
        config = trainer.TrainConfig.from_json(json.loads(Path(config_path).read_text()))
        final = trainer.run_training(config, resume=resume)
    except (ContractError, TrainingAbort, FileNotFoundError, TypeError) as exc:
        _fail(str(exc))
    _emit({"checkpoint": str(final)}, as_json, f"final checkpoint: {final}")


def _load_model_or_fail(ckpt):
    from tonelab.network import load_model

    try:
        model, _, _ = load_model(ckpt)
    except (ContractError, FileNotFoundError, OSError) as exc:
        _fail(f"cannot load checkpoint {ckpt}: {exc}")
    return model


@main.command()
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--stochastic", is_flag=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def encode(image, ckpt, out, stochastic, seed, as_json):
    """Encode a page into the 4-channel latent container."""
    from tonelab import rasters

    model = _load_model_or_fail(ckpt)
    pixels = rasters.load_gray_png(image)
    latent, _ = model.encode_padded(
        pixels, stochastic=stochastic, rng=np.random.default_rng(seed)
    )
    rasters.write_latent(out, latent)
    _emit({"latent": out, "shape": [4, latent.height, latent.width]},
          as_json, f"latent {out} shape 4x{latent.height}x{latent.width}")


@main.command()
@click.option("--latent", required=True, type=click.Path(exists=True))
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--lines", type=click.Path(exists=True), default=None,
              help="Optional bitonal line PNG overlaid on the decode.")
@click.option("--json", "as_json", is_flag=True)
def decode(latent, ckpt, out, lines, as_json):
    """Decode a latent container back to a PNG page."""
    from tonelab import rasters, rescreener

    model = _load_model_or_fail(ckpt)
    lat = rasters.read_latent(latent)
    line_img = rasters.load_gray_png(lines) if lines else None
    if line_img is not None:
        line_img = np.where(line_img < 0.5, 0.0, 1.0).astype(np.float32)
    try:
        result = rescreener.recompose(lat, model, line_img)
    except ContractError as exc:
        _fail(str(exc))
    rasters.save_gray_png(out, result)
    _emit({"image": out}, as_json, f"decoded {out}")


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--krange", default="1:10", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--linemask", type=click.Path(exists=True), default=None,
              help="Line mask PNG (0=line); defaults to the morphological fallback.")
@click.option("--json", "as_json", is_flag=True)
def segment(ckpt, image, out, krange, seed, linemask, as_json):
    """Cluster a page by screentone type; writes a color PNG, a label
    raster and a JSON sidecar."""
    from tonelab import rasters, segmenter
    from tonelab.core import fallback_line_mask
    from tonelab.service.app import render_segmentation

    try:
        lo, _, hi = krange.partition(":")
        k_range = (int(lo), int(hi or lo))
    except ValueError:
        raise click.UsageError(f"bad --krange {krange!r}; expected LO:HI")
    if not (1 <= k_range[0] <= k_range[1] <= 10):
        _fail(f"k range must lie within 1..10, got {krange}")

    model = _load_model_or_fail(ckpt)
    pixels = rasters.load_gray_png(image)
    latent, _ = model.encode_padded(pixels, stochastic=False)
    if linemask:
        mask = (rasters.load_gray_png(linemask) >= 0.5).astype(np.float32)
    else:
        bitonal = np.where(pixels < 0.5, 0.0, 1.0).astype(np.float32)
        mask = fallback_line_mask(bitonal)
    try:
        result = segmenter.segment_page(
            latent, mask, k_range=k_range, rng=np.random.default_rng(seed)
        )
    except ContractError as exc:
        _fail(str(exc))
    rgb = render_segmentation(result.labels, mask)
    rasters.save_rgb_png(out, rgb)
    rasters.write_u16(str(out) + ".labels.u16", result.labels)
    sidecar = {
        "k": result.k,
        "silhouette": result.silhouette,
        "seed": seed,
        "k_range": list(k_range),
        "mixture": result.model.to_json(),
        "labels": str(out) + ".labels.u16",
    }
    Path(str(out) + ".json").write_text(json.dumps(sidecar))
    _emit({"segmentation": str(out), "k": result.k, "silhouette": result.silhouette},
          as_json, f"k={result.k} silhouette={result.silhouette} -> {out}")


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--edits", "edits_path", required=True, type=click.Path(exists=True),
              help="JSON list of edits; regions are label refs or mask PNG paths.")
@click.option("--seg", "seg_labels", type=click.Path(exists=True), default=None,
              help="Label raster (.u16) from the segment verb, for label refs.")
@click.option("--out", required=True, type=click.Path())
@click.option("--json", "as_json", is_flag=True)
def rescreen(ckpt, image, edits_path, seg_labels, out, as_json):
    """Apply latent edits to a page and write the re-screened result."""
    from tonelab import rasters, rescreener

    model = _load_model_or_fail(ckpt)
    pixels = rasters.load_gray_png(image)
    latent, _ = model.encode_padded(pixels, stochastic=False)
    labels = rasters.read_u16(seg_labels) if seg_labels else None
    docs = json.loads(Path(edits_path).read_text())
    if not isinstance(docs, list):
        _fail("edits file must hold a JSON list")
    edits = []
    base = Path(edits_path).parent
    for doc in docs:
        region_doc = doc.get("region", {})
        if "label" in region_doc:
            if labels is None:
                _fail("label-referencing edits need --seg")
            region = labels == int(region_doc["label"])
        elif "mask_png" in region_doc:
            mask_path = Path(region_doc["mask_png"])
            if not mask_path.is_absolute():
                mask_path = base / mask_path
            region = rasters.load_gray_png(mask_path) >= 0.5
        else:
            _fail(f"edit region must give label or mask_png: {doc}")
        donor = None
        if doc.get("donor_label") is not None:
            if labels is None:
                _fail("donor_label needs --seg")
            donor = labels == int(doc["donor_label"])
        try:
            edits.append(rescreener.RegionEdit(
                region=region,
                type_action=doc.get("type_action", "keep"),
                type_vector=doc.get("type_vector"),
                donor_region=donor,
                intensity_action=doc.get("intensity_action", "keep"),
                intensity_value=float(doc.get("intensity_value", 0.0)),
            ))
        except ContractError as exc:
            _fail(str(exc))
    edited = rescreener.replay_edits(latent, edits)
    bitonal = np.where(pixels < 0.5, 0.0, 1.0).astype(np.float32)
    from tonelab.core import fallback_line_mask

    line_img = np.where(fallback_line_mask(bitonal) == 0.0, 0.0, 1.0).astype(np.float32)
    result = rescreener.recompose(edited, model, line_img)
    rasters.save_gray_png(out, result)
    _emit({"image": str(out), "edits": len(edits)}, as_json,
          f"applied {len(edits)} edits -> {out}")


@main.command(name="eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--max-pages", type=int, default=None)
@click.option("--json", "as_json", is_flag=True)
def eval_cmd(ckpt, dataset, out, max_pages, as_json):
    """Compute the benchmark metrics over a dataset."""
    from tonelab import evalkit

    model = _load_model_or_fail(ckpt)
    model.model_id = Path(ckpt).name
    try:
        report, table = evalkit.run_benchmark(model, dataset, max_pages=max_pages)
    except (ContractError, FileNotFoundError) as exc:
        _fail(str(exc))
    doc = report.to_json()
    evalkit.validate_report(doc)
    Path(out).write_text(json.dumps(doc, indent=1))
    if as_json:
        click.echo(json.dumps(doc))
    else:
        click.echo(table)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON file mirroring the service configuration.")
@click.option("--ckpt", type=click.Path(exists=True), default=None)
@click.option("--data-dir", default=None)
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.option("--static-dir", type=click.Path(), default=None)
@click.option("--json", "as_json", is_flag=True,
              help="Print the resolved configuration before serving.")
def serve(config_path, ckpt, data_dir, host, port, static_dir, as_json):
    """Start the HTTP service (health endpoint at /healthz).

    Precedence: config file < TONELAB_* environment < explicit flags.
    """
    import dataclasses

    import uvicorn

    from tonelab.service.app import ServiceConfig, create_app

    base = ServiceConfig()
    if config_path:
        base = ServiceConfig(**json.loads(Path(config_path).read_text()))
    config = ServiceConfig.from_env(base)
    overrides = {k: v for k, v in [("checkpoint", ckpt), ("data_dir", data_dir),
                                   ("host", host), ("port", port),
                                   ("static_dir", static_dir)] if v is not None}
    config = dataclasses.replace(config, **overrides)
    if as_json:
        click.echo(json.dumps(dataclasses.asdict(config)))
    uvicorn.run(create_app(config), host=config.host, port=config.port)


if __name__ == "__main__":
    main()
