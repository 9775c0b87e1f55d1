"""HTTP service: encode/segment/edit/decode plus project persistence.

Raster bodies are raw binary (PNG or the documented latent container);
JSON is metadata only. Mutating routes carry the client's project version
and fail with 409 on a stale write. A service started without a checkpoint
serves health and static assets but answers model-dependent routes with
model_unready.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from tonelab import rasters, rescreener, segmenter
from tonelab.core import ContractError, LatentMap, fallback_line_mask
from tonelab.network import ScreenModel, load_model
from tonelab.service import schemas
from tonelab.service.store import ProjectStore, StaleVersionError

# 10 region colors + black for lines, used by segmentation PNGs
PALETTE_COLORS = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207),
]

_ERROR_STATUS = {
    "bad_input": 400,
    "not_found": 404,
    "conflict": 409,
    "model_unready": 503,
    "internal": 500,
}


class ApiException(Exception):
    def __init__(self, code: str, message: str, detail: str | None = None):
        self.code = code
        self.message = message
        self.detail = detail
        super().__init__(message)


@dataclass
class ServiceConfig:
    data_dir: str = "tonelab-data"
    checkpoint: str | None = None
    host: str = "127.0.0.1"
    port: int = 8040
    max_upload_bytes: int = 32 * 1024 * 1024
    palette_size: int = 12
    static_dir: str | None = None
    seed: int = 0

    @staticmethod
    def from_env(base: "ServiceConfig | None" = None) -> "ServiceConfig":
        cfg = base or ServiceConfig()
        env = os.environ
        updates = {}
        if env.get("TONELAB_DATA_DIR"):
            updates["data_dir"] = env["TONELAB_DATA_DIR"]
        if env.get("TONELAB_CKPT"):
            updates["checkpoint"] = env["TONELAB_CKPT"]
        if env.get("TONELAB_HOST"):
            updates["host"] = env["TONELAB_HOST"]
        if env.get("TONELAB_PORT"):
            updates["port"] = int(env["TONELAB_PORT"])
        if env.get("TONELAB_MAX_UPLOAD_MB"):
            updates["max_upload_bytes"] = int(env["TONELAB_MAX_UPLOAD_MB"]) * 1024 * 1024
        if env.get("TONELAB_STATIC_DIR"):
            updates["static_dir"] = env["TONELAB_STATIC_DIR"]
        return dataclasses.replace(cfg, **updates)


class Workbench:
    """Owns the model snapshot and the project store; all route handlers
    delegate here."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.store = ProjectStore(config.data_dir)
        self.model: ScreenModel | None = None
        if config.checkpoint:
            model, header, _ = load_model(config.checkpoint)
            self.model = model
            self.model_id = f"{Path(config.checkpoint).name}@step{header.get('step', 0)}"
        self.palette: list[rescreener.PaletteEntry] = []
        self._thumbnails: dict[int, bytes] = {}
        if self.model is not None:
            self.palette = rescreener.sample_type_palette(
                self.model, config.palette_size, np.random.default_rng(config.seed)
            )

    # -- helpers -----------------------------------------------------------

    def require_model(self) -> ScreenModel:
        if self.model is None:
            raise ApiException("model_unready", "no checkpoint loaded")
        return self.model

    def get_meta(self, project_id: str) -> dict:
        meta = self.store.load(project_id)
        if meta is None:
            raise ApiException("not_found", f"project {project_id} not found")
        return meta

    def _latent(self, meta: dict, which: str = "current") -> LatentMap:
        key = "latent_blob" if which == "original" else "current_latent_blob"
        return rasters.unpack_latent(self.store.get_blob(meta[key]))

    def _line_image(self, meta: dict) -> np.ndarray:
        return rasters.decode_gray_png(self.store.get_blob(meta["line_blob"]))

    def _edits(self, meta: dict) -> list[rescreener.RegionEdit]:
        return [self._edit_from_json(meta, e) for e in meta["edits"]]

    def _edit_from_json(self, meta: dict, doc: dict) -> rescreener.RegionEdit:
        region = self._region_mask(meta, schemas.RegionRef(**doc["region"]))
        donor = None
        if doc.get("donor_label") is not None:
            donor = self._region_mask(
                meta, schemas.RegionRef(label=doc["donor_label"])
            )
        return rescreener.RegionEdit(
            region=region,
            type_action=doc["type_action"],
            type_vector=np.asarray(doc["type_vector"], dtype=np.float32)
            if doc.get("type_vector") is not None else None,
            donor_region=donor,
            intensity_action=doc["intensity_action"],
            intensity_value=float(doc.get("intensity_value", 0.0)),
        )

    def _region_mask(self, meta: dict, ref: schemas.RegionRef) -> np.ndarray:
        if ref.mask_id is not None:
            blob_id = meta["masks"].get(ref.mask_id)
            if blob_id is None:
                raise ApiException("not_found", f"mask {ref.mask_id} not found")
            mask = rasters.decode_gray_png(self.store.get_blob(blob_id))
            return mask >= 0.5
        if ref.label is None:
            raise ApiException("bad_input", "edit region needs a label or mask_id")
        seg = meta.get("segmentation")
        if seg is None:
            raise ApiException(
                "bad_input", "label-based edits need a segmentation; run segment first"
            )
        labels = self._seg_labels(meta)
        mask = labels == ref.label
        if not mask.any():
            raise ApiException("bad_input", f"segmentation has no region {ref.label}")
        return mask

    def _seg_labels(self, meta: dict) -> np.ndarray:
        seg = meta["segmentation"]
        raw = self.store.get_blob(seg["labels_blob"])
        newline = raw.find(b"\n")
        header = json.loads(raw[:newline])
        return (
            np.frombuffer(raw[newline + 1 :], dtype="<u2")
            .reshape(header["shape"])
            .astype(np.int32)
        )

    def _pack_labels(self, labels: np.ndarray) -> bytes:
        header = json.dumps({"shape": list(labels.shape), "dtype": "u16le"})
        return header.encode() + b"\n" + labels.astype("<u2").tobytes()

    def _render_preview(self, meta: dict, latent: LatentMap) -> bytes:
        model = self.require_model()
        line_img = self._line_image(meta)
        preview = rescreener.recompose(latent, model, line_img)
        return rasters.encode_gray_png(preview)

    def _composite_step(self, meta: dict, prev_png: bytes, latent: LatentMap,
                        region: np.ndarray) -> bytes:
        """Preview after one edit: the new decode inside the edited region,
        the previous preview elsewhere. Confines every edit's visible effect
        to its region (a plain re-decode would bleed by the decoder's
        receptive field)."""
        model = self.require_model()
        line_img = self._line_image(meta)
        decoded = rescreener.recompose(latent, model, line_img)
        previous = rasters.decode_gray_png(prev_png)
        return rasters.encode_gray_png(np.where(region, decoded, previous))

    def _preview_chain(self, meta: dict,
                       edits: list[rescreener.RegionEdit]) -> tuple[bytes, LatentMap]:
        """Fold the edit history from the original latent; the live edit path
        performs exactly the last step of this fold, so replay is bit-exact."""
        latent = self._latent(meta, "original")
        png = self._render_preview(meta, latent)
        for edit in edits:
            latent = rescreener.apply_edit(latent, edit)
            png = self._composite_step(meta, png, latent, edit.region)
        return png, latent

    def _region_stats(self, preview_png: bytes, region: np.ndarray,
                      line_mask: np.ndarray) -> tuple[float, list[float]]:
        model = self.require_model()
        image = rasters.decode_gray_png(preview_png)
        latent, _ = model.encode_padded(image, stochastic=False)
        sel = region & (line_mask >= 0.5)
        if not sel.any():
            sel = region
        mean_itn = float(latent.intensity[sel].mean())
        mean_type = latent.type_feature[:, sel].mean(axis=1)
        return mean_itn, [float(v) for v in mean_type]

    def project_info(self, meta: dict) -> schemas.ProjectInfo:
        seg = meta.get("segmentation")
        return schemas.ProjectInfo(
            id=meta["id"],
            version=meta["version"],
            width=meta["width"],
            height=meta["height"],
            latent_shape=[4, meta["height"], meta["width"]],
            created_at=meta["created_at"],
            edit_count=len(meta["edits"]),
            segmented=seg is not None,
            k=seg["k"] if seg else None,
        )

    # -- operations ----------------------------------------------------------

    def upload(self, png_bytes: bytes) -> dict:
        model = self.require_model()
        try:
            image = rasters.decode_gray_png(png_bytes)
        except Exception as exc:
            raise ApiException("bad_input", "payload is not a decodable PNG",
                               str(exc)) from exc
        latent, _ = model.encode_padded(image, stochastic=False)
        bitonal = np.where(image < 0.5, 0.0, 1.0).astype(np.float32)
        line_mask = fallback_line_mask(bitonal)
        line_img = np.where(line_mask == 0.0, 0.0, 1.0).astype(np.float32)
        latent_blob = self.store.put_blob(rasters.pack_latent(latent))
        meta = self.store.create({
            "width": image.shape[1],
            "height": image.shape[0],
            "image_blob": self.store.put_blob(png_bytes),
            "latent_blob": latent_blob,
            "current_latent_blob": latent_blob,
            "line_blob": self.store.put_blob(rasters.encode_gray_png(line_img)),
            "preview_blob": None,
        })
        meta["preview_blob"] = self.store.put_blob(self._render_preview(meta, latent))
        self.store.save(meta)
        return meta

    def segment(self, project_id: str, req: schemas.SegmentRequest) -> schemas.SegmentResponse:
        self.require_model()
        if not (1 <= req.k_min <= req.k_max <= 10):
            raise ApiException("bad_input",
                               f"k range must lie within 1..10, got {req.k_min}..{req.k_max}")
        with self.store.lock(project_id):
            meta = self.get_meta(project_id)
            latent = self._latent(meta)
            line_img = self._line_image(meta)
            result = segmenter.segment_page(
                latent, (line_img >= 0.5).astype(np.float32),
                k_range=(req.k_min, req.k_max),
                rng=np.random.default_rng(req.seed),
            )
            labels_blob = self.store.put_blob(self._pack_labels(result.labels))
            meta["segmentation"] = {
                "k": result.k,
                "silhouette": result.silhouette,
                "labels_blob": labels_blob,
                "seed": req.seed,
                "k_range": [req.k_min, req.k_max],
                "mixture": result.model.to_json(),
            }
            meta["version"] += 1
            self.store.save(meta)
            regions = self._region_list(meta, result.labels, latent, line_img)
            return schemas.SegmentResponse(
                k=result.k, silhouette=result.silhouette, regions=regions,
                version=meta["version"],
            )

    def _region_list(self, meta, labels, latent, line_img) -> list[schemas.RegionStat]:
        tone = line_img >= 0.5
        out = []
        for lab in np.unique(labels):
            sel = (labels == lab) & tone
            if not sel.any():
                sel = labels == lab
            out.append(schemas.RegionStat(
                label=int(lab),
                area_px=int((labels == lab).sum()),
                mean_intensity=float(latent.intensity[sel].mean()),
                mean_type=[float(v) for v in latent.type_feature[:, sel].mean(axis=1)],
            ))
        return out

    def add_mask(self, project_id: str, png_bytes: bytes) -> str:
        with self.store.lock(project_id):
            meta = self.get_meta(project_id)
            try:
                mask = rasters.decode_gray_png(png_bytes)
            except Exception as exc:
                raise ApiException("bad_input", "mask is not a decodable PNG") from exc
            if mask.shape != (meta["height"], meta["width"]):
                raise ApiException("bad_input", "mask dimensions do not match project")
            mask_id = f"m{len(meta['masks'])}"
            meta["masks"][mask_id] = self.store.put_blob(png_bytes)
            self.store.save(meta)
            return mask_id

    def apply_edit(self, project_id: str, req: schemas.EditRequest) -> schemas.EditResponse:
        self.require_model()
        if req.type_action == "keep" and req.intensity_action == "keep":
            raise ApiException("bad_input", "edit must change type or intensity")
        with self.store.lock(project_id):
            meta = self.get_meta(project_id)
            try:
                meta = self.store.bump_version(meta, req.version)
            except StaleVersionError as exc:
                raise ApiException("conflict", str(exc)) from exc
            doc = {
                "region": req.region.model_dump(),
                "type_action": req.type_action,
                "type_vector": req.type_vector,
                "donor_label": req.donor_label,
                "intensity_action": req.intensity_action,
                "intensity_value": req.intensity_value,
            }
            try:
                edit = self._edit_from_json(meta, doc)
                latent = rescreener.apply_edit(self._latent(meta), edit)
            except ContractError as exc:
                raise ApiException("bad_input", str(exc)) from exc
            preview_png = self._composite_step(
                meta, self.store.get_blob(meta["preview_blob"]), latent, edit.region
            )
            meta["edits"].append(doc)
            meta["current_latent_blob"] = self.store.put_blob(rasters.pack_latent(latent))
            meta["preview_blob"] = self.store.put_blob(preview_png)
            self.store.save(meta)
            line_img = self._line_image(meta)
            mean_itn, mean_type = self._region_stats(
                preview_png, edit.region, line_img
            )
            return schemas.EditResponse(
                version=meta["version"],
                edit_count=len(meta["edits"]),
                preview_url=f"/projects/{project_id}/preview",
                region_mean_intensity=mean_itn,
                region_type_vector=mean_type,
            )

    def undo(self, project_id: str, version: int) -> schemas.UndoResponse:
        self.require_model()
        with self.store.lock(project_id):
            meta = self.get_meta(project_id)
            try:
                meta = self.store.bump_version(meta, version)
            except StaleVersionError as exc:
                raise ApiException("conflict", str(exc)) from exc
            if not meta["edits"]:
                raise ApiException("bad_input", "no edits to undo")
            meta["edits"].pop()
            png, latent = self._preview_chain(meta, self._edits(meta))
            meta["current_latent_blob"] = self.store.put_blob(rasters.pack_latent(latent))
            meta["preview_blob"] = self.store.put_blob(png)
            self.store.save(meta)
            return schemas.UndoResponse(
                version=meta["version"],
                edit_count=len(meta["edits"]),
                preview_url=f"/projects/{project_id}/preview",
            )

    def replay_preview(self, project_id: str) -> bytes:
        """Recompute the preview from the original latent and the full edit
        history; must equal the stored preview byte for byte."""
        meta = self.get_meta(project_id)
        png, _ = self._preview_chain(meta, self._edits(meta))
        return png

    def layer_png(self, project_id: str, name: str) -> bytes:
        meta = self.get_meta(project_id)
        if name == "original":
            return self.store.get_blob(meta["image_blob"])
        if name == "preview":
            return self.store.get_blob(meta["preview_blob"])
        latent = self._latent(meta)
        if name == "intensity":
            return rasters.encode_gray_png(latent.intensity)
        if name == "type_pca":
            line_img = self._line_image(meta)
            rgb = segmenter.pca_visualize(
                latent.type_feature, (line_img >= 0.5).astype(np.float32)
            )
            return _encode_rgb_png(rgb)
        if name == "segmentation":
            if meta.get("segmentation") is None:
                raise ApiException("bad_input", "project has no segmentation yet")
            labels = self._seg_labels(meta)
            line_img = self._line_image(meta)
            return _encode_rgb_png(render_segmentation(labels, line_img))
        raise ApiException("not_found", f"unknown layer {name}")

    def thumbnail(self, index: int) -> bytes:
        if not (0 <= index < len(self.palette)):
            raise ApiException("not_found", f"no palette entry {index}")
        if index not in self._thumbnails:
            model = self.require_model()
            vec = self.palette[index].vector
            size = 64
            latent = LatentMap(
                intensity=np.full((size, size), 0.5, np.float32),
                type_feature=np.broadcast_to(
                    vec[:, None, None], (3, size, size)
                ).astype(np.float32).copy(),
            )
            self._thumbnails[index] = rasters.encode_gray_png(model.decode(latent))
        return self._thumbnails[index]


def render_segmentation(labels: np.ndarray, line_img: np.ndarray) -> np.ndarray:
    rgb = np.zeros((*labels.shape, 3), dtype=np.float32)
    for lab in np.unique(labels):
        color = PALETTE_COLORS[int(lab) % len(PALETTE_COLORS)]
        rgb[labels == lab] = np.array(color, dtype=np.float32) / 255.0
    rgb[line_img < 0.5] = 0.0
    return rgb


def _encode_rgb_png(rgb: np.ndarray) -> bytes:
    import io

    from PIL import Image

    buf = io.BytesIO()
    arr = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig.from_env()
    bench = Workbench(config)
    app = FastAPI(title="tonelab", version="0.1.0")
    app.state.workbench = bench

    @app.exception_handler(ApiException)
    async def api_error(_req: Request, exc: ApiException):
        status = _ERROR_STATUS.get(exc.code, 500)
        return JSONResponse(
            status_code=status,
            content=schemas.ApiError(
                code=exc.code, message=exc.message, detail=exc.detail
            ).model_dump(),
        )

    @app.exception_handler(RequestValidationError)
    async def validation_error(_req: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content=schemas.ApiError(
                code="bad_input", message="invalid request", detail=str(exc.errors())
            ).model_dump(),
        )

    @app.exception_handler(Exception)
    async def internal_error(_req: Request, exc: Exception):
        return JSONResponse(
            status_code=500,
            content=schemas.ApiError(code="internal", message=str(exc)).model_dump(),
        )

    @app.get("/healthz", response_model=schemas.HealthResponse)
    def healthz():
        return schemas.HealthResponse(status="ok", model_loaded=bench.model is not None)

    @app.get("/projects", response_model=schemas.ProjectList)
    def list_projects():
        infos = [bench.project_info(bench.get_meta(pid)) for pid in bench.store.list_ids()]
        return schemas.ProjectList(projects=infos)

    @app.post("/projects", response_model=schemas.ProjectInfo, status_code=201)
    async def create_project(request: Request):
        body = await request.body()
        if len(body) > config.max_upload_bytes:
            raise ApiException("bad_input",
                               f"payload exceeds {config.max_upload_bytes} bytes")
        meta = bench.upload(body)
        return bench.project_info(meta)

    @app.get("/projects/{project_id}", response_model=schemas.ProjectInfo)
    def get_project(project_id: str):
        return bench.project_info(bench.get_meta(project_id))

    @app.post("/projects/{project_id}/segment", response_model=schemas.SegmentResponse)
    def segment(project_id: str, req: schemas.SegmentRequest):
        return bench.segment(project_id, req)

    @app.post("/projects/{project_id}/masks", response_model=schemas.MaskResponse)
    async def add_mask(project_id: str, request: Request):
        body = await request.body()
        return schemas.MaskResponse(mask_id=bench.add_mask(project_id, body))

    @app.post("/projects/{project_id}/edits", response_model=schemas.EditResponse)
    def post_edit(project_id: str, req: schemas.EditRequest):
        return bench.apply_edit(project_id, req)

    @app.delete("/projects/{project_id}/edits/last", response_model=schemas.UndoResponse)
    def undo_edit(project_id: str, version: int):
        return bench.undo(project_id, version)

    @app.get("/projects/{project_id}/preview")
    def preview(project_id: str, recompute: bool = False):
        if recompute:
            data = bench.replay_preview(project_id)
        else:
            meta = bench.get_meta(project_id)
            data = bench.store.get_blob(meta["preview_blob"])
        return Response(content=data, media_type="image/png")

    @app.get("/projects/{project_id}/latent")
    def latent(project_id: str):
        meta = bench.get_meta(project_id)
        return Response(
            content=bench.store.get_blob(meta["current_latent_blob"]),
            media_type="application/octet-stream",
        )

    @app.get("/projects/{project_id}/segmentation/labels")
    def segmentation_labels(project_id: str):
        meta = bench.get_meta(project_id)
        if meta.get("segmentation") is None:
            raise ApiException("bad_input", "project has no segmentation yet")
        return Response(
            content=bench.store.get_blob(meta["segmentation"]["labels_blob"]),
            media_type="application/octet-stream",
        )

    @app.get("/projects/{project_id}/layers/{name}")
    def layer(project_id: str, name: str):
        return Response(content=bench.layer_png(project_id, name), media_type="image/png")

    @app.get("/palette", response_model=list[schemas.PaletteEntryInfo])
    def palette():
        return [
            schemas.PaletteEntryInfo(
                index=i, label=entry.label,
                vector=[float(v) for v in entry.vector],
                thumbnail_url=f"/palette/{i}/thumbnail",
            )
            for i, entry in enumerate(bench.palette)
        ]

    @app.get("/palette/{index}/thumbnail")
    def palette_thumbnail(index: int):
        return Response(content=bench.thumbnail(index), media_type="image/png")

    static_dir = config.static_dir
    if static_dir is None:
        default_static = Path(__file__).resolve().parents[3] / "frontend" / "dist"
        if default_static.exists():
            static_dir = str(default_static)
    if static_dir and Path(static_dir).exists():
        app.mount("/app", StaticFiles(directory=static_dir, html=True), name="studio")

    return app
