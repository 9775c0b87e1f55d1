// Framework-free studio state machine. The DOM layer subscribes to state
// changes; tests drive this class directly against a fake or live client.
//
// Invariants: the UI never mutates rasters locally (every displayed layer is
// fetched from the gateway), every mutating call carries the current project
// version, and a stale-version conflict reloads server state instead of
// silently overwriting.

import {
  EditRequest,
  GatewayClient,
  GatewayError,
  LabelGrid,
  Layer,
  PaletteEntryInfo,
  RegionStat,
  SegmentResponse,
  withBackoff,
} from "./api";

export type IntensityMode = "keep" | "set_constant" | "scale" | "offset";

export type EditDraft = {
  intensityMode: IntensityMode;
  intensityValue: number;
  typeVector: number[] | null;
  maskId: string | null;
};

export type ViewState = {
  projectId: string | null;
  version: number;
  width: number;
  height: number;
  layer: Layer;
  selectedRegion: number | null;
  draft: EditDraft | null;
  segmentation: SegmentResponse | null;
  editCount: number;
  banner: string | null;
  busy: boolean;
  zoom: number;
  panX: number;
  panY: number;
  conflictPending: boolean;
};

const EMPTY_DRAFT: EditDraft = {
  intensityMode: "keep",
  intensityValue: 0.5,
  typeVector: null,
  maskId: null,
};

function initialState(): ViewState {
  return {
    projectId: null,
    version: 0,
    width: 0,
    height: 0,
    layer: "original",
    selectedRegion: null,
    draft: null,
    segmentation: null,
    editCount: 0,
    banner: null,
    busy: false,
    zoom: 1,
    panX: 0,
    panY: 0,
    conflictPending: false,
  };
}

export class Studio {
  state: ViewState = initialState();
  palette: PaletteEntryInfo[] = [];
  private layerCache = new Map<Layer, Uint8Array>();
  private labels: LabelGrid | null = null;
  private listeners: Array<(s: ViewState) => void> = [];

  constructor(readonly api: GatewayClient) {}

  onChange(listener: (s: ViewState) => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener(this.state);
  }

  private patch(partial: Partial<ViewState>): void {
    this.state = { ...this.state, ...partial };
    this.emit();
  }

  // -- project lifecycle ----------------------------------------------------

  async uploadAndOpen(png: Uint8Array | Blob): Promise<void> {
    this.patch({ busy: true, banner: null });
    try {
      const info = await this.api.createProject(png);
      this.layerCache.clear();
      this.labels = null;
      this.state = {
        ...initialState(),
        projectId: info.id,
        version: info.version,
        width: info.width,
        height: info.height,
        layer: "original",
        zoom: 1,
      };
      this.emit();
    } catch (err) {
      this.fail(err);
    } finally {
      this.patch({ busy: false });
    }
  }

  async openExisting(id: string): Promise<void> {
    this.patch({ busy: true, banner: null });
    try {
      const info = await this.api.getProject(id);
      this.layerCache.clear();
      this.labels = null;
      this.state = {
        ...initialState(),
        projectId: info.id,
        version: info.version,
        width: info.width,
        height: info.height,
        editCount: info.edit_count,
      };
      if (info.segmented) {
        this.labels = await this.api.segmentationLabels(id);
      }
      this.emit();
    } catch (err) {
      this.fail(err);
    } finally {
      this.patch({ busy: false });
    }
  }

  async loadPalette(): Promise<void> {
    try {
      this.palette = await this.api.palette();
      this.emit();
    } catch {
      this.palette = [];
    }
  }

  // -- layers ----------------------------------------------------------------

  async layerBytes(layer: Layer = this.state.layer): Promise<Uint8Array> {
    const cached = this.layerCache.get(layer);
    if (cached) return cached;
    const id = this.requireProject();
    const bytes = await this.api.layerBytes(id, layer);
    this.layerCache.set(layer, bytes);
    return bytes;
  }

  setLayer(layer: Layer): void {
    this.patch({ layer });
  }

  setZoom(zoom: number, panX = this.state.panX, panY = this.state.panY): void {
    this.patch({ zoom: Math.max(0.1, Math.min(8, zoom)), panX, panY });
  }

  private invalidateDerivedLayers(): void {
    // an accepted edit changes the latent, so every latent-derived raster
    // must be refetched; the original never changes
    for (const layer of ["preview", "intensity", "type_pca"] as Layer[]) {
      this.layerCache.delete(layer);
    }
  }

  // -- segmentation -----------------------------------------------------------

  async runSegmentation(kMin = 1, kMax = 10, seed = 0): Promise<void> {
    const id = this.requireProject();
    this.patch({ busy: true, banner: null });
    try {
      const seg = await this.api.segment(id, kMin, kMax, seed);
      this.labels = await this.api.segmentationLabels(id);
      this.layerCache.delete("segmentation");
      this.patch({
        segmentation: seg,
        version: seg.version,
        layer: "segmentation",
        selectedRegion: null,
      });
    } catch (err) {
      this.fail(err);
    } finally {
      this.patch({ busy: false });
    }
  }

  selectRegionAt(x: number, y: number): number | null {
    if (!this.labels) return null;
    const label = this.labels.labelAt(Math.floor(x), Math.floor(y));
    if (label < 0) return null;
    this.patch({ selectedRegion: label, draft: { ...EMPTY_DRAFT } });
    return label;
  }

  regionStats(label: number | null = this.state.selectedRegion): RegionStat | null {
    if (label === null || !this.state.segmentation) return null;
    return this.state.segmentation.regions.find((r) => r.label === label) ?? null;
  }

  // -- edit drafting ------------------------------------------------------------

  setDraftIntensity(mode: IntensityMode, value: number): void {
    const draft = this.state.draft ?? { ...EMPTY_DRAFT };
    this.patch({ draft: { ...draft, intensityMode: mode, intensityValue: value } });
  }

  pickPaletteVector(vector: number[] | null): void {
    const draft = this.state.draft ?? { ...EMPTY_DRAFT };
    this.patch({ draft: { ...draft, typeVector: vector } });
  }

  setDraftMask(maskId: string): void {
    const draft = this.state.draft ?? { ...EMPTY_DRAFT };
    this.patch({ draft: { ...draft, maskId } });
  }

  draftToRequest(): EditRequest | null {
    const { draft, selectedRegion, version } = this.state;
    if (!draft) return null;
    const region = draft.maskId !== null
      ? { mask_id: draft.maskId }
      : selectedRegion !== null
        ? { label: selectedRegion }
        : null;
    if (!region) return null;
    const request: EditRequest = { version, region };
    if (draft.typeVector) {
      request.type_action = "set_vector";
      request.type_vector = draft.typeVector;
    }
    if (draft.intensityMode !== "keep") {
      request.intensity_action = draft.intensityMode;
      request.intensity_value = draft.intensityValue;
    }
    if (!request.type_action && !request.intensity_action) return null;
    return request;
  }

  async submitDraft(): Promise<boolean> {
    const id = this.requireProject();
    const request = this.draftToRequest();
    if (!request) {
      this.patch({ banner: "draft must change intensity or pick a tone" });
      return false;
    }
    this.patch({ busy: true, banner: null });
    try {
      const res = await this.api.postEdit(id, request);
      this.invalidateDerivedLayers();
      await withBackoff(() => this.layerBytes("preview"));
      this.patch({
        version: res.version,
        editCount: res.edit_count,
        layer: "preview",
        draft: null,
        conflictPending: false,
      });
      return true;
    } catch (err) {
      if (err instanceof GatewayError && err.status === 409) {
        // stale version: reload server state, keep the draft for reapply
        const info = await this.api.getProject(id);
        this.invalidateDerivedLayers();
        this.patch({
          version: info.version,
          editCount: info.edit_count,
          conflictPending: true,
          banner: "project changed elsewhere; state reloaded - submit again to reapply",
        });
        return false;
      }
      this.fail(err);
      return false;
    } finally {
      this.patch({ busy: false });
    }
  }

  async undo(): Promise<boolean> {
    const id = this.requireProject();
    if (this.state.editCount === 0) {
      this.patch({ banner: "nothing to undo" });
      return false;
    }
    this.patch({ busy: true, banner: null });
    try {
      const res = await this.api.undoLast(id, this.state.version);
      this.invalidateDerivedLayers();
      await withBackoff(() => this.layerBytes("preview"));
      this.patch({ version: res.version, editCount: res.edit_count });
      return true;
    } catch (err) {
      if (err instanceof GatewayError && err.status === 409) {
        const info = await this.api.getProject(id);
        this.patch({
          version: info.version,
          editCount: info.edit_count,
          banner: "project changed elsewhere; state reloaded",
        });
        return false;
      }
      this.fail(err);
      return false;
    } finally {
      this.patch({ busy: false });
    }
  }

  // -- helpers -------------------------------------------------------------------

  private requireProject(): string {
    const id = this.state.projectId;
    if (!id) throw new Error("no project open");
    return id;
  }

  private fail(err: unknown): void {
    if (err instanceof GatewayError) {
      this.patch({ banner: err.error.message });
    } else {
      this.patch({ banner: String(err) });
    }
  }
}
