// Typed client for the tonelab gateway. All mutating calls carry the
// project version; a stale write surfaces as GatewayError with status 409.

export type ApiError = {
  code: string;
  message: string;
  detail?: string | null;
};

export class GatewayError extends Error {
  constructor(readonly status: number, readonly error: ApiError) {
    super(`${error.code}: ${error.message}`);
  }
}

export type ProjectInfo = {
  id: string;
  version: number;
  width: number;
  height: number;
  latent_shape: number[];
  created_at: string;
  edit_count: number;
  segmented: boolean;
  k: number | null;
};

export type RegionStat = {
  label: number;
  area_px: number;
  mean_intensity: number;
  mean_type: number[];
};

export type SegmentResponse = {
  k: number;
  silhouette: number | null;
  regions: RegionStat[];
  version: number;
};

export type EditRequest = {
  version: number;
  region: { label?: number; mask_id?: string };
  type_action?: string;
  type_vector?: number[] | null;
  donor_label?: number | null;
  intensity_action?: string;
  intensity_value?: number;
};

export type EditResponse = {
  version: number;
  edit_count: number;
  preview_url: string;
  region_mean_intensity: number;
  region_type_vector: number[];
};

export type UndoResponse = {
  version: number;
  edit_count: number;
  preview_url: string;
};

export type PaletteEntryInfo = {
  index: number;
  label: string;
  vector: number[];
  thumbnail_url: string;
};

export type LabelGrid = {
  width: number;
  height: number;
  labelAt(x: number, y: number): number;
};

export type Layer = "original" | "intensity" | "type_pca" | "segmentation" | "preview";

async function parseError(res: Response): Promise<GatewayError> {
  let body: ApiError;
  try {
    body = (await res.json()) as ApiError;
  } catch {
    body = { code: "internal", message: `HTTP ${res.status}` };
  }
  return new GatewayError(res.status, body);
}

export class GatewayClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchFn: typeof fetch = (...args) => fetch(...args),
  ) {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(this.base + path, init);
    if (!res.ok) throw await parseError(res);
    return (await res.json()) as T;
  }

  private async bytes(path: string): Promise<Uint8Array> {
    const res = await this.fetchFn(this.base + path);
    if (!res.ok) throw await parseError(res);
    return new Uint8Array(await res.arrayBuffer());
  }

  health(): Promise<{ status: string; model_loaded: boolean }> {
    return this.json("/healthz");
  }

  createProject(png: Uint8Array | Blob): Promise<ProjectInfo> {
    return this.json("/projects", {
      method: "POST",
      headers: { "Content-Type": "image/png" },
      body: png as BodyInit,
    });
  }

  getProject(id: string): Promise<ProjectInfo> {
    return this.json(`/projects/${id}`);
  }

  segment(id: string, kMin = 1, kMax = 10, seed = 0): Promise<SegmentResponse> {
    return this.json(`/projects/${id}/segment`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ k_min: kMin, k_max: kMax, seed }),
    });
  }

  addMask(id: string, png: Uint8Array | Blob): Promise<{ mask_id: string }> {
    return this.json(`/projects/${id}/masks`, {
      method: "POST",
      headers: { "Content-Type": "image/png" },
      body: png as BodyInit,
    });
  }

  postEdit(id: string, edit: EditRequest): Promise<EditResponse> {
    return this.json(`/projects/${id}/edits`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(edit),
    });
  }

  undoLast(id: string, version: number): Promise<UndoResponse> {
    return this.json(`/projects/${id}/edits/last?version=${version}`, {
      method: "DELETE",
    });
  }

  previewBytes(id: string): Promise<Uint8Array> {
    return this.bytes(`/projects/${id}/preview`);
  }

  layerBytes(id: string, layer: Layer): Promise<Uint8Array> {
    return this.bytes(`/projects/${id}/layers/${layer}`);
  }

  latentBytes(id: string): Promise<Uint8Array> {
    return this.bytes(`/projects/${id}/latent`);
  }

  palette(): Promise<PaletteEntryInfo[]> {
    return this.json("/palette");
  }

  thumbnailUrl(entry: PaletteEntryInfo): string {
    return this.base + entry.thumbnail_url;
  }

  async segmentationLabels(id: string): Promise<LabelGrid> {
    const raw = await this.bytes(`/projects/${id}/segmentation/labels`);
    return decodeLabelContainer(raw);
  }
}

// The label container is one JSON header line followed by raw u16le values.
export function decodeLabelContainer(raw: Uint8Array): LabelGrid {
  const newline = raw.indexOf(0x0a);
  if (newline < 0) throw new Error("label container missing header");
  const header = JSON.parse(new TextDecoder().decode(raw.subarray(0, newline))) as {
    shape: [number, number];
    dtype: string;
  };
  if (header.dtype !== "u16le") throw new Error(`unexpected dtype ${header.dtype}`);
  const [height, width] = header.shape;
  const body = raw.subarray(newline + 1);
  if (body.byteLength !== width * height * 2) {
    throw new Error("label payload does not match header shape");
  }
  const values = new Uint16Array(body.buffer, body.byteOffset, width * height);
  return {
    width,
    height,
    labelAt(x: number, y: number): number {
      if (x < 0 || y < 0 || x >= width || y >= height) return -1;
      return values[y * width + x];
    },
  };
}

// Retry helper for preview refreshes: exponential backoff capped at 2 s.
export async function withBackoff<T>(
  run: () => Promise<T>,
  attempts = 5,
  baseDelayMs = 100,
  sleep: (ms: number) => Promise<void> = (ms) => new Promise((r) => setTimeout(r, ms)),
): Promise<T> {
  let delay = baseDelayMs;
  for (let attempt = 0; ; attempt += 1) {
    try {
      return await run();
    } catch (err) {
      if (attempt >= attempts - 1) throw err;
      await sleep(delay);
      delay = Math.min(delay * 2, 2000);
    }
  }
}
