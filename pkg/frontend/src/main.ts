import { GatewayClient, Layer } from "./api";
import { Studio } from "./state";
import "./style.css";

const LAYERS: Layer[] = ["original", "intensity", "type_pca", "segmentation", "preview"];

const api = new GatewayClient("");
const studio = new Studio(api);

const app = document.getElementById("app")!;
app.innerHTML = `
  <header>
    <h1>tonelab studio</h1>
    <label class="upload-btn">open page<input type="file" id="file" accept="image/png" hidden></label>
    <button id="segment">segment</button>
    <button id="undo">undo</button>
    <span id="status"></span>
  </header>
  <div id="banner" hidden></div>
  <main>
    <aside>
      <section>
        <h2>layers</h2>
        <div id="layers"></div>
      </section>
      <section>
        <h2>region</h2>
        <div id="region-info">click the segmentation to select</div>
      </section>
      <section>
        <h2>intensity</h2>
        <select id="itn-mode">
          <option value="keep">keep</option>
          <option value="set_constant">set constant</option>
          <option value="scale">scale</option>
          <option value="offset">offset</option>
        </select>
        <input type="range" id="itn-value" min="0" max="1" step="0.01" value="0.5">
        <span id="itn-readout">0.50</span>
      </section>
      <section>
        <h2>tone palette</h2>
        <div id="palette"></div>
      </section>
      <button id="submit" class="primary">apply edit</button>
      <section>
        <h2>zoom</h2>
        <button id="zoom-out">-</button>
        <button id="zoom-in">+</button>
        <button id="zoom-fit">fit</button>
      </section>
    </aside>
    <div id="viewport"><canvas id="canvas"></canvas></div>
  </main>
`;

const canvas = document.getElementById("canvas") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const banner = document.getElementById("banner")!;
const status = document.getElementById("status")!;
const layersDiv = document.getElementById("layers")!;
const regionInfo = document.getElementById("region-info")!;
const paletteDiv = document.getElementById("palette")!;
const itnMode = document.getElementById("itn-mode") as HTMLSelectElement;
const itnValue = document.getElementById("itn-value") as HTMLInputElement;
const itnReadout = document.getElementById("itn-readout")!;

for (const layer of LAYERS) {
  const btn = document.createElement("button");
  btn.textContent = layer.replace("_", " ");
  btn.dataset.layer = layer;
  btn.addEventListener("click", () => {
    studio.setLayer(layer);
    void drawLayer();
  });
  layersDiv.appendChild(btn);
}

let bitmap: ImageBitmap | null = null;

async function drawLayer(): Promise<void> {
  if (!studio.state.projectId) return;
  try {
    const bytes = await studio.layerBytes();
    bitmap = await createImageBitmap(new Blob([bytes as BlobPart], { type: "image/png" }));
    render();
  } catch {
    // banner already set by the studio
  }
}

function render(): void {
  const { zoom, panX, panY } = studio.state;
  if (!bitmap) {
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    return;
  }
  canvas.width = Math.max(1, Math.round(bitmap.width * zoom));
  canvas.height = Math.max(1, Math.round(bitmap.height * zoom));
  ctx.imageSmoothingEnabled = zoom < 1;
  ctx.setTransform(zoom, 0, 0, zoom, panX, panY);
  ctx.drawImage(bitmap, 0, 0);
}

function fitZoom(): number {
  const viewport = document.getElementById("viewport")!;
  if (!studio.state.width) return 1;
  return Math.min(
    viewport.clientWidth / studio.state.width,
    viewport.clientHeight / studio.state.height,
    4,
  ) || 1;
}

studio.onChange((state) => {
  banner.hidden = !state.banner;
  banner.textContent = state.banner ?? "";
  status.textContent = state.projectId
    ? `project ${state.projectId} v${state.version} edits:${state.editCount}` +
      (state.busy ? " working..." : "")
    : "no project";
  for (const btn of layersDiv.querySelectorAll("button")) {
    btn.classList.toggle("active", btn.dataset.layer === state.layer);
  }
  const stats = studio.regionStats();
  if (state.selectedRegion !== null && stats) {
    regionInfo.textContent =
      `region ${stats.label}: ${stats.area_px} px, ` +
      `mean intensity ${stats.mean_intensity.toFixed(3)}`;
  } else if (state.selectedRegion !== null) {
    regionInfo.textContent = `region ${state.selectedRegion}`;
  }
});

document.getElementById("file")!.addEventListener("change", async (ev) => {
  const input = ev.target as HTMLInputElement;
  const file = input.files?.[0];
  if (!file) return;
  await studio.uploadAndOpen(file);
  studio.setZoom(fitZoom());
  await drawLayer();
  void studio.loadPalette().then(renderPalette);
});

document.getElementById("segment")!.addEventListener("click", async () => {
  await studio.runSegmentation();
  await drawLayer();
});

document.getElementById("undo")!.addEventListener("click", async () => {
  if (await studio.undo()) {
    studio.setLayer("preview");
    await drawLayer();
  }
});

document.getElementById("submit")!.addEventListener("click", async () => {
  if (await studio.submitDraft()) await drawLayer();
});

canvas.addEventListener("click", (ev) => {
  const rect = canvas.getBoundingClientRect();
  const { zoom, panX, panY } = studio.state;
  const x = (ev.clientX - rect.left - panX) / zoom;
  const y = (ev.clientY - rect.top - panY) / zoom;
  const label = studio.selectRegionAt(x, y);
  if (label !== null) {
    itnMode.value = "keep";
    itnValue.value = "0.5";
  }
});

itnMode.addEventListener("change", () => {
  studio.setDraftIntensity(itnMode.value as never, parseFloat(itnValue.value));
});
itnValue.addEventListener("input", () => {
  itnReadout.textContent = parseFloat(itnValue.value).toFixed(2);
  if (itnMode.value !== "keep") {
    studio.setDraftIntensity(itnMode.value as never, parseFloat(itnValue.value));
  }
});

function renderPalette(): void {
  paletteDiv.innerHTML = "";
  for (const entry of studio.palette) {
    const img = document.createElement("img");
    img.src = api.thumbnailUrl(entry);
    img.title = entry.label;
    img.addEventListener("click", () => {
      studio.pickPaletteVector(entry.vector);
      for (const other of paletteDiv.querySelectorAll("img")) {
        other.classList.toggle("active", other === img);
      }
    });
    paletteDiv.appendChild(img);
  }
}

document.getElementById("zoom-in")!.addEventListener("click", () => {
  studio.setZoom(studio.state.zoom * 1.25);
  render();
});
document.getElementById("zoom-out")!.addEventListener("click", () => {
  studio.setZoom(studio.state.zoom / 1.25);
  render();
});
document.getElementById("zoom-fit")!.addEventListener("click", () => {
  studio.setZoom(fitZoom(), 0, 0);
  render();
});

void api.health().then((h) => {
  if (!h.model_loaded) {
    banner.hidden = false;
    banner.textContent = "gateway has no checkpoint loaded; uploads are disabled";
  }
});
