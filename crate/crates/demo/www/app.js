import init, { DemoSession, affine_flow_rgba, affine_mask_rgba } from "./pkg/crft_demo.js";

let session = null;
let losses = [];

const $ = (id) => document.getElementById(id);

function paint(canvasId, rgba, w, h) {
  const canvas = $(canvasId);
  canvas.width = w;
  canvas.height = h;
  const ctx = canvas.getContext("2d");
  const img = new ImageData(new Uint8ClampedArray(rgba), w, h);
  ctx.putImageData(img, 0, 0);
}

function drawLosses() {
  const canvas = $("losschart");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (losses.length < 2) return;
  const max = Math.max(...losses);
  const min = Math.min(...losses);
  const span = Math.max(max - min, 1e-9);
  ctx.strokeStyle = "#e6c07b";
  ctx.lineWidth = 1.2;
  ctx.beginPath();
  losses.forEach((l, i) => {
    const x = (i / (losses.length - 1)) * (canvas.width - 8) + 4;
    const y = canvas.height - 6 - ((l - min) / span) * (canvas.height - 12);
    i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
  });
  ctx.stroke();
  ctx.fillStyle = "#8b93a1";
  ctx.font = "10px monospace";
  ctx.fillText(max.toFixed(3), 4, 10);
  ctx.fillText(min.toFixed(3), 4, canvas.height - 2);
  ctx.fillText(`${losses.length} steps`, canvas.width - 70, 10);
}

function regenerate() {
  const seed = Number($("seed").value) >>> 0;
  const size = Number($("size").value);
  const preset = $("preset").value;
  session = new DemoSession(seed, size, preset);
  losses = [];
  const w = session.width(), h = session.height();
  paint("imga", session.image_a(), w, h);
  paint("imgb", session.image_b(), w, h);
  paint("gtflow", session.gt_flow(), w, h);
  paint("board0", session.checkerboard(Number($("tile").value), false, true), w, h);
  const info = JSON.parse(session.info());
  $("info").textContent =
    `scale ${info.scale.toFixed(3)} · rotation ${info.rotation_deg.toFixed(1)}° · ` +
    `t (${info.translate[0].toFixed(1)}, ${info.translate[1].toFixed(1)}) px · ` +
    `remap gamma ${info.gamma.toFixed(2)} · model ${info.parameters} parameters`;
  $("aepe").textContent = "AEPE: —";
  drawLosses();
  renderFusion();
}

function renderFusion() {
  if (!session) return;
  const w = session.width(), h = session.height();
  const tile = Number($("tile").value);
  try {
    paint("predflow", session.predicted_flow(), w, h);
    paint("boardpred", session.checkerboard(tile, false, false), w, h);
    paint("boardgt", session.checkerboard(tile, true, false), w, h);
    paint("conf", session.confidence(), w, h);
    $("aepe").textContent = `AEPE: ${session.aepe().toFixed(3)} px`;
  } catch (e) {
    $("status").textContent = String(e);
  }
}

async function trainClicked() {
  if (!session) return;
  const total = Number($("steps").value);
  const btn = $("train");
  btn.disabled = true;
  const chunk = 5;
  let done = 0;
  const tick = () => {
    const k = Math.min(chunk, total - done);
    const newLosses = session.train(k);
    losses.push(...newLosses);
    done += k;
    $("status").textContent = ` step ${losses.length} · loss ${losses[losses.length - 1].toFixed(4)}`;
    drawLosses();
    if (done < total) {
      setTimeout(tick, 0);
    } else {
      renderFusion();
      btn.disabled = false;
    }
  };
  tick();
}

function explorer() {
  const size = 48;
  const scale = Number($("xscale").value);
  const rot = Number($("xrot").value);
  const tx = Number($("xtx").value);
  const ty = Number($("xty").value);
  $("xscale_v").textContent = scale.toFixed(2);
  $("xrot_v").textContent = `${rot}°`;
  $("xtx_v").textContent = tx;
  $("xty_v").textContent = ty;
  paint("xflow", affine_flow_rgba(size, scale, rot, tx, ty), size, size);
  paint("xmask", affine_mask_rgba(size, scale, rot, tx, ty), size, size);
}

init().then(() => {
  $("gen").addEventListener("click", regenerate);
  $("train").addEventListener("click", trainClicked);
  $("reset").addEventListener("click", regenerate);
  $("fuse").addEventListener("click", renderFusion);
  for (const id of ["xscale", "xrot", "xtx", "xty"]) {
    $(id).addEventListener("input", explorer);
  }
  regenerate();
  explorer();
});
