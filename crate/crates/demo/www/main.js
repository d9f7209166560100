import init, { wasm_mask_bank, wasm_lr_curve, wasm_score_heatmap } from "./pkg/nptad_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function showError(el, e) {
  el.textContent = String(e.message ?? e);
  el.className = "err";
}

function bank() {
  try {
    const v = JSON.parse(wasm_mask_bank(num("bank-d"), num("bank-r")));
    $("bank-m").className = "";
    $("bank-m").textContent = `m = ${v.m}` + (v.masks.length ? "" : " (too many to list)");
    $("masks").textContent = v.masks.join("\n");
  } catch (e) {
    showError($("bank-m"), e);
    $("masks").textContent = "";
  }
}

function lr() {
  const c = $("lr-plot");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  let ys;
  try {
    ys = wasm_lr_curve(num("lr-total"), num("lr-base"));
  } catch (e) {
    g.fillStyle = "#b00";
    g.fillText(String(e.message ?? e), 10, 20);
    return;
  }
  const top = Math.max(...ys) || 1;
  g.strokeStyle = "#2a6";
  g.beginPath();
  ys.forEach((y, i) => {
    const x = (i / Math.max(ys.length - 1, 1)) * (c.width - 20) + 10;
    const py = c.height - 10 - (y / top) * (c.height - 20);
    i ? g.lineTo(x, py) : g.moveTo(x, py);
  });
  g.stroke();
}

// white to dark red
function colour(t) {
  const v = Math.round(255 * (1 - t));
  return `rgb(255,${v},${Math.round(v * 0.8)})`;
}

function heatmap() {
  const status = $("hm-status");
  status.className = "";
  status.textContent = "scoring...";
  const req = {
    method: $("hm-method").value,
    normals: num("hm-n"),
    contamination: num("hm-c"),
    k: num("hm-k"),
    epochs: num("hm-epochs"),
    grid: 40,
    seed: num("hm-seed"),
  };
  // let the status paint before the blocking call
  setTimeout(() => {
    const t0 = performance.now();
    let h;
    try {
      h = JSON.parse(wasm_score_heatmap(JSON.stringify(req)));
    } catch (e) {
      showError(status, e);
      return;
    }
    const c = $("hm-plot");
    const g = c.getContext("2d");
    const [x0, x1, y0, y1] = h.extent;
    const lo = Math.min(...h.scores);
    const hi = Math.max(...h.scores);
    const cell = c.width / h.grid;
    h.scores.forEach((s, i) => {
      g.fillStyle = colour(hi > lo ? (s - lo) / (hi - lo) : 0);
      const col = i % h.grid;
      const row = Math.floor(i / h.grid);
      g.fillRect(col * cell, c.height - (row + 1) * cell, cell + 1, cell + 1);
    });
    h.points.forEach(([x, y], i) => {
      g.fillStyle = h.point_labels[i] ? "#06c" : "#000";
      const px = ((x - x0) / (x1 - x0)) * c.width;
      const py = c.height - ((y - y0) / (y1 - y0)) * c.height;
      g.fillRect(px - 1.5, py - 1.5, 3, 3);
    });
    status.textContent = `${req.method}: scores ${lo.toFixed(3)} to ${hi.toFixed(3)}, ${Math.round(performance.now() - t0)} ms`;
  }, 10);
}

await init();
$("bank-go").onclick = bank;
$("lr-go").onclick = lr;
$("hm-go").onclick = heatmap;
bank();
lr();
heatmap();
