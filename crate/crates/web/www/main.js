import init, { eigen, homogeneous, flow } from "./pkg/grflow_web.js";

const $ = (id) => document.getElementById(id);

function guard(out, f) {
  try {
    f();
  } catch (e) {
    $(out).textContent = "error: " + (e.message ?? e);
  }
}

function heatmap(canvas, n, values) {
  const ctx = canvas.getContext("2d");
  const lo = Math.min(...values), hi = Math.max(...values);
  const cell = canvas.width / n;
  values.forEach((v, p) => {
    const s = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    ctx.fillStyle = `hsl(${240 - 240 * s}, 80%, 50%)`;
    ctx.fillRect(Math.floor(p / n) * cell, (p % n) * cell, cell, cell);
  });
}

// log10 of ricci_linf and H_l2 against t
function plot(canvas, samples) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const series = [["ricci_linf", "#c33"], ["h_l2", "#36c"]];
  const logs = samples.flatMap((s) => series.map(([k]) => Math.log10(Math.max(s[k], 1e-16))));
  const lo = Math.min(...logs), hi = Math.max(...logs, lo + 1);
  const t1 = samples[samples.length - 1].t || 1;
  const x = (t) => 30 + (canvas.width - 40) * (t / t1);
  const y = (v) => 10 + (canvas.height - 30) * (1 - (v - lo) / (hi - lo));
  for (const [k, color] of series) {
    ctx.strokeStyle = color;
    ctx.beginPath();
    samples.forEach((s, i) => {
      const v = Math.log10(Math.max(s[k], 1e-16));
      i ? ctx.lineTo(x(s.t), y(v)) : ctx.moveTo(x(s.t), y(v));
    });
    ctx.stroke();
    ctx.fillStyle = color;
    ctx.fillText(k, canvas.width - 80, k === "h_l2" ? 24 : 12);
  }
  ctx.fillStyle = "#000";
  ctx.fillText(`1e${hi.toFixed(1)}`, 0, 14);
  ctx.fillText(`1e${lo.toFixed(1)}`, 0, canvas.height - 20);
  ctx.fillText(`t = ${t1.toFixed(2)}`, canvas.width - 60, canvas.height - 4);
}

await init();

$("eigen-run").onclick = () => guard("eigen-out", () => {
  const r = JSON.parse(eigen($("eigen-cfg").value));
  heatmap($("eigen-map"), r.n, r.w_slice);
  $("eigen-out").textContent = JSON.stringify(r.report, null, 2);
});

$("hom-run").onclick = () => guard("hom-out", () => {
  $("hom-out").textContent = JSON.stringify(JSON.parse(homogeneous($("hom-cfg").value)), null, 2);
});

$("flow-run").onclick = () => guard("flow-out", () => {
  const r = JSON.parse(flow($("flow-cfg").value));
  plot($("flow-plot"), r.samples);
  const last = r.samples[r.samples.length - 1];
  $("flow-out").textContent = JSON.stringify({ steps: r.steps, stop: r.stop, last }, null, 2);
});
