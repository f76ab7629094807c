import init, { clip_curve, loss_scale, daro_trajectory } from "./pkg/daro_web.js";

const COLOURS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const SVG_NS = "http://www.w3.org/2000/svg";

function el(id) {
  return document.getElementById(id);
}

function num(id) {
  return parseFloat(el(id).value);
}

function svgNode(tag, attrs, text) {
  const node = document.createElementNS(SVG_NS, tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text !== undefined) node.textContent = text;
  return node;
}

// Draws `series` ([{name, xs, ys}]) into an <svg>, with `logY` on request.
function plot(svg, series, logY) {
  svg.replaceChildren();
  const w = +svg.getAttribute("width");
  const h = +svg.getAttribute("height");
  const pad = { l: 50, r: 110, t: 10, b: 25 };
  const ty = logY ? Math.log10 : (y) => y;
  const xs = series.flatMap((s) => s.xs);
  const ys = series.flatMap((s) => s.ys.map(ty)).filter(Number.isFinite);
  let [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  let [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  if (y1 - y0 < 1e-9) { y0 -= 1; y1 += 1; }
  const sx = (x) => pad.l + ((x - x0) / (x1 - x0)) * (w - pad.l - pad.r);
  const sy = (y) => h - pad.b - ((ty(y) - y0) / (y1 - y0)) * (h - pad.t - pad.b);

  svg.append(svgNode("rect", { x: pad.l, y: pad.t, width: w - pad.l - pad.r, height: h - pad.t - pad.b, fill: "none", stroke: "#999" }));
  for (let i = 0; i <= 4; i++) {
    const yv = y0 + ((y1 - y0) * i) / 4;
    const label = logY ? (10 ** yv).toPrecision(2) : yv.toFixed(2);
    const y = h - pad.b - ((yv - y0) / (y1 - y0)) * (h - pad.t - pad.b);
    svg.append(svgNode("text", { x: pad.l - 4, y: y + 4, "text-anchor": "end", "font-size": 10 }, label));
    const xv = x0 + ((x1 - x0) * i) / 4;
    svg.append(svgNode("text", { x: sx(xv), y: h - 8, "text-anchor": "middle", "font-size": 10 }, +xv.toFixed(2)));
  }
  series.forEach((s, i) => {
    const colour = COLOURS[i % COLOURS.length];
    const d = s.xs.map((x, j) => `${j ? "L" : "M"}${sx(x).toFixed(1)},${sy(s.ys[j]).toFixed(1)}`).join(" ");
    svg.append(svgNode("path", { d, fill: "none", stroke: colour, "stroke-width": 1.8 }));
    svg.append(svgNode("text", { x: w - pad.r + 8, y: pad.t + 12 + 14 * i, fill: colour, "font-size": 11 }, s.name));
  });
}

function guarded(errorId, draw) {
  return () => {
    try {
      el(errorId).textContent = "";
      draw();
    } catch (e) {
      el(errorId).textContent = e.message ?? String(e);
    }
  };
}

const drawClip = guarded("clip-error", () => {
  const n = 201;
  const ys = Array.from(clip_curve(num("clip-a"), num("clip-lo"), num("clip-hi"), el("clip-bounded").checked, 0, 2, n));
  const xs = ys.map((_, i) => (2 * i) / (n - 1));
  plot(el("clip-plot"), [{ name: "f(A, r)", xs, ys }, { name: "r A", xs, ys: xs.map((r) => r * num("clip-a")) }], false);
});

const drawLossScale = guarded("ls-error", () => {
  const k = num("ls-k");
  const rows = loss_scale(k, num("ls-pos"), num("ls-neg"), el("ls-scheme").value);
  const head = "<tr><th>mu</th><th>L_mu</th><th>weight</th><th>weighted loss</th><th>length approx</th></tr>";
  let body = "";
  for (let i = 0; i < rows.length; i += 5) {
    const cells = [`${Math.round(rows[i] * k)}/${k}`, ...Array.from(rows.slice(i + 1, i + 5), (v) => v.toPrecision(4))];
    body += `<tr>${cells.map((c) => `<td>${c}</td>`).join("")}</tr>`;
  }
  el("ls-table").innerHTML = head + body;
});

const drawWeights = guarded("dw-error", () => {
  const losses = el("dw-losses").value.split(",").map((s) => parseFloat(s)).filter(Number.isFinite);
  const steps = Math.max(1, Math.floor(num("dw-steps")));
  const flat = daro_trajectory(Float64Array.from(losses), num("dw-c"), num("dw-lr"), steps);
  const m = losses.length;
  const stride = Math.max(1, Math.floor(steps / 400));
  const xs = [];
  for (let t = 0; t <= steps; t += stride) xs.push(t);
  const series = losses.map((l, j) => ({
    name: `L=${l}`,
    xs,
    ys: xs.map((t) => flat[t * m + j]),
  }));
  plot(el("dw-plot"), series, true);
});

await init();
el("status").textContent = "Edit any field to recompute.";
for (const id of ["clip-a", "clip-lo", "clip-hi", "clip-bounded"]) el(id).addEventListener("input", drawClip);
for (const id of ["ls-k", "ls-pos", "ls-neg", "ls-scheme"]) el(id).addEventListener("input", drawLossScale);
for (const id of ["dw-losses", "dw-c", "dw-lr", "dw-steps"]) el(id).addEventListener("input", drawWeights);
drawClip();
drawLossScale();
drawWeights();
