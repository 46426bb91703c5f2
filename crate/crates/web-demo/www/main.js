import init, { Demo } from "./pkg/patchcraft_web_demo.js";

const $ = (id) => document.getElementById(id);
const SIZE = 48;
let demo;
let marked = null;

function paint(id, rgba, w, h) {
  const c = $(id);
  c.width = w;
  c.height = h;
  c.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), w, h), 0, 0);
  return c;
}

function frame() {
  return Number($("frame").value);
}

function rebuild() {
  demo = new Demo($("kind").value, 5, SIZE, BigInt($("seed").value));
  $("j").max = demo.neighbor_count();
  $("i").max = demo.groups() - 1;
  renoise();
}

function renoise() {
  const p = demo.set_noise(Number($("sigma").value), $("clipped").checked, 7n);
  $("psnr").textContent = Number.isFinite(p) ? p.toFixed(2) + " dB" : "inf";
  redraw();
}

function redraw() {
  for (const id of ["sigma", "frame", "j", "i"]) $(id + "Out").textContent = $(id).value;
  const t = frame();
  const [w, h] = [demo.width(), demo.height()];
  paint("clean", demo.clean_rgba(t), w, h);
  paint("noisy", demo.noisy_rgba(t), w, h);
  paint("craft", demo.patch_craft_rgba(t, Number($("j").value), Number($("i").value)), w, h);
  paint("score", demo.score_rgba(t, Number($("j").value)), w, h);
  const c = paint("click", demo.noisy_rgba(t), w, h);
  if (marked) showNeighbors(c, marked.y, marked.x);
}

function showNeighbors(canvas, y, x) {
  const t = frame();
  const flat = demo.neighbors_of(t, y, x);
  const ctx = canvas.getContext("2d");
  ctx.fillStyle = "rgba(255,0,0,0.9)";
  ctx.fillRect(x, y, 1, 1);
  let rows = `<table><tr><th>rank</th><th>frame</th><th>y</th><th>x</th><th>distance</th></tr>`;
  for (let k = 0; k < flat.length; k += 4) {
    const [nt, ny, nx, d] = flat.slice(k, k + 4);
    if (nt === t) {
      ctx.fillStyle = "rgba(0,160,255,0.9)";
      ctx.fillRect(nx, ny, 1, 1);
    }
    rows += `<tr><td>${k / 4 + 1}</td><td>${nt}</td><td>${ny}</td><td>${nx}</td><td>${d.toFixed(4)}</td></tr>`;
  }
  $("list").innerHTML = `<p>pixel (${y}, ${x}) of frame ${t}</p>` + rows + "</table>";
}

$("click").addEventListener("click", (ev) => {
  const c = ev.currentTarget;
  const r = c.getBoundingClientRect();
  const x = Math.floor(((ev.clientX - r.left) / r.width) * c.width);
  const y = Math.floor(((ev.clientY - r.top) / r.height) * c.height);
  marked = { y, x };
  redraw();
});

$("kind").addEventListener("change", rebuild);
$("seed").addEventListener("change", rebuild);
$("sigma").addEventListener("input", renoise);
$("clipped").addEventListener("change", renoise);
for (const id of ["frame", "j", "i"]) $(id).addEventListener("input", redraw);

await init();
rebuild();
