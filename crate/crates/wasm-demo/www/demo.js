import init, * as duo from "./pkg/duotts_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function bars(canvas, values, label) {
  const g = canvas.getContext("2d");
  g.clearRect(0, 0, canvas.width, canvas.height);
  const max = Math.max(...values, 1e-12);
  const w = canvas.width / values.length;
  g.fillStyle = "#1f5fbf";
  values.forEach((v, i) => {
    const h = (v / max) * (canvas.height - 20);
    g.fillRect(i * w + 2, canvas.height - h, w - 4, h);
  });
  g.fillStyle = "#222";
  g.fillText(label, 4, 12);
}

function rvq() {
  const layers = num("rvq-layers"), entries = 2 ** num("rvq-bits");
  try {
    const bps = duo.bitrate(layers, entries, num("rvq-rate"));
    $("rvq-bitrate").textContent = `${layers} x log2(${entries}) x ${num("rvq-rate")} Hz = ${bps} bps`;
    const r = duo.residual_curve(layers, Math.min(entries, 256), 32, 2048, 7n);
    bars($("rvq-plot"), Array.from(r), `residual energy, ${r[0].toFixed(2)} -> ${r[r.length - 1].toFixed(4)}`);
  } catch (e) {
    $("rvq-bitrate").textContent = String(e);
  }
}

const colours = ["#1f5fbf", "#c26a00", "#2d8a2d"];

function firstPacket(trace) {
  const counts = [0, 0];
  for (let i = 0; i < trace.length; i += 2) {
    if (trace[i] === 2) break;
    counts[trace[i]]++;
  }
  return counts;
}

function schedules() {
  const n = num("sch-layers"), f = num("sch-frames");
  try {
    const dual = duo.schedule_trace(false, n, f), delay = duo.schedule_trace(true, n, f);
    const [db, dd] = firstPacket(dual), [lb, ld] = firstPacket(delay);
    $("sch-summary").textContent =
      `first packet, dual:  backbone=${db} decoder=${dd}\n` +
      `first packet, delay: backbone=${lb} decoder=${ld}`;
    const c = $("sch-plot"), g = c.getContext("2d");
    g.clearRect(0, 0, c.width, c.height);
    const steps = Math.max(dual.length, delay.length) / 2;
    const w = Math.min(24, c.width / steps);
    [dual, delay].forEach((t, row) => {
      for (let i = 0; i < t.length; i += 2) {
        g.fillStyle = colours[t[i]];
        g.fillRect((i / 2) * w, 20 + row * 70, w - 1, 50);
      }
    });
  } catch (e) {
    $("sch-summary").textContent = String(e);
  }
}

let last = null;

function corpus() {
  const text = new Uint16Array($("cor-text").value.split(/[\s,]+/).filter(Boolean).map(Number));
  try {
    const a = duo.render_utterance(text, num("cor-spk"));
    const noise = num("cor-noise");
    for (let i = 0; i < a.length; i++) a[i] += noise * (Math.random() * 2 - 1);
    last = a;
    const c = $("cor-plot"), g = c.getContext("2d");
    g.clearRect(0, 0, c.width, c.height);
    g.strokeStyle = "#333";
    g.beginPath();
    const step = a.length / c.width;
    for (let x = 0; x < c.width; x++) {
      let lo = 1, hi = -1;
      for (let i = Math.floor(x * step); i < (x + 1) * step; i++) { lo = Math.min(lo, a[i]); hi = Math.max(hi, a[i]); }
      g.moveTo(x, c.height / 2 * (1 - hi));
      g.lineTo(x, c.height / 2 * (1 - lo));
    }
    g.stroke();
    const heard = Array.from(duo.oracle_text(a));
    const spk = duo.oracle_speaker(a);
    $("cor-out").textContent =
      `${a.length} samples (${(a.length / 16000).toFixed(2)} s)\n` +
      `oracle text:  ${heard.join(" ")}\n` +
      `oracle voice: ${spk === 0 ? "none" : spk}`;
  } catch (e) {
    $("cor-out").textContent = String(e);
  }
}

function play() {
  if (!last) return;
  const ctx = new AudioContext({ sampleRate: 16000 });
  const buf = ctx.createBuffer(1, last.length, 16000);
  buf.copyToChannel(last, 0);
  const src = ctx.createBufferSource();
  src.buffer = buf;
  src.connect(ctx.destination);
  src.start();
}

await init();
$("rvq-go").onclick = rvq;
$("sch-go").onclick = schedules;
$("cor-go").onclick = corpus;
$("cor-play").onclick = play;
rvq();
schedules();
corpus();
