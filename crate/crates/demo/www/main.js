import init, { demoSignal, spectrogramPcs, lsigmoidCurve, bifGains } from './pkg/bspmpnet_demo.js';

const $ = (id) => document.getElementById(id);

function heat(v) {
  // Black, blue, orange, white ramp for v in [0, 1].
  const stops = [[0, 0, 0], [40, 60, 160], [240, 140, 40], [255, 255, 255]];
  const x = Math.min(Math.max(v, 0), 1) * (stops.length - 1);
  const i = Math.min(Math.floor(x), stops.length - 2);
  const f = x - i;
  return stops[i].map((a, k) => Math.round(a + f * (stops[i + 1][k] - a)));
}

function drawPlane(canvas, values, bins, frames, peak) {
  canvas.width = frames;
  canvas.height = bins;
  canvas.style.width = '420px';
  canvas.style.height = '257px';
  const ctx = canvas.getContext('2d');
  const img = ctx.createImageData(frames, bins);
  for (let k = 0; k < bins; k++) {
    const row = bins - 1 - k;
    for (let t = 0; t < frames; t++) {
      const [r, g, b] = heat(values[k * frames + t] / peak);
      const o = 4 * (row * frames + t);
      img.data[o] = r; img.data[o + 1] = g; img.data[o + 2] = b; img.data[o + 3] = 255;
    }
  }
  ctx.putImageData(img, 0, 0);
}

function renderSpectrogram() {
  const snr = Number($('snr').value);
  $('snr-val').textContent = snr;
  const fft = Number($('fft').value);
  const x = demoSignal(2.0, snr, Number($('seed').value) >>> 0);
  const s = spectrogramPcs(x, fft, fft / 4);
  const peak = s.peak() || 1;
  drawPlane($('spec-raw'), s.compressed(), s.bins, s.frames, peak);
  drawPlane($('spec-pcs'), s.boosted(), s.bins, s.frames, peak);
  s.free();
}

function axes(ctx, w, h, pad) {
  ctx.strokeStyle = '#888';
  ctx.beginPath();
  ctx.moveTo(pad, pad); ctx.lineTo(pad, h - pad); ctx.lineTo(w - pad, h - pad);
  ctx.stroke();
}

function renderLsigmoid() {
  const alpha = Number($('alpha').value);
  const beta = Number($('beta').value);
  $('alpha-val').textContent = alpha.toFixed(2);
  $('beta-val').textContent = beta.toFixed(2);
  const [tMin, tMax, n] = [-4, 6, 400];
  const ys = lsigmoidCurve(alpha, beta, tMin, tMax, n);
  const c = $('lsig');
  const ctx = c.getContext('2d');
  const pad = 24;
  const yMax = 2.0;
  ctx.clearRect(0, 0, c.width, c.height);
  axes(ctx, c.width, c.height, pad);
  const px = (t) => pad + (t - tMin) / (tMax - tMin) * (c.width - 2 * pad);
  const py = (y) => c.height - pad - y / yMax * (c.height - 2 * pad);
  ctx.setLineDash([4, 4]);
  ctx.strokeStyle = '#aaa';
  ctx.beginPath(); ctx.moveTo(px(1 / alpha), pad); ctx.lineTo(px(1 / alpha), c.height - pad); ctx.stroke();
  ctx.beginPath(); ctx.moveTo(pad, py(beta)); ctx.lineTo(c.width - pad, py(beta)); ctx.stroke();
  ctx.setLineDash([]);
  ctx.strokeStyle = '#3465a4';
  ctx.lineWidth = 2;
  ctx.beginPath();
  ys.forEach((y, i) => {
    const t = tMin + i * (tMax - tMin) / (n - 1);
    i === 0 ? ctx.moveTo(px(t), py(y)) : ctx.lineTo(px(t), py(y));
  });
  ctx.stroke();
  ctx.lineWidth = 1;
}

function renderBif() {
  const g = bifGains(Number($('bif-fft').value));
  const c = $('bif');
  const ctx = c.getContext('2d');
  const pad = 24;
  const top = Math.max(...g) * 1.1;
  ctx.clearRect(0, 0, c.width, c.height);
  axes(ctx, c.width, c.height, pad);
  const w = (c.width - 2 * pad) / g.length;
  ctx.fillStyle = '#e67e22';
  g.forEach((v, k) => {
    const h = v / top * (c.height - 2 * pad);
    ctx.fillRect(pad + k * w, c.height - pad - h, Math.max(w - 0.5, 0.5), h);
  });
  ctx.fillStyle = '#444';
  ctx.fillText('0 Hz', pad, c.height - 6);
  ctx.fillText('8 kHz', c.width - pad - 30, c.height - 6);
  ctx.fillText(`max ${Math.max(...g).toFixed(3)}`, pad + 4, pad - 6);
}

async function main() {
  try {
    await init();
  } catch (e) {
    $('status').textContent = 'Could not load pkg/bspmpnet_demo.js; build it with wasm-pack first (see README).';
    throw e;
  }
  $('status').textContent = '';
  for (const id of ['snr', 'fft']) $(id).addEventListener('input', renderSpectrogram);
  $('regen').addEventListener('click', renderSpectrogram);
  for (const id of ['alpha', 'beta']) $(id).addEventListener('input', renderLsigmoid);
  $('bif-fft').addEventListener('input', renderBif);
  renderSpectrogram();
  renderLsigmoid();
  renderBif();
}

main();
