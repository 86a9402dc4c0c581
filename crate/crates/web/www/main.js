import init, { energy_curve, quantization, bin_simulation } from "./pkg/edgebin_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function clear(canvas) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.font = "12px system-ui, sans-serif";
  return ctx;
}

function bars(canvas, values, { labels = [], color = "#3a7bd5", line = null, lineLabel = "" } = {}) {
  const ctx = clear(canvas);
  const pad = 30;
  const w = canvas.width - 2 * pad;
  const h = canvas.height - 2 * pad;
  const top = Math.max(...values, line ?? 0) * 1.1 || 1;
  const bw = w / values.length;
  values.forEach((v, i) => {
    const bh = (v / top) * h;
    ctx.fillStyle = typeof color === "function" ? color(i, v) : color;
    ctx.fillRect(pad + i * bw + bw * 0.1, pad + h - bh, Math.max(bw * 0.8, 1), bh);
    if (labels[i]) {
      ctx.fillStyle = "#444";
      ctx.fillText(labels[i], pad + i * bw + bw * 0.1, canvas.height - 10);
    }
  });
  if (line !== null) {
    const y = pad + h - (line / top) * h;
    ctx.strokeStyle = "#a61b1b";
    ctx.setLineDash([6, 4]);
    ctx.beginPath();
    ctx.moveTo(pad, y);
    ctx.lineTo(pad + w, y);
    ctx.stroke();
    ctx.setLineDash([]);
    ctx.fillStyle = "#a61b1b";
    ctx.fillText(lineLabel, pad + 4, y - 4);
  }
}

function fail(where, err) {
  where.innerHTML = "";
  const p = document.createElement("span");
  p.className = "error";
  p.textContent = String(err.message ?? err);
  where.appendChild(p);
}

function drawPower() {
  const out = $("p-out");
  try {
    const load = num("p-load");
    const v = JSON.parse(energy_curve(num("p-area"), num("p-eff"), num("p-batt"), num("p-rt"), load, $("p-csv").value));
    const r = v.report;
    bars($("p-canvas"), r.months.map((m) => m.sustainable_w), {
      labels: r.months.map((m) => m.month),
      color: (i) => (r.months[i].feasible ? "#3a9d5d" : "#d08a2b"),
      line: load,
      lineLabel: `load ${load} W`,
    });
    out.innerHTML =
      `Worst month <b>${r.worst_month}</b> sustains ${r.worst_sustainable_w.toFixed(3)} W: ` +
      `<span class="verdict ${r.feasible ? "ok" : "bad"}">${r.feasible ? "feasible" : "not feasible"}</span>. ` +
      `Break-even irradiation ${v.required_h.toFixed(0)} Wh/m²/day. Battery alone: ${r.battery_hours.toFixed(1)} h.`;
  } catch (e) {
    clear($("p-canvas"));
    fail(out, e);
  }
}

function drawQuant() {
  const table = $("q-table");
  try {
    const v = JSON.parse(quantization(num("q-n"), num("q-spread"), num("q-outlier"), num("q-seed") >>> 0, $("q-values").value));
    const asym = $("q-asym").checked;
    const hist = asym ? v.asymmetric_histogram : v.symmetric_histogram;
    const labels = hist.map((_, i) => ((i - 128) % 64 === 0 ? String(i - 128) : ""));
    bars($("q-canvas"), hist, { labels, color: asym ? "#8e44ad" : "#3a7bd5" });
    const row = (name, s) =>
      `<tr><td>${name}</td><td>${s.scale?.toExponential(3) ?? "-"}</td><td>${s.zero_point ?? "-"}</td>` +
      `<td>${s.max_abs_error.toExponential(3)}</td><td>${s.rms_error.toExponential(3)}</td></tr>`;
    table.innerHTML =
      `<tr><th>scheme</th><th>scale</th><th>zero point</th><th>max |error|</th><th>rms error</th></tr>` +
      row("i8 symmetric", v.symmetric) +
      row("i8 asymmetric", v.asymmetric) +
      row("f16", v.f16) +
      `<tr><td colspan="5">${v.count} values in [${v.min.toFixed(4)}, ${v.max.toFixed(4)}]; ` +
      `${v.bytes.f32} B as f32, ${v.bytes.f16} B as f16, ${v.bytes.i8} B as i8` +
      `${v.degenerate ? "; constant tensor, scale forced to 1" : ""}</td></tr>`;
  } catch (e) {
    clear($("q-canvas"));
    fail(table, e);
  }
}

const STATE_ROWS = ["idle", "hand_hold", "observing", "sorting"];
const STATE_COLORS = { idle: "#999", hand_hold: "#d08a2b", observing: "#3a7bd5", sorting: "#3a9d5d" };

function drawBin() {
  const table = $("b-table");
  const canvas = $("b-canvas");
  try {
    const v = JSON.parse(bin_simulation($("b-trace").value, num("b-window"), num("b-tau"), num("b-timeout")));
    const ctx = clear(canvas);
    const pad = 80;
    const rowH = (canvas.height - 20) / STATE_ROWS.length;
    STATE_ROWS.forEach((s, r) => {
      ctx.fillStyle = "#444";
      ctx.fillText(s, 4, 16 + r * rowH + rowH / 2);
    });
    const step = (canvas.width - pad - 10) / Math.max(v.steps.length, 1);
    v.steps.forEach((s, i) => {
      const r = STATE_ROWS.indexOf(s.state.state);
      ctx.fillStyle = STATE_COLORS[s.state.state];
      ctx.fillRect(pad + i * step, 10 + r * rowH, Math.max(step - 1, 1), rowH - 4);
      if (s.actions.length) {
        ctx.fillStyle = s.actions[0] === "alarm" ? "#a61b1b" : "#000";
        ctx.fillText(s.actions[0] === "alarm" ? "!" : "▲", pad + i * step + step / 2 - 3, 10 + r * rowH - 2 + rowH / 2);
      }
      if (s.error) {
        ctx.strokeStyle = "#a61b1b";
        ctx.strokeRect(pad + i * step, 10 + r * rowH, Math.max(step - 1, 1), rowH - 4);
      }
    });
    const describe = (e) => (e.event === "classified" ? `${e.label} ${e.confidence.toFixed(2)}` : e.event);
    table.innerHTML =
      "<tr><th>#</th><th>event</th><th>state after</th><th>actions</th></tr>" +
      v.steps
        .map((s) => `<tr><td>${s.index}</td><td>${describe(s.event)}</td><td>${s.label}</td>` +
          `<td>${s.error ? `<span class="error">rejected: ${s.error}</span>` : s.actions.join(", ")}</td></tr>`)
        .join("");
  } catch (e) {
    clear(canvas);
    fail(table, e);
  }
}

function wire(section, draw) {
  $(section).querySelectorAll("input, textarea").forEach((el) => el.addEventListener("input", draw));
}

init()
  .then(() => {
    document.querySelectorAll("#power button[data-load]").forEach((b) =>
      b.addEventListener("click", () => {
        $("p-load").value = b.dataset.load;
        drawPower();
      }));
    wire("power", drawPower);
    wire("quant", drawQuant);
    wire("bin", drawBin);
    drawPower();
    drawQuant();
    drawBin();
  })
  .catch((e) => fail($("load-error"), `Could not load the WebAssembly module: ${e}`));
