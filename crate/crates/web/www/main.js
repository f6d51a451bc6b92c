import init, { simulate_voyage, calibrate, battery_curve } from "./pkg/impact_web.js";

const $ = (id) => document.getElementById(id);

function showError(el, err) {
  el.textContent = String(err.message ?? err);
  el.className = "error";
}

function runVoyage() {
  const summary = $("voyage-summary");
  try {
    const out = JSON.parse(simulate_voyage(
      Number($("seed").value) >>> 0,
      Number($("capture").value),
      Number($("high").value),
      Number($("lambda").value),
      Number($("ambient").value),
    ));
    summary.className = "";
    summary.textContent =
      `${out.captured} captured, ${out.persisted} delivered, ${out.buffered} still buffered, ` +
      `${out.dropped} dropped; battery ${out.final_battery_pct.toFixed(1)} % at arrival`;
    $("chart").innerHTML = out.svg;
    const rows = out.stats.map((s) =>
      `<tr><td>${s.leg_label}</td><td>${s.kind ?? ""}</td><td>${s.n_total}</td><td>${s.n_high}</td>` +
      `<td>${s.n_low}</td><td>${s.max_g.toFixed(2)}</td><td>${s.mean_g.toFixed(2)}</td></tr>`);
    $("legs").innerHTML =
      "<tr><th>leg</th><th>kind</th><th>total</th><th>high</th><th>low</th><th>max g</th><th>mean g</th></tr>" +
      rows.join("");
  } catch (err) {
    showError(summary, err);
  }
}

function runCalibration() {
  const el = $("calibration");
  try {
    const out = JSON.parse(calibrate($("drops").value));
    el.className = "";
    el.textContent = `${out.summary} from ${out.trials} trials`;
    $("lambda").value = out.lambda.toPrecision(6);
    runVoyage();
  } catch (err) {
    showError(el, err);
  }
}

function runBattery() {
  const hours = Number($("interval").value);
  $("interval-label").textContent = hours;
  const el = $("battery-summary");
  try {
    const out = JSON.parse(battery_curve(hours));
    el.className = "";
    el.textContent = `${out.flushes} uploads, ${out.final_battery_pct.toFixed(1)} % left after the cycle`;
    $("battery").innerHTML = out.svg;
  } catch (err) {
    showError(el, err);
  }
}

await init();
$("voyage-form").addEventListener("submit", (e) => { e.preventDefault(); runVoyage(); });
$("calibrate").addEventListener("click", runCalibration);
$("interval").addEventListener("input", runBattery);
runVoyage();
runBattery();
