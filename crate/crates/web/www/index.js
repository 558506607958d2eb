// Built with: wasm-bindgen --target web --out-dir www/pkg <patchdrop_web.wasm>
import init, { keepSetSvg, costReport, savingsSvg } from "./pkg/patchdrop_web.js";

const $ = (id) => document.getElementById(id);
let step = 0;

function show(target, render) {
  try {
    target.classList.remove("error");
    render();
  } catch (e) {
    target.classList.add("error");
    target.textContent = String(e);
  }
}

function drawKeepSet() {
  $("ks-rate-out").textContent = $("ks-rate").value;
  show($("ks-out"), () => {
    $("ks-out").innerHTML = keepSetSvg(
      $("ks-strategy").value,
      Number($("ks-rate").value),
      Number($("ks-rows").value),
      Number($("ks-cols").value),
      Number($("ks-seed").value),
      step,
    );
  });
}

function drawCost() {
  show($("c-out"), () => {
    const json = costReport(
      $("c-variant").value,
      Number($("c-image").value),
      Number($("c-patch").value),
      Number($("c-rate").value),
      Number($("c-batch").value),
    );
    const r = JSON.parse(json);
    $("c-summary").textContent =
      `${r.config_id}: ${r.kept_patches} of ${r.num_patches} patches, ` +
      `${r.empirical_gflops.toFixed(2)} GFLOPs (${(100 * r.relative_empirical).toFixed(1)}% of full)`;
    $("c-out").textContent = json;
  });
}

function drawSavings() {
  show($("s-out"), () => {
    $("s-out").innerHTML = savingsSvg($("s-rates").value, Number($("s-width").value));
  });
}

await init();
for (const id of ["ks-strategy", "ks-rate", "ks-rows", "ks-cols", "ks-seed"]) {
  $(id).addEventListener("input", () => { step = 0; drawKeepSet(); });
}
$("ks-next").addEventListener("click", () => { step += 1; drawKeepSet(); });
for (const id of ["c-variant", "c-image", "c-patch", "c-rate", "c-batch"]) {
  $(id).addEventListener("input", drawCost);
}
for (const id of ["s-rates", "s-width"]) {
  $(id).addEventListener("input", drawSavings);
}
drawKeepSet();
drawCost();
drawSavings();
