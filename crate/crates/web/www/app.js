import init, * as wasm from "./pkg/tabmlm_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function show(el, result, render) {
  el.classList.toggle("error", "error" in result);
  if ("error" in result) el.textContent = result.error;
  else render(result);
}

function renderTokens(r) {
  $("row-text").textContent = r.text;
  const box = $("row-tokens");
  box.replaceChildren(...r.tokens.map((t) => {
    const span = document.createElement("span");
    span.className = `tok ${t.kind}`;
    span.textContent = t.surface;
    const id = document.createElement("small");
    id.textContent = t.id;
    span.append(id);
    return span;
  }));
}

function rowChanged() {
  const r = JSON.parse(wasm.serialize_and_tokenize($("row-values").value, $("row-mask").value));
  show($("row-text"), r, renderTokens);
}

function textChanged() {
  const r = JSON.parse(wasm.tokenize($("free-text").value));
  show($("row-text"), r, renderTokens);
}

function quantChanged() {
  const r = JSON.parse(wasm.quantize_value(num("q-x"), num("q-min"), num("q-max")));
  show($("q-out"), r, (q) => {
    $("q-out").textContent = [
      `normalized   ${q.normalized}${q.clamped ? "  (clamped to [0, 1])" : ""}`,
      `token        "${q.token}"  id ${q.token_id}`,
      `grid value   ${q.quantized.toFixed(4)}`,
      `restored     ${q.restored}`,
      `abs error    ${q.error.toExponential(3)}  (bound ${q.max_error.toExponential(3)})`,
    ].join("\n");
  });
}

function presetChanged() {
  const p = JSON.parse(wasm.preset($("c-preset").value));
  for (const [k, id] of [["vocab", "c-vocab"], ["hidden", "c-hidden"], ["heads", "c-heads"],
    ["layers", "c-layers"], ["ffn", "c-ffn"], ["max_seq", "c-maxseq"]]) $(id).value = p[k];
  $("c-seq").value = p.max_seq;
  costChanged();
}

function costChanged() {
  const r = JSON.parse(wasm.model_cost(num("c-vocab"), num("c-hidden"), num("c-heads"), num("c-layers"),
    num("c-ffn"), num("c-maxseq"), num("c-seq"), num("c-batch")));
  show($("c-out"), r, (c) => { $("c-out").textContent = c.report; });
}

function carbonChanged() {
  const r = JSON.parse(wasm.carbon(num("e-kwh"), num("e-int"), num("e-mul"), num("e-km")));
  show($("e-out"), r, (c) => { $("e-out").textContent = c.text; });
}

await init();
$("row-values").addEventListener("input", rowChanged);
$("row-mask").addEventListener("input", rowChanged);
$("free-text").addEventListener("input", textChanged);
for (const id of ["q-x", "q-min", "q-max"]) $(id).addEventListener("input", quantChanged);
$("c-preset").addEventListener("change", presetChanged);
for (const id of ["c-vocab", "c-hidden", "c-heads", "c-layers", "c-ffn", "c-maxseq", "c-seq", "c-batch"])
  $(id).addEventListener("input", costChanged);
for (const id of ["e-kwh", "e-int", "e-mul", "e-km"]) $(id).addEventListener("input", carbonChanged);
rowChanged();
quantChanged();
presetChanged();
carbonChanged();
