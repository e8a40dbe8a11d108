// Minimal static dashboard over the /api/v1 endpoints.
const boards = {
  sgx: [["sgx_nr_evicted", "rate"], ["sgx_nr_free_pages", "max"], ["sgx_pages_marked_old", "max"]],
  infrastructure: [["context_switches", "rate"], ["page_faults", "rate"], ["syscalls", "rate"], ["llc_misses", "rate"]],
};

const $ = (id) => document.getElementById(id);

function readView() {
  const p = new URLSearchParams(location.hash.slice(1));
  $("board").value = p.get("board") || "sgx";
  $("filter").value = p.get("filter") || "";
}

function writeView() {
  const p = new URLSearchParams({ board: $("board").value, filter: $("filter").value });
  location.hash = p.toString();
}

function rows(table, header, data) {
  table.innerHTML = "<tr>" + header.map((h) => `<th>${h}</th>`).join("") + "</tr>" +
    data.map((r) => "<tr>" + r.map((c) => `<td>${c}</td>`).join("") + "</tr>").join("");
}

async function getJson(url) {
  const res = await fetch(url);
  return res.json();
}

async function refresh() {
  const targets = await getJson("/api/v1/targets");
  rows($("targets"), ["job", "instance", "health", "failures"],
    targets.map((t) => [t.job, t.instance, `<span class="${t.health}">${t.health}</span>`, t.consecutive_failures]));

  const out = [];
  for (const [name, agg] of boards[$("board").value]) {
    const q = new URLSearchParams({ name, agg, step: "10s" });
    if ($("filter").value) q.set("matchers", $("filter").value);
    const res = await getJson("/api/v1/query_range?" + q);
    if (!Array.isArray(res)) continue;
    for (const g of res) {
      const last = g.points.length ? g.points[g.points.length - 1][1] : NaN;
      out.push([name, agg, last.toFixed(3)]);
    }
  }
  rows($("metrics"), ["metric", "agg", "latest"], out);

  const alerts = await getJson("/api/v1/alerts");
  rows($("alerts"), ["rule", "state", "severity", "observed", "threshold"],
    alerts.map((a) => [a.rule_id, a.state, a.severity, a.observed, a.threshold]));
}

function follow() {
  const es = new EventSource("/api/v1/stream");
  es.onmessage = (m) => {
    const ev = JSON.parse(m.data);
    const line = document.createElement("div");
    line.textContent = `${new Date().toISOString()} ${ev.type} ${JSON.stringify(ev.payload).slice(0, 160)}`;
    $("feed").prepend(line);
    if (ev.type !== "sample_batch") refresh();
  };
}

readView();
$("board").onchange = () => { writeView(); refresh(); };
$("filter").onchange = () => { writeView(); refresh(); };
refresh();
setInterval(refresh, 5000);
follow();
