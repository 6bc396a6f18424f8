/**
 * Browser bootstrap: wires the gateway client, the session data layer
 * and the pure views into the page. This is the only module that
 * touches the DOM.
 *
 * Modes:
 *   live    ?gateway=http://127.0.0.1:8080 (default: same origin)
 *   replay  pick a saved transcript with the file input
 */

import { GatewayClient } from "./client.js";
import type { CommandName } from "./schema.js";
import { parseTranscript } from "./schema.js";
import { ConsoleSession } from "./session.js";
import {
  renderAlerts,
  renderBanner,
  renderControls,
  renderMarginMap,
  renderTrends,
} from "./views.js";

const $ = (id: string): HTMLElement => {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing #${id}`);
  return el;
};

const params = new URLSearchParams(window.location.search);
const gatewayUrl = params.get("gateway") ?? window.location.origin;
const client = new GatewayClient(gatewayUrl);

let session = new ConsoleSession();
let mode: "live" | "replay" = "live";
let renderQueued = false;

function scheduleRender(): void {
  if (renderQueued) return;
  renderQueued = true;
  requestAnimationFrame(() => {
    renderQueued = false;
    render();
  });
}

function render(): void {
  const layer = session.dataLayer();
  const showTruth = ($("show-truth") as HTMLInputElement).checked;
  $("banner").innerHTML = renderBanner(session);
  $("trends").innerHTML = renderTrends(layer, { showTruth });
  $("margin").innerHTML = renderMarginMap(layer);
  $("alerts").innerHTML = renderAlerts(layer.alerts);
  $("controls").innerHTML = renderControls(session);
  const c = session.cursor;
  $("status").textContent =
    `${mode} | phase ${session.phase}` +
    (c ? ` | t=${c.t.toFixed(1)} s  power=${(100 * c.power).toFixed(1)}%` +
         `  w1=${c.w_1.toFixed(3)}  w2=${c.w_2.toFixed(3)}` : "");
  for (const btn of $("controls").querySelectorAll("button")) {
    btn.addEventListener("click", () => {
      void sendCommand(btn.dataset.command as CommandName);
    });
  }
}

async function sendCommand(name: CommandName): Promise<void> {
  if (mode !== "live") return;
  try {
    const result = await client.sendCommand(name);
    $("command-result").textContent = result.ok
      ? `${name}: queued`
      : `${name}: rejected (${result.error ?? "unknown"})`;
  } catch (err) {
    $("command-result").textContent = `${name}: ${String(err)}`;
  }
  scheduleRender();
}

async function goLive(): Promise<void> {
  mode = "live";
  session = new ConsoleSession();
  scheduleRender();
  const tick = window.setInterval(scheduleRender, 250);
  try {
    await client.followSession(session);
  } catch (err) {
    session.connection = "lost";
    session.lastError = String(err);
  } finally {
    window.clearInterval(tick);
    scheduleRender();
  }
}

function wireReplay(): void {
  const input = $("replay-file") as HTMLInputElement;
  input.addEventListener("change", () => {
    const file = input.files?.[0];
    if (file === undefined) return;
    void file.text().then((text) => {
      mode = "replay";
      session = new ConsoleSession();
      session.connection = "replay";
      session.applyTranscript(parseTranscript(text));
      scheduleRender();
    });
  });
}

wireReplay();
$("show-truth").addEventListener("change", scheduleRender);
$("reconnect").addEventListener("click", () => { void goLive(); });
$("set-speed").addEventListener("click", () => {
  const v = Number(($("speed") as HTMLInputElement).value);
  if (Number.isFinite(v) && v >= 0) {
    void client.sendCommand("set-speed", v);
  }
});
$("pause").addEventListener("click", () => { void sendCommand("pause"); });
$("resume").addEventListener("click", () => { void sendCommand("resume"); });

void goLive();
