/** DOM wiring for the chat console. */

import { DialoflowClient } from "./api.js";
import { ConsoleController, ConsoleState, flowDisplay } from "./state.js";
import { chartGeometry } from "./trajectory.js";

const API_BASE =
  new URLSearchParams(window.location.search).get("api") ?? "http://127.0.0.1:8000";

const el = (id: string) => document.getElementById(id)!;
const transcriptEl = el("transcript");
const flowEl = el("flow-score");
const statusEl = el("status");
const errorEl = el("composer-error");
const chartEl = el("trajectory-chart") as unknown as SVGSVGElement;
const input = el("composer-input") as HTMLInputElement;
const sendBtn = el("send") as HTMLButtonElement;
const startBtn = el("start") as HTMLButtonElement;
const beamWidth = el("beam-width") as HTMLInputElement;
const strategy = el("strategy") as HTMLSelectElement;

const controller = new ConsoleController(new DialoflowClient(API_BASE), render);

function render(state: ConsoleState) {
  statusEl.textContent = state.status;
  flowEl.textContent = flowDisplay(state);
  errorEl.textContent = state.composerError ?? "";
  sendBtn.disabled = controller.busy || state.sessionId === null;
  input.disabled = controller.busy || state.sessionId === null;

  transcriptEl.innerHTML = "";
  for (const turn of state.transcript) {
    const li = document.createElement("li");
    li.className = `turn ${turn.speaker}`;
    li.textContent = `${turn.speaker === "user" ? "you" : "bot"}: ${turn.text}`;
    if (turn.sK !== undefined) {
      const badge = document.createElement("span");
      badge.className = `badge ${turn.badge}`;
      badge.textContent = `s=${turn.sK.toFixed(3)}`;
      li.appendChild(badge);
    }
    transcriptEl.appendChild(li);
  }

  const geom = chartGeometry(state.trajectory, 360, 240);
  chartEl.innerHTML = "";
  if (geom.points.length > 0) {
    const line = document.createElementNS("http://www.w3.org/2000/svg", "polyline");
    line.setAttribute("points", geom.polyline);
    line.setAttribute("fill", "none");
    line.setAttribute("stroke", "#4a6fa5");
    chartEl.appendChild(line);
    geom.points.forEach((p, i) => {
      const dot = document.createElementNS("http://www.w3.org/2000/svg", "circle");
      dot.setAttribute("cx", String(p.x));
      dot.setAttribute("cy", String(p.y));
      dot.setAttribute("r", "4");
      dot.setAttribute(
        "fill",
        p.speaker === "start" ? "#888" : p.speaker === "A" ? "#2b8a3e" : "#a54a4a",
      );
      const title = document.createElementNS("http://www.w3.org/2000/svg", "title");
      const text = textForPoint(state, i);
      title.textContent = text === null ? p.label : `${p.label}: ${text}`;
      dot.appendChild(title);
      chartEl.appendChild(dot);
    });
  }
}

function textForPoint(state: ConsoleState, i: number): string | null {
  // point 0 precedes the first utterance; point k follows utterance k
  return i === 0 ? null : state.transcript[i - 1]?.text ?? null;
}

startBtn.addEventListener("click", async () => {
  if (state().sessionId !== null && !confirm("Replace the current session?")) {
    return;
  }
  await controller
    .startSession({
      strategy: strategy.value as "greedy" | "beam",
      beam_width: Number(beamWidth.value),
    })
    .catch(() => {});
});

sendBtn.addEventListener("click", send);
input.addEventListener("keydown", (e) => {
  if (e.key === "Enter") void send();
});

async function send() {
  const text = input.value;
  await controller.sendTurn(text);
  if (state().composerError === null) {
    input.value = "";
  }
}

function state(): ConsoleState {
  return controller.state;
}

render(controller.state);
