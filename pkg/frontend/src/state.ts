/** Console state machine.
 *
 * Every number on screen is traceable to a server response field; the only
 * client-side computation is the flow-score cross-check in flowmath.  A
 * single in-flight message per session is enforced here, not in the DOM.
 */

import { ApiError, DecodeOptions, DialoflowClient, TrajectoryPoint } from "./api.js";
import { flowScore, skBadge } from "./flowmath.js";

export interface Turn {
  speaker: "user" | "bot";
  text: string;
  sK?: number;
  badge?: "green" | "amber" | "red";
}

export type ConnectionStatus = "disconnected" | "ready" | "waiting" | "error";

export interface ConsoleState {
  sessionId: string | null;
  transcript: Turn[];
  similarities: number[];
  flowRunning: number | null;
  trajectory: TrajectoryPoint[];
  status: ConnectionStatus;
  composerError: string | null;
  checkpointHash: string | null;
}

export function initialState(): ConsoleState {
  return {
    sessionId: null,
    transcript: [],
    similarities: [],
    flowRunning: null,
    trajectory: [],
    status: "disconnected",
    composerError: null,
    checkpointHash: null,
  };
}

/** Flow score display: em dash before any bot turn is scored. */
export function flowDisplay(state: ConsoleState): string {
  return state.flowRunning === null ? "—" : state.flowRunning.toFixed(4);
}

export class ConsoleController {
  state: ConsoleState = initialState();
  private inFlight = false;

  constructor(
    private client: DialoflowClient,
    private onChange: (state: ConsoleState) => void = () => {},
  ) {}

  private update(patch: Partial<ConsoleState>) {
    this.state = { ...this.state, ...patch };
    this.onChange(this.state);
  }

  get busy(): boolean {
    return this.inFlight;
  }

  async startSession(options?: DecodeOptions): Promise<void> {
    try {
      const created = await this.client.createSession(options);
      this.state = initialState();
      this.update({
        sessionId: created.session_id,
        checkpointHash: created.checkpoint_hash,
        status: "ready",
      });
    } catch (err) {
      this.update({ status: "error", composerError: describe(err) });
      throw err;
    }
  }

  async sendTurn(text: string): Promise<void> {
    if (this.state.sessionId === null) {
      this.update({ composerError: "no active session" });
      return;
    }
    if (text.trim() === "") {
      this.update({ composerError: "message is empty" });
      return;
    }
    if (this.inFlight) {
      return; // composer is disabled while a reply is pending
    }
    this.inFlight = true;
    this.update({ status: "waiting", composerError: null });
    try {
      const resp = await this.client.sendMessage(this.state.sessionId, text);
      const similarities = [...this.state.similarities, resp.s_k];
      const recomputed = flowScore(similarities);
      if (Math.abs(recomputed - resp.flow_running) > 1e-6) {
        throw new Error(
          `flow mismatch: client ${recomputed} vs server ${resp.flow_running}`,
        );
      }
      const trajectory = await this.client.getTrajectory(this.state.sessionId);
      this.update({
        transcript: [
          ...this.state.transcript,
          { speaker: "user", text },
          { speaker: "bot", text: resp.reply, sK: resp.s_k, badge: skBadge(resp.s_k) },
        ],
        similarities,
        flowRunning: resp.flow_running,
        trajectory: trajectory.points,
        status: "ready",
      });
    } catch (err) {
      // transcript unchanged on failure; surface the error on the composer
      this.update({ status: "ready", composerError: describe(err) });
    } finally {
      this.inFlight = false;
    }
  }
}

function describe(err: unknown): string {
  if (err instanceof ApiError) {
    const fields = err.fields.length ? ` (${err.fields.join(", ")})` : "";
    return `${err.message}${fields}`;
  }
  return err instanceof Error ? err.message : String(err);
}
