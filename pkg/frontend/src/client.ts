/**
 * GatewayClient: the console's only door into the plant.
 *
 * Every mutation goes through POST /command; everything else is read
 * from /snapshot, /recommendation, /transcript and the /stream NDJSON
 * feed. followSession() implements the bootstrap contract: subscribe
 * to the stream first (buffering), load the transcript-so-far, then
 * drain the buffer - stream events that restate transcript rows are
 * dropped by the session's idempotent apply, so the overlap between
 * the two feeds needs no index bookkeeping.
 */

import type {
  CommandName,
  CommandResult,
  RecommendationResponse,
  Snapshot,
  StreamEvent,
} from "./schema.js";
import {
  NdjsonSplitter,
  parseStreamLine,
  parseTranscript,
} from "./schema.js";
import type { ConsoleSession } from "./session.js";

export class GatewayError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

export class GatewayClient {
  constructor(readonly baseUrl: string) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  async getSnapshot(): Promise<Snapshot> {
    const res = await fetch(this.url("/snapshot"));
    if (!res.ok) throw new GatewayError(`snapshot failed`, res.status);
    return (await res.json()) as Snapshot;
  }

  /** Null while no recommendation exists yet (404 from the gateway). */
  async getRecommendation(): Promise<RecommendationResponse | null> {
    const res = await fetch(this.url("/recommendation"));
    if (res.status === 404) return null;
    if (!res.ok) throw new GatewayError(`recommendation failed`, res.status);
    return (await res.json()) as RecommendationResponse;
  }

  async getTranscriptText(): Promise<string> {
    const res = await fetch(this.url("/transcript"));
    if (!res.ok) throw new GatewayError(`transcript failed`, res.status);
    return await res.text();
  }

  async sendCommand(name: CommandName, speed?: number):
      Promise<CommandResult> {
    const body: Record<string, unknown> = { command: name };
    if (speed !== undefined) body.speed = speed;
    const res = await fetch(this.url("/command"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    // 409 carries a well-formed {ok: false, error} body
    return (await res.json()) as CommandResult;
  }

  /**
   * Follow the live stream, invoking onEvent per parsed line, until
   * the gateway closes it (after its "end" event) or signal aborts.
   * onOpen fires once the subscription is active (response headers
   * received, which the gateway sends only after registering the
   * subscriber).
   */
  async stream(onEvent: (ev: StreamEvent) => void,
               opts: { signal?: AbortSignal; onOpen?: () => void } = {}):
      Promise<void> {
    const res = await fetch(this.url("/stream"), { signal: opts.signal });
    if (!res.ok || res.body === null) {
      throw new GatewayError(`stream failed`, res.status);
    }
    opts.onOpen?.();
    const reader = res.body.getReader();
    const decoder = new TextDecoder();
    const splitter = new NdjsonSplitter();
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      for (const line of splitter.feed(decoder.decode(value,
                                                      { stream: true }))) {
        onEvent(parseStreamLine(line));
      }
    }
    for (const line of splitter.flush()) onEvent(parseStreamLine(line));
  }

  /**
   * Attach a session to this gateway: subscribe to the stream, load
   * the transcript-so-far, then apply live events as they arrive.
   * Stream events that restate transcript events are dropped by the
   * session's idempotent apply, so the overlap between the two feeds
   * needs no index bookkeeping. Resolves when the stream ends.
   */
  async followSession(session: ConsoleSession,
                      signal?: AbortSignal): Promise<void> {
    const buffered: StreamEvent[] = [];
    let bootstrapped = false;

    const deliver = (ev: StreamEvent) => {
      if (!bootstrapped) buffered.push(ev);
      else session.applyEvent(ev);
    };

    let opened!: () => void;
    const subscription = new Promise<void>((resolve) => { opened = resolve; });
    const streaming = this.stream(deliver,
                                  { signal, onOpen: opened });
    // If the stream errors before opening, surface that instead of
    // hanging on the subscription promise.
    await Promise.race([subscription, streaming]);

    session.applyTranscript(parseTranscript(await this.getTranscriptText()));
    session.connection = "live";

    bootstrapped = true;
    const queued = [...buffered];
    buffered.length = 0;
    for (const ev of queued) session.applyEvent(ev);

    await streaming;
  }
}
