import { spawn, type ChildProcess } from "node:child_process";
import { once } from "node:events";
import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import { parseTranscript } from "../src/schema.js";
import { ConsoleSession } from "../src/session.js";

const HERE = dirname(fileURLToPath(import.meta.url));

export const FIXTURES = join(HERE, "fixtures");
export const BUNDLE_DIR = join(HERE, "..", "fixtures", "bundle");

export function loadTranscriptText(name: string): string {
  return readFileSync(join(FIXTURES, name), "utf8");
}

/** Build a session purely from a recorded transcript (replay mode). */
export function replaySession(transcriptText: string): ConsoleSession {
  const session = new ConsoleSession();
  session.applyTranscript(parseTranscript(transcriptText));
  return session;
}

export function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

export async function waitFor(
  check: () => boolean | Promise<boolean>,
  timeoutMs: number,
  label: string,
  intervalMs = 50,
): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (await check()) return;
    await sleep(intervalMs);
  }
  throw new Error(`timed out after ${timeoutMs} ms waiting for ${label}`);
}

export interface Gateway {
  base: string;
  proc: ChildProcess;
  stderr: () => string;
  stop: () => Promise<void>;
}

let nextPort = 18300 + (process.pid % 500);

/**
 * Spawn the real gateway CLI and wait until its HTTP surface answers.
 * The console only ever talks to the documented HTTP endpoints.
 */
export async function startGateway(args: {
  policy: "auto" | "gated";
  speed: number;
  scenario?: string;
}): Promise<Gateway> {
  const port = nextPort++;
  const base = `http://127.0.0.1:${port}`;
  const argv = [
    "serve",
    "--bundle",
    BUNDLE_DIR,
    "--scenario",
    args.scenario ?? "table2",
    "--policy",
    args.policy,
    "--speed",
    String(args.speed),
    "--port",
    String(port),
  ];
  const proc = spawn("reactortwin", argv, {
    stdio: ["ignore", "ignore", "pipe"],
  });
  let stderrText = "";
  proc.stderr?.on("data", (chunk: Buffer) => {
    stderrText += chunk.toString("utf8");
  });
  let exited = false;
  proc.on("exit", () => {
    exited = true;
  });

  try {
    await waitFor(
      async () => {
        if (exited) {
          throw new Error(`gateway exited early: ${stderrText}`);
        }
        try {
          const res = await fetch(`${base}/snapshot`);
          return res.ok;
        } catch {
          return false;
        }
      },
      20_000,
      `gateway on port ${port}`,
    );
  } catch (err) {
    proc.kill("SIGKILL");
    throw err;
  }

  return {
    base,
    proc,
    stderr: () => stderrText,
    stop: async () => {
      if (!exited) {
        proc.kill("SIGTERM");
        await Promise.race([once(proc, "exit"), sleep(3_000)]);
        if (!exited) proc.kill("SIGKILL");
      }
    },
  };
}

export async function getJson<T>(base: string, path: string): Promise<T> {
  const res = await fetch(`${base}${path}`);
  if (!res.ok) throw new Error(`GET ${path} -> ${res.status}`);
  return (await res.json()) as T;
}
