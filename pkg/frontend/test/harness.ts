/** Spawns the real HTTP service for integration tests.
 *
 * The tests run in a DOM environment whose fetch is aimed at browser
 * semantics, so the harness also provides a plain node transport that
 * satisfies the client's structural fetch type.
 */

import { spawn } from "node:child_process";
import http from "node:http";
import net from "node:net";
import path from "node:path";

import type { FetchInitLike, FetchLike, FetchResponseLike } from "../src/api.js";

export interface ServiceHandle {
  baseUrl: string;
  token: string;
  fetchImpl: FetchLike;
  stop(): Promise<void>;
}

export const nodeFetch: FetchLike = (url: string, init?: FetchInitLike) =>
  new Promise<FetchResponseLike>((resolve, reject) => {
    const req = http.request(url, {
      method: init?.method ?? "GET",
      headers: init?.headers,
    }, (res) => {
      const chunks: Buffer[] = [];
      res.on("data", (chunk: Buffer) => chunks.push(chunk));
      res.on("end", () => {
        const body = Buffer.concat(chunks).toString("utf8");
        const status = res.statusCode ?? 0;
        resolve({
          ok: status >= 200 && status < 300,
          status,
          statusText: res.statusMessage ?? "",
          text: () => Promise.resolve(body),
        });
      });
    });
    req.on("error", reject);
    if (init?.body) req.write(init.body);
    req.end();
  });

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = net.createServer();
    srv.unref();
    srv.on("error", reject);
    srv.listen(0, "127.0.0.1", () => {
      const addr = srv.address();
      if (addr === null || typeof addr === "string") {
        reject(new Error("could not allocate a port"));
        return;
      }
      srv.close(() => resolve(addr.port));
    });
  });
}

const sleep = (ms: number) => new Promise((resolve) => setTimeout(resolve, ms));

export async function startService(): Promise<ServiceHandle> {
  const port = await freePort();
  const token = "test-token";
  const baseUrl = `http://127.0.0.1:${port}`;
  // vitest runs from frontend/, one level below the repository root
  const repoRoot = path.resolve(process.cwd(), "..");
  const program = [
    "import uvicorn",
    "from layoutspace.service import create_app",
    `uvicorn.run(create_app(token=${JSON.stringify(token)}), ` +
      `host="127.0.0.1", port=${port}, log_level="warning")`,
  ].join("\n");

  const proc = spawn("python3", ["-c", program], {
    cwd: repoRoot,
    stdio: ["ignore", "pipe", "pipe"],
  });
  let output = "";
  proc.stdout.on("data", (chunk: Buffer) => { output += chunk.toString(); });
  proc.stderr.on("data", (chunk: Buffer) => { output += chunk.toString(); });
  let exited = false;
  proc.on("exit", () => { exited = true; });

  const deadline = Date.now() + 30_000;
  for (;;) {
    if (exited) throw new Error(`service exited during startup:\n${output}`);
    try {
      const resp = await nodeFetch(`${baseUrl}/health`);
      if (resp.ok) break;
    } catch {
      // not listening yet
    }
    if (Date.now() > deadline) {
      proc.kill("SIGKILL");
      throw new Error(`service did not come up within 30s:\n${output}`);
    }
    await sleep(100);
  }

  return {
    baseUrl,
    token,
    fetchImpl: nodeFetch,
    stop: async () => {
      if (exited) return;
      const gone = new Promise<void>((resolve) => proc.on("exit", () => resolve()));
      proc.kill("SIGTERM");
      await Promise.race([gone, sleep(5_000)]);
      if (!exited) {
        proc.kill("SIGKILL");
        await gone;
      }
    },
  };
}
