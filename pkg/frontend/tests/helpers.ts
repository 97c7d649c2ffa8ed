/**
 * Mock HTTP layer for the workbench tests: routes are matched by
 * "METHOD path" and every call is recorded for assertion.
 */

import type { FetchLike } from "../src/api.js";

export interface RecordedCall {
  method: string;
  path: string;
  body: unknown;
}

export type Handler = (call: RecordedCall) => { status: number; body: unknown };

export class MockServer {
  calls: RecordedCall[] = [];
  private routes = new Map<string, Handler>();

  on(method: string, path: string, handler: Handler | { status: number; body: unknown }): void {
    const h = typeof handler === "function" ? handler : () => handler;
    this.routes.set(`${method} ${path}`, h);
  }

  fetch: FetchLike = async (url, init) => {
    const method = init?.method ?? "GET";
    const path = url.replace(/^https?:\/\/[^/]+/, "");
    const body = init?.body ? JSON.parse(init.body as string) : undefined;
    const call: RecordedCall = { method, path, body };
    this.calls.push(call);
    const handler = this.routes.get(`${method} ${path}`);
    if (!handler) {
      return new Response(JSON.stringify({ detail: `no route ${method} ${path}` }), {
        status: 404,
        headers: { "content-type": "application/json" },
      });
    }
    const { status, body: responseBody } = handler(call);
    return new Response(JSON.stringify(responseBody), {
      status,
      headers: { "content-type": "application/json" },
    });
  };

  posts(path: string): RecordedCall[] {
    return this.calls.filter((c) => c.method === "POST" && c.path === path);
  }
}

export class FakeClock {
  constructor(public t = 0) {}

  now = (): number => this.t;

  advance(ms: number): void {
    this.t += ms;
  }
}
