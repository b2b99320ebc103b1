import { readFileSync } from "node:fs";
import type { FetchLike } from "../src/api.js";

export function fixture<T>(name: string): T {
    const url = new URL(`../fixtures/${name}.json`, import.meta.url);
    return JSON.parse(readFileSync(url, "utf-8")) as T;
}

export interface RecordedCall {
    url: string;
    method: string;
    headers: Record<string, string>;
    body: unknown;
}

export interface FakeRoute {
    status?: number;
    body: unknown;
}

/** Fetch double keyed by "METHOD path" (query string included). */
export function fakeFetch(routes: Record<string, FakeRoute | (() => FakeRoute)>) {
    const calls: RecordedCall[] = [];
    const impl: FetchLike = async (url, init) => {
        const method = init?.method ?? "GET";
        const path = url.replace(/^https?:\/\/[^/]+/, "");
        calls.push({
            url,
            method,
            headers: init?.headers ?? {},
            body: init?.body ? JSON.parse(init.body) : undefined,
        });
        const route = routes[`${method} ${path}`];
        if (!route) {
            return { status: 404, json: async () => ({ error: "not_found", detail: path }) };
        }
        const resolved = typeof route === "function" ? route() : route;
        return { status: resolved.status ?? 200, json: async () => resolved.body };
    };
    return { impl, calls };
}
