/** Client wiring: documented endpoint paths, bearer headers, verbatim errors. */

import { describe, expect, it } from "vitest";

import { ApiError, ConsoleClient } from "../src/api.js";
import { fakeFetch } from "./helpers.js";

function client(routes: Record<string, any>) {
    const { impl, calls } = fakeFetch(routes);
    return { client: new ConsoleClient({ baseUrl: "http://gate/", token: "sekrit", fetchImpl: impl }), calls };
}

describe("ConsoleClient", () => {
    it("hits the documented read endpoints without auth", async () => {
        const routes = {
            "GET /admin/models": { body: { models: [] } },
            "GET /admin/models/model-id:s.v1/factbox": { body: {} },
            "GET /admin/models/model-id:s.v1/stats?window=500": { body: {} },
            "GET /admin/drift?window=500": { body: {} },
            "GET /admin/clusters": { body: { fitted: false } },
            "GET /admin/rollouts/s": { body: {} },
            "GET /admin/policy": { body: {} },
            "GET /admin/escalations?state=pending": { body: { escalations: [] } },
        };
        const { client: c, calls } = client(routes);
        await c.models();
        await c.factbox("model-id:s.v1");
        await c.stats("model-id:s.v1", 500);
        await c.drift(500);
        await c.clusters();
        await c.rollout("s");
        await c.policy();
        await c.escalations("pending");
        expect(calls.length).toBe(8);
        for (const call of calls) {
            expect(call.method).toBe("GET");
            expect(call.headers["authorization"]).toBeUndefined();
        }
    });

    it("sends the bearer token on every action", async () => {
        const routes = {
            "POST /admin/rollouts/s/promote": { body: {} },
            "POST /admin/rollouts/s/rollback": { body: {} },
            "PUT /admin/policy": { body: { policy: {} } },
            "POST /admin/escalations/esc-000001/resolve": { body: {} },
        };
        const { client: c, calls } = client(routes);
        await c.promote("s");
        await c.rollback("s");
        await c.setPolicy({ canary_fraction: 0.2 });
        await c.resolveEscalation("esc-000001", "pos", "w");
        for (const call of calls) {
            expect(call.headers["authorization"]).toBe("Bearer sekrit");
        }
    });

    it("throws ApiError carrying the server's reason verbatim", async () => {
        const { client: c } = client({
            "POST /admin/rollouts/s/promote": {
                status: 409,
                body: { error: "NoActiveRollout", detail: "service 's' has no active rollout" },
            },
        });
        try {
            await c.promote("s");
            expect.unreachable();
        } catch (error) {
            expect(error).toBeInstanceOf(ApiError);
            const apiError = error as ApiError;
            expect(apiError.status).toBe(409);
            expect(apiError.errorKind).toBe("NoActiveRollout");
            expect(apiError.reason).toBe("service 's' has no active rollout");
        }
    });

    it("trims trailing slashes off the base url", async () => {
        const { client: c, calls } = client({ "GET /admin/models": { body: { models: [] } } });
        await c.models();
        expect(calls[0]!.url).toBe("http://gate/admin/models");
    });
});
