/** Confirmation gate: destructive actions never dispatch before confirm(). */

import { describe, expect, it } from "vitest";

import { ActionDispatcher, ActionRequest } from "../src/actions.js";
import { ApiError } from "../src/api.js";

function dispatcherWith(executor?: (a: ActionRequest) => Promise<unknown>) {
    const sent: ActionRequest[] = [];
    const dispatcher = new ActionDispatcher(async (action) => {
        sent.push(action);
        return executor ? executor(action) : { ok: true };
    });
    return { dispatcher, sent };
}

describe("ActionDispatcher", () => {
    it("rollback requires explicit confirmation before anything is sent", async () => {
        const { dispatcher, sent } = dispatcherWith();
        const result = await dispatcher.request("rollback");
        expect(result.status).toBe("awaiting_confirmation");
        expect(sent).toEqual([]);

        const confirmed = await dispatcher.confirm();
        expect(confirmed.status).toBe("dispatched");
        expect(sent).toEqual([{ kind: "rollback", payload: {} }]);
    });

    it("promote also gates on confirmation", async () => {
        const { dispatcher, sent } = dispatcherWith();
        await dispatcher.request("promote");
        expect(sent).toEqual([]);
        await dispatcher.confirm();
        expect(sent.length).toBe(1);
    });

    it("cancel drops the pending action entirely", async () => {
        const { dispatcher, sent } = dispatcherWith();
        await dispatcher.request("rollback");
        dispatcher.cancel();
        expect(dispatcher.pending).toBeNull();
        await expect(dispatcher.confirm()).rejects.toThrow("no action awaiting confirmation");
        expect(sent).toEqual([]);
    });

    it("non-destructive actions dispatch immediately", async () => {
        const { dispatcher, sent } = dispatcherWith();
        const result = await dispatcher.request("set_policy", { canary_fraction: 0.2 });
        expect(result.status).toBe("dispatched");
        expect(sent).toEqual([{ kind: "set_policy", payload: { canary_fraction: 0.2 } }]);
    });

    it("server rejections surface the reason verbatim", async () => {
        const { dispatcher } = dispatcherWith(async () => {
            throw new ApiError(409, "shadow -> full is not a legal stage transition", "IllegalTransition");
        });
        await dispatcher.request("promote");
        const result = await dispatcher.confirm();
        expect(result).toEqual({
            status: "rejected",
            httpStatus: 409,
            reason: "shadow -> full is not a legal stage transition",
            errorKind: "IllegalTransition",
        });
    });

    it("confirm dispatches exactly once per request", async () => {
        const { dispatcher, sent } = dispatcherWith();
        await dispatcher.request("rollback");
        await dispatcher.confirm();
        await expect(dispatcher.confirm()).rejects.toThrow();
        expect(sent.length).toBe(1);
    });
});
