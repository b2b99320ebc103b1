/**
 * Operator action dispatch with a confirmation gate.
 *
 * Destructive kinds (promote, rollback) are held in a pending state until the
 * operator explicitly confirms; nothing reaches the wire before that. Server
 * rejections surface verbatim.
 */

import { ApiError } from "./api.js";

export type ActionKind = "promote" | "rollback" | "set_policy" | "resolve_escalation";

const DESTRUCTIVE: ReadonlySet<ActionKind> = new Set(["promote", "rollback"]);

export interface ActionRequest {
    kind: ActionKind;
    payload: Record<string, unknown>;
}

export type ActionResult =
    | { status: "awaiting_confirmation"; pending: ActionRequest }
    | { status: "dispatched"; response: unknown }
    | { status: "rejected"; httpStatus: number; reason: string; errorKind: string };

export type ActionExecutor = (request: ActionRequest) => Promise<unknown>;

export class ActionDispatcher {
    private pendingAction: ActionRequest | null = null;
    /** Every request that actually went out, in order (used by tests). */
    readonly dispatched: ActionRequest[] = [];

    constructor(private readonly executor: ActionExecutor) {}

    get pending(): ActionRequest | null {
        return this.pendingAction;
    }

    /** Destructive actions park here until confirm(); the rest go straight out. */
    async request(kind: ActionKind, payload: Record<string, unknown> = {}): Promise<ActionResult> {
        const action: ActionRequest = { kind, payload };
        if (DESTRUCTIVE.has(kind)) {
            this.pendingAction = action;
            return { status: "awaiting_confirmation", pending: action };
        }
        return this.dispatch(action);
    }

    async confirm(): Promise<ActionResult> {
        if (this.pendingAction === null) {
            throw new Error("no action awaiting confirmation");
        }
        const action = this.pendingAction;
        this.pendingAction = null;
        return this.dispatch(action);
    }

    cancel(): void {
        this.pendingAction = null;
    }

    private async dispatch(action: ActionRequest): Promise<ActionResult> {
        try {
            this.dispatched.push(action);
            const response = await this.executor(action);
            return { status: "dispatched", response };
        } catch (error) {
            if (error instanceof ApiError) {
                return {
                    status: "rejected",
                    httpStatus: error.status,
                    reason: error.reason,
                    errorKind: error.errorKind,
                };
            }
            throw error;
        }
    }
}
