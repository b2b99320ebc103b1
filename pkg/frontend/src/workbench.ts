/**
 * Case-worker escalation queue: list pending items, enter or pick a label,
 * resolve. Losing a resolution race shows an AlreadyResolved banner; either
 * way the item leaves the queue on the next refresh.
 */

import { ApiError, ConsoleClient } from "./api.js";
import { buildEscalationRows, EscalationRow } from "./viewmodels.js";

export const EMPTY_QUEUE_MESSAGE = "no pending cases";

export interface WorkbenchState {
    rows: EscalationRow[];
    banner: string | null;
    emptyMessage: string | null;
}

export class EscalationWorkbench {
    state: WorkbenchState = { rows: [], banner: null, emptyMessage: EMPTY_QUEUE_MESSAGE };

    constructor(
        private readonly client: ConsoleClient,
        private readonly worker: string,
    ) {}

    async refresh(): Promise<WorkbenchState> {
        const payload = await this.client.escalations("pending");
        const rows = buildEscalationRows(payload);
        this.state = {
            rows,
            banner: this.state.banner,
            emptyMessage: rows.length === 0 ? EMPTY_QUEUE_MESSAGE : null,
        };
        return this.state;
    }

    async resolve(id: string, label: string): Promise<WorkbenchState> {
        try {
            await this.client.resolveEscalation(id, label, this.worker);
            this.state.banner = null;
        } catch (error) {
            if (error instanceof ApiError && error.errorKind === "AlreadyResolved") {
                this.state.banner = `AlreadyResolved: ${error.reason}`;
            } else if (error instanceof ApiError) {
                this.state.banner = `${error.errorKind}: ${error.reason}`;
            } else {
                throw error;
            }
        }
        return this.refresh();
    }

    dismissBanner(): void {
        this.state.banner = null;
    }
}
