/**
 * Annotator session state: one claimed batch plus a local decision buffer.
 *
 * The buffer never outgrows the batch, and claiming a new batch always
 * flushes the old buffer first, so a page reload can only ever lose the
 * decisions that were still sitting unflushed in the current batch.
 *
 * Client-side checks mirror the server's validation rules so the UI
 * never posts a payload the server is guaranteed to reject.
 */

import {
  ApiClient,
  ApiError,
  Polarity,
  QueueFilter,
  QueueItem,
  Verdict,
} from "./api.js";

export const POSITIVE_EMOTIONS = ["Love", "Surprise", "Joyful"] as const;
export const NEGATIVE_EMOTIONS = ["Sad", "Angry", "Fearful"] as const;
export const ALL_EMOTIONS = [...POSITIVE_EMOTIONS, ...NEGATIVE_EMOTIONS];

export type Role = "annotator" | "expert";

export interface BufferedDecision {
  itemId: string;
  verdict: Verdict;
  text?: string;
  reason?: string;
}

export interface FlushOutcome {
  applied: number;
  conflicts: number;
}

export class ValidationError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ValidationError";
  }
}

/** The labels an emotion item may legally carry, given its polarity. */
export function legalEmotions(polarity: Polarity | null): readonly string[] {
  if (polarity === "Positive") return POSITIVE_EMOTIONS;
  if (polarity === "Negative") return NEGATIVE_EMOTIONS;
  return ALL_EMOTIONS;
}

/** Same normalization the server applies before comparing texts. */
export function normalizeText(text: string): string {
  return text.trim().replace(/\s+/g, " ").toLowerCase();
}

function checkEmotionLabel(item: QueueItem, label: string): void {
  const legal = legalEmotions(item.polarity);
  const match = legal.find((l) => l.toLowerCase() === label.trim().toLowerCase());
  if (!match) {
    throw new ValidationError(
      `"${label}" is not a legal label here; pick one of ${legal.join(", ")}`,
    );
  }
}

/**
 * Validate one verdict against the item it targets. Throws ValidationError
 * with an annotator-readable message instead of letting the server 400.
 */
export function checkDecision(
  item: QueueItem,
  verdict: Verdict,
  text?: string,
  reason?: string,
): BufferedDecision {
  switch (verdict) {
    case "Accept":
      if (item.kind === "Emotion") checkEmotionLabel(item, item.text);
      return { itemId: item.id, verdict };
    case "Reject":
      return { itemId: item.id, verdict };
    case "Flag":
      if (!reason || !reason.trim()) {
        throw new ValidationError("flagging needs a reason for the expert");
      }
      return { itemId: item.id, verdict, reason: reason.trim() };
    case "Revise": {
      if (!text || !text.trim()) {
        throw new ValidationError("a revision needs replacement text");
      }
      if (normalizeText(text) === normalizeText(item.text)) {
        throw new ValidationError("revision text matches the original");
      }
      if (item.kind === "Emotion") checkEmotionLabel(item, text);
      return { itemId: item.id, verdict, text: text.trim() };
    }
  }
}

export class UiSession {
  batch: QueueItem[] = [];
  filter: QueueFilter = {};
  private buffer = new Map<string, BufferedDecision>();

  constructor(
    readonly api: ApiClient,
    readonly annotatorId: string,
    readonly role: Role = "annotator",
  ) {}

  get bufferedCount(): number {
    return this.buffer.size;
  }

  bufferedFor(itemId: string): BufferedDecision | undefined {
    return this.buffer.get(itemId);
  }

  /** Every item in the batch has a buffered verdict. */
  get fullyDecided(): boolean {
    return (
      this.batch.length > 0 &&
      this.batch.every((item) => this.buffer.has(item.id))
    );
  }

  /**
   * Flush any pending decisions, then claim a fresh batch. The flush-first
   * order is what keeps the unflushed buffer bounded at one batch.
   */
  async claimBatch(size = 20): Promise<QueueItem[]> {
    if (this.buffer.size > 0) await this.flush();
    this.batch = await this.api.claimQueue(this.filter, size);
    this.buffer.clear();
    return this.batch;
  }

  /** Validate and buffer a verdict for an item in the current batch. */
  decide(itemId: string, verdict: Verdict, text?: string, reason?: string): void {
    const item = this.batch.find((candidate) => candidate.id === itemId);
    if (!item) {
      throw new ValidationError(`item ${itemId} is not in the claimed batch`);
    }
    this.buffer.set(itemId, checkDecision(item, verdict, text, reason));
  }

  retract(itemId: string): void {
    this.buffer.delete(itemId);
  }

  /**
   * Post buffered decisions in batch order. A stale-claim conflict drops
   * the stale entry and empties the batch so the caller re-claims; other
   * API errors abort the flush with the failing decision still buffered.
   */
  async flush(): Promise<FlushOutcome> {
    const done = new Set<string>();
    let applied = 0;
    let conflicts = 0;
    for (const item of [...this.batch]) {
      const decision = this.buffer.get(item.id);
      if (!decision) continue;
      try {
        await this.api.submitDecision({
          item: decision.itemId,
          verdict: decision.verdict,
          text: decision.text,
          reason: decision.reason,
        });
        applied += 1;
      } catch (error) {
        if (error instanceof ApiError && error.isStaleClaim) {
          conflicts += 1;
        } else {
          throw error;
        }
      }
      this.buffer.delete(item.id);
      done.add(item.id);
    }
    if (conflicts > 0) {
      this.batch = [];
      this.buffer.clear();
    } else {
      this.batch = this.batch.filter((item) => !done.has(item.id));
    }
    return { applied, conflicts };
  }

  async release(): Promise<void> {
    this.buffer.clear();
    this.batch = [];
    await this.api.releaseClaims();
  }
}
