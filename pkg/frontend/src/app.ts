/**
 * Review console: claim batches, judge items, resolve flags, finalize.
 *
 * Pure DOM, no framework. All state lives on the server; the only local
 * state is the session's claimed batch and its decision buffer, plus
 * which card is selected for the keyboard shortcuts (a/r/x/f).
 */

import {
  ApiClient,
  ApiError,
  FetchLike,
  FinalizeResult,
  KindCounters,
  NodeKind,
  Polarity,
  QueueItem,
  ReviewStats,
  Verdict,
} from "./api.js";
import { legalEmotions, Role, UiSession, ValidationError } from "./session.js";

const KINDS: NodeKind[] = ["Situation", "Clue", "Thought", "Action", "Emotion"];
const TOPICS = ["School", "Work", "Tourism", "Relationship", "Ordinary Life"];
const POLARITIES: Polarity[] = ["Positive", "Negative"];

export interface AppOptions {
  fetchFn?: FetchLike;
  defaultBaseUrl?: string;
}

interface SituationGroup {
  situation: string | null;
  items: QueueItem[];
}

/** Group claimed items under their situation text, keeping queue order. */
export function groupBySituation(items: QueueItem[]): SituationGroup[] {
  const groups: SituationGroup[] = [];
  const index = new Map<string, SituationGroup>();
  for (const item of items) {
    const key = item.kind === "Situation" ? item.text : item.situation ?? "";
    let group = index.get(key);
    if (!group) {
      group = { situation: key || null, items: [] };
      index.set(key, group);
      groups.push(group);
    }
    group.items.push(item);
  }
  return groups;
}

/** Kept share among decided items of one kind; null before any decision. */
export function perKindRetention(counters: KindCounters): number | null {
  const kept = counters.accepted + counters.revised;
  const decided = kept + counters.rejected;
  return decided > 0 ? kept / decided : null;
}

type ElChild = Node | string;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: ElChild[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [name, value] of Object.entries(attrs)) {
    if (name === "class") node.className = value;
    else if (name === "text") node.textContent = value;
    else node.setAttribute(name, value);
  }
  for (const child of children) {
    node.append(child instanceof Node ? child : document.createTextNode(child));
  }
  return node;
}

export class App {
  session: UiSession | null = null;
  selectedId: string | null = null;
  private api: ApiClient | null = null;
  private activeTab = "queue";
  private lastStats: ReviewStats | null = null;
  private keyHandler: ((event: KeyboardEvent) => void) | null = null;

  constructor(
    private readonly root: HTMLElement,
    private readonly options: AppOptions = {},
  ) {
    this.renderConnect();
  }

  get role(): Role {
    return this.session?.role ?? "annotator";
  }

  // -- plumbing -------------------------------------------------------------

  private status(message: string, isError = false): void {
    const line = this.root.querySelector<HTMLElement>("#status");
    if (line) {
      line.textContent = message;
      line.className = isError ? "status error" : "status";
    }
  }

  private async run(work: () => Promise<void>): Promise<void> {
    try {
      await work();
    } catch (error) {
      if (error instanceof ApiError && error.isStaleClaim) {
        this.status("claim expired; refreshing the batch", true);
        await this.claim();
        return;
      }
      if (error instanceof ApiError || error instanceof ValidationError) {
        this.status(error.message, true);
        return;
      }
      this.status(String(error), true);
    }
  }

  // -- connect screen ---------------------------------------------------------

  private renderConnect(): void {
    const form = el("form", { id: "connect-form", class: "connect" });
    form.append(
      el("h1", { text: "Review console" }),
      el("label", { text: "Server" },
        el("input", { id: "base-url", value: this.options.defaultBaseUrl ?? "http://127.0.0.1:8321" })),
      el("label", { text: "Annotator id" },
        el("input", { id: "annotator-id", autocomplete: "off" })),
      el("label", { text: "Token" },
        el("input", { id: "token", type: "password" })),
      el("label", { class: "inline" },
        el("input", { id: "expert-role", type: "checkbox" }),
        "expert reviewer"),
      el("button", { type: "submit", text: "Connect" }),
      el("p", { id: "status", class: "status" }),
    );
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      const value = (id: string) =>
        form.querySelector<HTMLInputElement>(`#${id}`)?.value.trim() ?? "";
      const expert = form.querySelector<HTMLInputElement>("#expert-role")?.checked;
      void this.run(() =>
        this.connect(value("base-url"), value("token"), value("annotator-id"),
          expert ? "expert" : "annotator"));
    });
    this.root.replaceChildren(form);
  }

  async connect(
    baseUrl: string,
    token: string,
    annotatorId: string,
    role: Role,
  ): Promise<void> {
    if (!baseUrl || !token || !annotatorId) {
      throw new ValidationError("server, annotator id and token are all required");
    }
    const api = new ApiClient(baseUrl, token, this.options.fetchFn);
    const stats = await api.stats();
    this.api = api;
    this.session = new UiSession(api, annotatorId, role);
    this.lastStats = stats;
    this.renderMain();
    this.renderStats(stats);
  }

  // -- main layout ------------------------------------------------------------

  private renderMain(): void {
    const tabs = el("nav", { class: "tabs" });
    const names = this.role === "expert"
      ? ["queue", "flagged", "dashboard"]
      : ["queue", "dashboard"];
    for (const name of names) {
      const button = el("button", {
        class: "tab",
        "data-tab": name,
        text: name,
      });
      button.addEventListener("click", () => this.showTab(name));
      tabs.append(button);
    }
    this.root.replaceChildren(
      el("header", {},
        el("h1", { text: "Review console" }),
        el("span", {
          class: "whoami",
          text: `${this.session?.annotatorId} (${this.role})`,
        }),
        tabs),
      el("p", { id: "status", class: "status" }),
      el("main", {},
        el("section", { id: "tab-queue", class: "tab-body" }),
        el("section", { id: "tab-flagged", class: "tab-body", hidden: "" }),
        el("section", { id: "tab-dashboard", class: "tab-body", hidden: "" })),
    );
    this.renderQueueControls();
    this.renderDashboard();
    if (this.keyHandler) document.removeEventListener("keydown", this.keyHandler);
    this.keyHandler = (event) => this.onKey(event);
    document.addEventListener("keydown", this.keyHandler);
    this.showTab("queue");
  }

  private showTab(name: string): void {
    this.activeTab = name;
    for (const section of this.root.querySelectorAll<HTMLElement>(".tab-body")) {
      section.hidden = section.id !== `tab-${name}`;
    }
    for (const button of this.root.querySelectorAll<HTMLElement>(".tab")) {
      button.classList.toggle("active", button.dataset.tab === name);
    }
    if (name === "flagged") void this.run(() => this.loadFlagged());
    if (name === "dashboard") void this.run(() => this.refreshStats());
  }

  // -- queue tab ----------------------------------------------------------------

  private renderQueueControls(): void {
    const section = this.root.querySelector("#tab-queue");
    if (!section) return;
    const kindSelect = el("select", { id: "filter-kind" },
      el("option", { value: "", text: "any kind" }));
    for (const kind of KINDS) {
      kindSelect.append(el("option", { value: kind, text: kind }));
    }
    const topicSelect = el("select", { id: "filter-topic" },
      el("option", { value: "", text: "any topic" }));
    for (const topic of TOPICS) {
      topicSelect.append(el("option", { value: topic, text: topic }));
    }
    const polaritySelect = el("select", { id: "filter-polarity" },
      el("option", { value: "", text: "any polarity" }));
    for (const polarity of POLARITIES) {
      polaritySelect.append(el("option", { value: polarity, text: polarity }));
    }
    const sizeInput = el("input", { id: "batch-size", type: "number", value: "20", min: "1" });
    const claimButton = el("button", { id: "claim-batch", text: "Claim batch" });
    claimButton.addEventListener("click", () => void this.run(() => this.claim()));
    const flushButton = el("button", { id: "flush-buffer", text: "Submit decisions" });
    flushButton.addEventListener("click", () => void this.run(() => this.flushAndRefresh()));
    section.replaceChildren(
      el("div", { class: "toolbar" },
        kindSelect, topicSelect, polaritySelect, sizeInput, claimButton, flushButton,
        el("span", { id: "buffer-note", class: "muted" })),
      el("p", { class: "muted", text: "shortcuts: a accept, r revise, x reject, f flag" }),
      el("div", { id: "queue-list" }),
    );
  }

  async claim(): Promise<void> {
    const session = this.session;
    if (!session) return;
    const pick = (id: string) =>
      this.root.querySelector<HTMLSelectElement>(`#${id}`)?.value ?? "";
    session.filter = {
      kind: (pick("filter-kind") || undefined) as NodeKind | undefined,
      topic: pick("filter-topic") || undefined,
      polarity: (pick("filter-polarity") || undefined) as Polarity | undefined,
    };
    const size = Number(
      this.root.querySelector<HTMLInputElement>("#batch-size")?.value || "20");
    const items = await session.claimBatch(size);
    this.selectedId = items[0]?.id ?? null;
    this.status(items.length
      ? `claimed ${items.length} item${items.length === 1 ? "" : "s"}`
      : "queue is empty for this filter");
    this.renderQueue();
  }

  private renderQueue(): void {
    const list = this.root.querySelector("#queue-list");
    const session = this.session;
    if (!list || !session) return;
    list.replaceChildren();
    for (const group of groupBySituation(session.batch)) {
      const groupNode = el("div", { class: "situation-group" },
        el("h2", { class: "situation-text", text: group.situation ?? "(no situation)" }));
      for (const item of group.items) {
        groupNode.append(this.renderCard(item));
      }
      list.append(groupNode);
    }
    this.updateBufferNote();
  }

  private renderCard(item: QueueItem): HTMLElement {
    const session = this.session;
    const card = el("article", { class: "card", "data-item": item.id });
    if (item.id === this.selectedId) card.classList.add("selected");
    const buffered = session?.bufferedFor(item.id);
    if (buffered) card.classList.add(`decided-${buffered.verdict.toLowerCase()}`);

    const meta = el("div", { class: "meta" },
      el("span", { class: `badge kind-${item.kind.toLowerCase()}`, text: item.kind }));
    if (item.polarity) {
      meta.append(el("span", {
        class: `badge polarity-${item.polarity.toLowerCase()}`,
        text: item.polarity,
      }));
    }
    if (item.topic) meta.append(el("span", { class: "badge", text: item.topic }));
    if (buffered) {
      meta.append(el("span", { class: "badge verdict", text: buffered.verdict }));
    }
    card.append(meta);
    if (item.thought && (item.kind === "Action" || item.kind === "Emotion")) {
      card.append(el("p", { class: "context", text: `thought: ${item.thought}` }));
    }
    card.append(el("p", { class: "item-text", text: item.text }));
    card.append(this.renderActions(item));
    card.addEventListener("click", () => {
      this.selectedId = item.id;
      for (const other of this.root.querySelectorAll(".card.selected")) {
        other.classList.remove("selected");
      }
      card.classList.add("selected");
    });
    return card;
  }

  private renderActions(item: QueueItem): HTMLElement {
    const actions = el("div", { class: "actions" });
    const accept = el("button", { class: "verdict-accept", text: "Accept" });
    const legal = legalEmotions(item.polarity);
    const acceptable = item.kind !== "Emotion" ||
      legal.some((label) => label.toLowerCase() === item.text.trim().toLowerCase());
    if (!acceptable) {
      accept.disabled = true;
      accept.title = "label is outside the polarity's choice set; revise or reject";
    }
    accept.addEventListener("click", (event) => {
      event.stopPropagation();
      this.applyVerdict(item.id, "Accept");
    });
    const revise = el("button", { class: "verdict-revise", text: "Revise" });
    revise.addEventListener("click", (event) => {
      event.stopPropagation();
      this.toggleEditor(item.id);
    });
    const reject = el("button", { class: "verdict-reject", text: "Reject" });
    reject.addEventListener("click", (event) => {
      event.stopPropagation();
      this.applyVerdict(item.id, "Reject");
    });
    const flag = el("button", { class: "verdict-flag", text: "Flag" });
    flag.addEventListener("click", (event) => {
      event.stopPropagation();
      this.toggleFlagInput(item.id);
    });
    actions.append(accept, revise, reject, flag);

    if (item.kind === "Emotion") {
      const picker = el("select", { class: "emotion-picker", hidden: "" });
      for (const label of legalEmotions(item.polarity)) {
        picker.append(el("option", { value: label, text: label }));
      }
      const save = el("button", { class: "editor-save", text: "Save label", hidden: "" });
      save.addEventListener("click", (event) => {
        event.stopPropagation();
        this.applyVerdict(item.id, "Revise", picker.value);
      });
      actions.append(picker, save);
    } else {
      const editor = el("textarea", { class: "revise-editor", hidden: "" });
      editor.value = item.text;
      const save = el("button", { class: "editor-save", text: "Save revision", hidden: "" });
      save.addEventListener("click", (event) => {
        event.stopPropagation();
        this.applyVerdict(item.id, "Revise", editor.value);
      });
      actions.append(editor, save);
    }
    const reason = el("input", {
      class: "reason-input",
      placeholder: "why flag this?",
      hidden: "",
    });
    const confirmFlag = el("button", { class: "flag-save", text: "Flag it", hidden: "" });
    confirmFlag.addEventListener("click", (event) => {
      event.stopPropagation();
      this.applyVerdict(item.id, "Flag", undefined, reason.value);
    });
    actions.append(reason, confirmFlag);
    return actions;
  }

  private cardOf(itemId: string): HTMLElement | null {
    return this.root.querySelector(`.card[data-item="${itemId}"]`);
  }

  private toggleEditor(itemId: string): void {
    const card = this.cardOf(itemId);
    if (!card) return;
    for (const selector of [".revise-editor", ".emotion-picker", ".editor-save"]) {
      const node = card.querySelector<HTMLElement>(selector);
      if (node) node.hidden = !node.hidden;
    }
  }

  private toggleFlagInput(itemId: string): void {
    const card = this.cardOf(itemId);
    if (!card) return;
    for (const selector of [".reason-input", ".flag-save"]) {
      const node = card.querySelector<HTMLElement>(selector);
      if (node) node.hidden = !node.hidden;
    }
  }

  /** Buffer one verdict; when the whole batch is decided, flush it. */
  applyVerdict(
    itemId: string,
    verdict: Verdict,
    text?: string,
    reason?: string,
  ): Promise<void> {
    const session = this.session;
    if (!session) return Promise.resolve();
    try {
      session.decide(itemId, verdict, text, reason);
    } catch (error) {
      if (error instanceof ValidationError) {
        this.status(error.message, true);
        return Promise.resolve();
      }
      throw error;
    }
    this.status(`${verdict.toLowerCase()} buffered for ${itemId}`);
    this.renderQueue();
    if (session.fullyDecided) {
      return this.run(() => this.flushAndRefresh());
    }
    return Promise.resolve();
  }

  private async flushAndRefresh(): Promise<void> {
    const session = this.session;
    if (!session) return;
    const outcome = await session.flush();
    if (outcome.conflicts > 0) {
      this.status(
        `${outcome.conflicts} claim${outcome.conflicts === 1 ? "" : "s"} went stale; refreshing batch`,
        true);
      await this.claim();
    } else if (outcome.applied > 0) {
      this.status(`submitted ${outcome.applied} decision${outcome.applied === 1 ? "" : "s"}`);
      this.renderQueue();
    }
    await this.refreshStats();
  }

  private updateBufferNote(): void {
    const note = this.root.querySelector("#buffer-note");
    const session = this.session;
    if (note && session) {
      note.textContent = session.bufferedCount
        ? `${session.bufferedCount} of ${session.batch.length} buffered`
        : "";
    }
  }

  private onKey(event: KeyboardEvent): void {
    if (this.activeTab !== "queue" || !this.selectedId) return;
    const target = event.target as HTMLElement | null;
    if (target && ["INPUT", "TEXTAREA", "SELECT"].includes(target.tagName)) return;
    switch (event.key) {
      case "a":
        this.applyVerdict(this.selectedId, "Accept");
        break;
      case "r":
        this.toggleEditor(this.selectedId);
        break;
      case "x":
        this.applyVerdict(this.selectedId, "Reject");
        break;
      case "f":
        this.toggleFlagInput(this.selectedId);
        break;
    }
  }

  // -- flagged tab (experts) ------------------------------------------------------

  async loadFlagged(): Promise<void> {
    const api = this.api;
    const section = this.root.querySelector("#tab-flagged");
    if (!api || !section) return;
    const items = await api.flagged();
    section.replaceChildren(
      el("h2", { text: `${items.length} flagged item${items.length === 1 ? "" : "s"}` }));
    for (const item of items) {
      section.append(this.renderFlaggedCard(item));
    }
  }

  private renderFlaggedCard(item: QueueItem): HTMLElement {
    const card = el("article", { class: "card flagged", "data-item": item.id });
    const meta = el("div", { class: "meta" },
      el("span", { class: `badge kind-${item.kind.toLowerCase()}`, text: item.kind }));
    if (item.polarity) {
      meta.append(el("span", {
        class: `badge polarity-${item.polarity.toLowerCase()}`,
        text: item.polarity,
      }));
    }
    card.append(meta);
    if (item.situation) {
      card.append(el("p", { class: "context", text: `situation: ${item.situation}` }));
    }
    if (item.thought) {
      card.append(el("p", { class: "context", text: `thought: ${item.thought}` }));
    }
    card.append(el("p", { class: "item-text", text: item.text }));

    const controls = el("div", { class: "actions" });
    let relabel: HTMLSelectElement | null = null;
    let editor: HTMLTextAreaElement | null = null;
    if (item.kind === "Emotion") {
      relabel = el("select", { class: "relabel-picker" });
      for (const label of legalEmotions(item.polarity)) {
        relabel.append(el("option", { value: label, text: label }));
      }
      controls.append(relabel);
    } else {
      editor = el("textarea", { class: "revise-editor" });
      editor.value = item.text;
      controls.append(editor);
    }
    const resolveWith = (verdict: Exclude<Verdict, "Flag">) => {
      void this.run(() => this.resolveFlagged(item.id, verdict,
        verdict === "Revise" ? relabel?.value : undefined,
        verdict === "Revise" ? editor?.value : undefined));
    };
    for (const verdict of ["Accept", "Revise", "Reject"] as const) {
      const button = el("button", {
        class: `resolve-${verdict.toLowerCase()}`,
        text: verdict,
      });
      button.addEventListener("click", () => resolveWith(verdict));
      controls.append(button);
    }
    card.append(controls);
    return card;
  }

  async resolveFlagged(
    itemId: string,
    verdict: Exclude<Verdict, "Flag">,
    relabel?: string,
    text?: string,
  ): Promise<void> {
    const api = this.api;
    if (!api) return;
    await api.expertResolve({ item: itemId, verdict, relabel, text });
    this.status(`resolved ${itemId} as ${verdict.toLowerCase()}`);
    await this.loadFlagged();
    await this.refreshStats();
  }

  // -- dashboard --------------------------------------------------------------------

  private renderDashboard(): void {
    const section = this.root.querySelector("#tab-dashboard");
    if (!section) return;
    const refresh = el("button", { id: "refresh-stats", text: "Refresh" });
    refresh.addEventListener("click", () => void this.run(() => this.refreshStats()));
    const finalize = el("button", { id: "finalize", text: "Finalize graph" });
    finalize.addEventListener("click", () => void this.run(() => this.finalize()));
    section.replaceChildren(
      el("div", { class: "toolbar" },
        refresh, finalize,
        el("label", { class: "inline" },
          el("input", { id: "finalize-force", type: "checkbox" }),
          "force (skip pending check)")),
      el("div", { id: "stats-body" }),
      el("div", { id: "finalize-result" }),
    );
  }

  async refreshStats(): Promise<void> {
    const api = this.api;
    if (!api) return;
    this.lastStats = await api.stats();
    this.renderStats(this.lastStats);
  }

  private renderStats(stats: ReviewStats): void {
    const body = this.root.querySelector("#stats-body");
    if (!body) return;
    const table = el("table", { class: "stats-table" });
    const head = el("tr", {});
    for (const title of ["Kind", "Pending", "Accepted", "Revised", "Rejected",
      "Flagged", "Retention"]) {
      head.append(el("th", { text: title }));
    }
    table.append(head);
    for (const kind of KINDS) {
      const counters = stats.by_kind[kind];
      if (!counters) continue;
      const ratio = perKindRetention(counters);
      const row = el("tr", { "data-kind": kind });
      row.append(
        el("td", { text: kind }),
        el("td", { class: "n-pending", text: String(counters.pending) }),
        el("td", { class: "n-accepted", text: String(counters.accepted) }),
        el("td", { class: "n-revised", text: String(counters.revised) }),
        el("td", { class: "n-rejected", text: String(counters.rejected) }),
        el("td", { class: "n-flagged", text: String(counters.flagged) }),
        el("td", {
          class: "n-retention",
          text: ratio === null ? "-" : `${(ratio * 100).toFixed(1)}%`,
        }),
      );
      table.append(row);
    }
    const annotators = el("ul", { class: "annotator-list" });
    for (const [name, count] of Object.entries(stats.by_annotator)) {
      annotators.append(el("li", {
        text: `${name}: ${count} decision${count === 1 ? "" : "s"}`,
      }));
    }
    body.replaceChildren(
      el("p", {
        id: "stats-summary",
        text: `pending ${stats.pending}, flagged ${stats.flagged}` +
          (stats.retention === null
            ? ""
            : `, overall retention ${(stats.retention * 100).toFixed(2)}%`),
      }),
      table,
      el("h3", { text: "Decisions by annotator" }),
      annotators,
    );
  }

  async finalize(): Promise<void> {
    const api = this.api;
    if (!api) return;
    const force =
      this.root.querySelector<HTMLInputElement>("#finalize-force")?.checked ?? false;
    const result = await api.finalize(force);
    this.renderFinalizeResult(result);
    await this.refreshStats();
  }

  private renderFinalizeResult(result: FinalizeResult): void {
    const target = this.root.querySelector("#finalize-result");
    if (!target) return;
    const where = result.written_to ? `, written to ${result.written_to}` : "";
    target.replaceChildren(
      el("p", {
        class: "finalize-summary",
        text: `graph finalized: ${result.nodes} nodes, ${result.chains} chains ` +
          `(${result.stats.chains_positive} positive, ` +
          `${result.stats.chains_negative} negative)${where}`,
      }),
    );
    this.status("finalize complete");
  }
}

export function renderApp(root: HTMLElement, options: AppOptions = {}): App {
  return new App(root, options);
}
