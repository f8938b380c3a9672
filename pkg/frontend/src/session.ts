// Session flow state machine, kept free of DOM so it can be unit tested.
// One controller instance drives a whole reader session: fetch next pair,
// collect a selection, require an explicit confirm, submit exactly once
// per pair, advance until the server reports the session done.

import type { Choice, NextResponse, SubmitResult } from "./api.js";
import { isDone } from "./api.js";

export interface TrialView {
  pairId: string;
  leftUrl: string;
  rightUrl: string;
  answered: number;
  total: number;
}

export type SessionState =
  | { phase: "loading" }
  | { phase: "trial"; trial: TrialView; selected: Choice | null; lastError: string | null }
  | { phase: "submitting"; trial: TrialView; selected: Choice }
  | { phase: "image-error"; trial: TrialView }
  | { phase: "done"; answered: number; total: number }
  | { phase: "fatal"; message: string };

export interface SessionDeps {
  fetchNext(reader: string): Promise<NextResponse>;
  submitChoice(
    reader: string,
    pairId: string,
    choice: Choice,
    elapsedMs: number,
  ): Promise<SubmitResult>;
  now(): number;
  onState(state: SessionState): void;
}

export class SessionController {
  private state: SessionState = { phase: "loading" };
  private shownAt = 0;
  private submitted = new Set<string>();

  constructor(
    readonly reader: string,
    private readonly deps: SessionDeps,
  ) {}

  current(): SessionState {
    return this.state;
  }

  private setState(next: SessionState): void {
    this.state = next;
    this.deps.onState(next);
  }

  async start(): Promise<void> {
    await this.loadNext();
  }

  private async loadNext(): Promise<void> {
    this.setState({ phase: "loading" });
    let resp: NextResponse;
    try {
      resp = await this.deps.fetchNext(this.reader);
    } catch (err) {
      this.setState({ phase: "fatal", message: String(err) });
      return;
    }
    if (isDone(resp)) {
      this.setState({ phase: "done", answered: resp.answered, total: resp.total });
      return;
    }
    this.shownAt = this.deps.now();
    this.setState({
      phase: "trial",
      trial: {
        pairId: resp.pair_id,
        leftUrl: resp.left,
        rightUrl: resp.right,
        answered: resp.answered,
        total: resp.total,
      },
      selected: null,
      lastError: null,
    });
  }

  select(choice: Choice): void {
    if (this.state.phase !== "trial") return;
    this.setState({ ...this.state, selected: choice, lastError: null });
  }

  clearSelection(): void {
    if (this.state.phase !== "trial") return;
    this.setState({ ...this.state, selected: null });
  }

  imagesFailed(): void {
    if (this.state.phase !== "trial") return;
    this.setState({ phase: "image-error", trial: this.state.trial });
  }

  retryImages(): void {
    if (this.state.phase !== "image-error") return;
    this.setState({
      phase: "trial",
      trial: this.state.trial,
      selected: null,
      lastError: null,
    });
  }

  async confirm(): Promise<void> {
    if (this.state.phase !== "trial" || this.state.selected === null) return;
    const { trial, selected } = this.state;
    if (this.submitted.has(trial.pairId)) {
      // a store already succeeded for this pair; never write twice
      await this.loadNext();
      return;
    }
    this.setState({ phase: "submitting", trial, selected });
    let result: SubmitResult;
    try {
      result = await this.deps.submitChoice(
        this.reader,
        trial.pairId,
        selected,
        this.deps.now() - this.shownAt,
      );
    } catch (err) {
      // network drop: keep the trial (and the selection) so the reader can
      // retry; the pair id makes the retried POST idempotent server-side
      this.setState({ phase: "trial", trial, selected, lastError: String(err) });
      return;
    }
    if (result === "stored" || result === "already-answered") {
      this.submitted.add(trial.pairId);
    }
    await this.loadNext();
  }
}
