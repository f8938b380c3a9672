import { describe, expect, it } from "vitest";

import type { NextResponse, SubmitResult } from "../src/api.js";
import { SessionController, type SessionState } from "../src/session.js";

interface Script {
  next: NextResponse[];
  submit?: (pairId: string) => Promise<SubmitResult>;
}

function trial(id: string, answered: number, total: number): NextResponse {
  return {
    pair_id: id,
    left: `/img/tok-${id}-l`,
    right: `/img/tok-${id}-r`,
    answered,
    total,
  };
}

const done = (answered: number, total: number): NextResponse => ({
  done: true,
  answered,
  total,
});

function harness(script: Script) {
  const states: SessionState[] = [];
  const submits: Array<{ pairId: string; choice: string; elapsedMs: number }> = [];
  let cursor = 0;
  let clock = 1000;
  const controller = new SessionController("reader-1", {
    fetchNext: async () => {
      const resp = script.next[cursor];
      if (!resp) throw new Error("script exhausted");
      cursor += 1;
      return resp;
    },
    submitChoice: async (_reader, pairId, choice, elapsedMs) => {
      submits.push({ pairId, choice, elapsedMs });
      return script.submit ? script.submit(pairId) : "stored";
    },
    now: () => (clock += 50),
    onState: (s) => states.push(s),
  });
  return { controller, states, submits };
}

describe("session flow", () => {
  it("answers every pair exactly once and finishes", async () => {
    const { controller, states, submits } = harness({
      next: [trial("p1", 0, 2), trial("p2", 1, 2), done(2, 2)],
    });
    await controller.start();
    controller.select("A");
    await controller.confirm();
    controller.select("B");
    await controller.confirm();

    expect(submits).toEqual([
      { pairId: "p1", choice: "A", elapsedMs: expect.any(Number) },
      { pairId: "p2", choice: "B", elapsedMs: expect.any(Number) },
    ]);
    const final = states[states.length - 1];
    expect(final).toEqual({ phase: "done", answered: 2, total: 2 });
  });

  it("requires a selection and an explicit confirm", async () => {
    const { controller, submits } = harness({ next: [trial("p1", 0, 1), done(1, 1)] });
    await controller.start();
    await controller.confirm(); // nothing selected: must be a no-op
    expect(submits).toHaveLength(0);
    expect(controller.current().phase).toBe("trial");
    controller.select("B");
    controller.clearSelection();
    await controller.confirm();
    expect(submits).toHaveLength(0);
    controller.select("B");
    await controller.confirm();
    expect(submits).toHaveLength(1);
  });

  it("records response time from trial display to confirm", async () => {
    const { controller, submits } = harness({ next: [trial("p1", 0, 1), done(1, 1)] });
    await controller.start();
    controller.select("A");
    await controller.confirm();
    expect(submits[0]!.elapsedMs).toBeGreaterThan(0);
  });

  it("treats a conflict as already answered and advances", async () => {
    const { controller, states, submits } = harness({
      next: [trial("p1", 0, 1), done(1, 1)],
      submit: async () => "already-answered",
    });
    await controller.start();
    controller.select("A");
    await controller.confirm();
    expect(submits).toHaveLength(1);
    expect(states[states.length - 1]!.phase).toBe("done");
  });

  it("keeps the trial and selection on network failure, retry is idempotent", async () => {
    let calls = 0;
    const { controller, submits } = harness({
      next: [trial("p1", 0, 1), done(1, 1)],
      submit: async () => {
        calls += 1;
        if (calls === 1) throw new Error("connection reset");
        return "stored";
      },
    });
    await controller.start();
    controller.select("B");
    await controller.confirm();
    const after = controller.current();
    expect(after.phase).toBe("trial");
    if (after.phase === "trial") {
      expect(after.selected).toBe("B");
      expect(after.lastError).toContain("connection reset");
    }
    await controller.confirm(); // retry with the same pair id
    expect(submits.map((s) => s.pairId)).toEqual(["p1", "p1"]);
    expect(controller.current().phase).toBe("done");
  });

  it("never posts twice for a pair that was already stored", async () => {
    const { controller, submits } = harness({
      next: [trial("p1", 0, 1), trial("p1", 0, 1), done(1, 1)],
    });
    await controller.start();
    controller.select("A");
    await controller.confirm();
    // server hands the same pair back (e.g. stale read): confirm must not re-post
    controller.select("B");
    await controller.confirm();
    expect(submits).toHaveLength(1);
  });

  it("shows completion immediately for a zero-pair manifest", async () => {
    const { controller, states } = harness({ next: [done(0, 0)] });
    await controller.start();
    expect(states).toEqual([{ phase: "loading" }, { phase: "done", answered: 0, total: 0 }]);
  });

  it("offers retry when images fail, without skipping the pair", async () => {
    const { controller, submits } = harness({ next: [trial("p1", 0, 1), done(1, 1)] });
    await controller.start();
    controller.imagesFailed();
    expect(controller.current().phase).toBe("image-error");
    controller.retryImages();
    const state = controller.current();
    expect(state.phase).toBe("trial");
    if (state.phase === "trial") expect(state.trial.pairId).toBe("p1");
    expect(submits).toHaveLength(0);
  });

  it("surfaces server unavailability as a fatal state", async () => {
    const states: SessionState[] = [];
    const controller = new SessionController("r", {
      fetchNext: async () => {
        throw new Error("ECONNREFUSED");
      },
      submitChoice: async () => "stored",
      now: () => 0,
      onState: (s) => states.push(s),
    });
    await controller.start();
    expect(states[states.length - 1]).toMatchObject({ phase: "fatal" });
  });

  it("exposes only tokens and counters to the view layer", async () => {
    const { controller } = harness({ next: [trial("p1", 3, 9), done(9, 9)] });
    await controller.start();
    const state = controller.current();
    expect(state.phase).toBe("trial");
    if (state.phase === "trial") {
      const serialized = JSON.stringify(state);
      for (const needle of ["kind", "theta", "psnr", "nrq", ".png"]) {
        expect(serialized).not.toContain(needle);
      }
      expect(state.trial.leftUrl).toMatch(/^\/img\//);
      expect(state.trial.answered).toBe(3);
      expect(state.trial.total).toBe(9);
    }
  });
});
