import { beforeEach, describe, expect, it } from "vitest";
import { AnnotationApi, Choice, TaskView } from "../src/api.js";
import { AnnotationSession } from "../src/session.js";

/** In-memory stand-in for the annotation service, speaking the same HTTP
 * protocol through a fake fetch. */
class FakeService {
  tasks: TaskView[];
  judgments: Array<{ task_id: string; annotator: string; choice: Choice; decided_ms: number }> =
    [];
  failNext = false;

  constructor(n: number) {
    this.tasks = Array.from({ length: n }, (_, i) => ({
      task_id: `t${String(i).padStart(3, "0")}`,
      guidelines: ["naturalness", "abnormal pausing", "prosodic similarity"],
      audio_a: `/media/${i}_x.wav`,
      audio_b: `/media/${i}_y.wav`,
    }));
  }

  api(): AnnotationApi {
    return new AnnotationApi("", async (url, init) => {
      if (url.startsWith("/tasks/next")) {
        const task = this.tasks.length > 0 ? this.tasks[0] : null;
        return this.json({ task, stats: { tasks: 0, judged: 0, annotators: {} } });
      }
      if (url === "/judgments") {
        if (this.failNext) {
          this.failNext = false;
          return this.json({ detail: "conflict" }, 409);
        }
        const body = JSON.parse(init!.body as string);
        this.judgments.push(body);
        if (body.choice === "skip") {
          // skipped tasks go back to the pool for other annotators; this
          // annotator will not see it again
          this.tasks.shift();
        } else {
          this.tasks.shift();
        }
        return this.json({ task_id: body.task_id, recorded: body.choice });
      }
      return this.json({ detail: "not found" }, 404);
    });
  }

  private json(body: unknown, status = 200): Response {
    return new Response(JSON.stringify(body), { status });
  }
}

describe("AnnotationSession", () => {
  let svc: FakeService;
  let session: AnnotationSession;
  let clock: number;

  beforeEach(() => {
    svc = new FakeService(3);
    clock = 1_000_000;
    session = new AnnotationSession(svc.api(), "ann", () => clock);
  });

  it("rejects an empty annotator id", () => {
    expect(() => new AnnotationSession(svc.api(), "")).toThrow();
  });

  it("gates submission until both clips have been played", async () => {
    await session.loadNext();
    expect(session.canSubmit()).toBe(false);
    await expect(session.choose("A")).rejects.toThrow(/play both/i);
    session.markPlayed("A");
    expect(session.canSubmit()).toBe(false);
    session.markPlayed("B");
    expect(session.canSubmit()).toBe(true);
    await session.choose("A");
    expect(svc.judgments).toHaveLength(1);
    expect(svc.judgments[0].choice).toBe("A");
  });

  it("allows skip without playing and keeps the counter unchanged", async () => {
    await session.loadNext();
    await session.choose("skip");
    expect(svc.judgments[0].choice).toBe("skip");
    expect(session.snapshot().judged).toBe(0);
  });

  it("auto-advances to the next task after judging", async () => {
    await session.loadNext();
    const first = session.snapshot().task!.task_id;
    session.markPlayed("A");
    session.markPlayed("B");
    await session.choose("B");
    const snap = session.snapshot();
    expect(snap.task!.task_id).not.toBe(first);
    expect(snap.playedA).toBe(false);
    expect(snap.playedB).toBe(false);
    expect(snap.judged).toBe(1);
  });

  it("reports decided_ms from task display to choice", async () => {
    await session.loadNext();
    clock += 4200;
    session.markPlayed("A");
    session.markPlayed("B");
    await session.choose("A");
    expect(svc.judgments[0].decided_ms).toBe(4200);
  });

  it("computes pairs/hour from judgment spacing", async () => {
    await session.loadNext();
    for (const choice of ["A", "B", "A"] as const) {
      session.markPlayed("A");
      session.markPlayed("B");
      await session.choose(choice);
      clock += 60_000; // one judgment per minute
    }
    const rate = session.snapshot().pairsPerHour!;
    expect(rate).toBeCloseTo(60, 0);
    expect(session.snapshot().phase).toBe("done");
  });

  it("keeps the task on submission failure so the annotator can retry", async () => {
    await session.loadNext();
    const id = session.snapshot().task!.task_id;
    session.markPlayed("A");
    session.markPlayed("B");
    svc.failNext = true;
    await expect(session.choose("A")).rejects.toThrow();
    const snap = session.snapshot();
    expect(snap.phase).toBe("listening");
    expect(snap.task!.task_id).toBe(id);
    await session.choose("A"); // retry succeeds
    expect(svc.judgments).toHaveLength(1);
  });

  it("finishes a full 3-task session and ends in done", async () => {
    await session.loadNext();
    while (session.snapshot().phase === "listening") {
      session.markPlayed("A");
      session.markPlayed("B");
      await session.choose("A");
    }
    expect(session.snapshot().phase).toBe("done");
    expect(svc.judgments.filter((j) => j.choice !== "skip")).toHaveLength(3);
    expect(session.snapshot().judged).toBe(3);
  });
});
