/** Session state machine: one active task, a submit gate that opens only
 * after both renditions have been played, and a session counter with a
 * pairs/hour rate. The server stays the source of truth for everything
 * else. */

import { AnnotationApi, Choice, TaskView } from "./api.js";

export type SessionPhase = "idle" | "listening" | "submitting" | "done";

export interface SessionSnapshot {
  phase: SessionPhase;
  task: TaskView | null;
  playedA: boolean;
  playedB: boolean;
  canSubmit: boolean;
  judged: number;
  pairsPerHour: number | null;
}

export class AnnotationSession {
  private phase: SessionPhase = "idle";
  private task: TaskView | null = null;
  private playedA = false;
  private playedB = false;
  private judged = 0;
  private taskShownAt = 0;
  private firstJudgmentAt: number | null = null;
  private lastJudgmentAt: number | null = null;

  constructor(
    private readonly api: AnnotationApi,
    readonly annotator: string,
    private readonly now: () => number = () => Date.now(),
  ) {
    if (!annotator) throw new Error("annotator id must not be empty");
  }

  snapshot(): SessionSnapshot {
    return {
      phase: this.phase,
      task: this.task,
      playedA: this.playedA,
      playedB: this.playedB,
      canSubmit: this.canSubmit(),
      judged: this.judged,
      pairsPerHour: this.pairsPerHour(),
    };
  }

  /** True once both clips have been played at least once. */
  canSubmit(): boolean {
    return this.phase === "listening" && this.playedA && this.playedB;
  }

  pairsPerHour(): number | null {
    if (
      this.judged < 2 ||
      this.firstJudgmentAt === null ||
      this.lastJudgmentAt === null ||
      this.lastJudgmentAt <= this.firstJudgmentAt
    ) {
      return null;
    }
    const hours = (this.lastJudgmentAt - this.firstJudgmentAt) / 3_600_000;
    return (this.judged - 1) / hours;
  }

  async loadNext(): Promise<TaskView | null> {
    const res = await this.api.nextTask(this.annotator);
    this.task = res.task;
    this.playedA = false;
    this.playedB = false;
    if (this.task === null) {
      this.phase = "done";
    } else {
      this.phase = "listening";
      this.taskShownAt = this.now();
    }
    return this.task;
  }

  markPlayed(which: "A" | "B"): void {
    if (this.phase !== "listening") return;
    if (which === "A") this.playedA = true;
    else this.playedB = true;
  }

  /** Submit a preference; rejected until both clips have been played.
   * Skip is always allowed and does not advance the counter. */
  async choose(choice: Choice): Promise<void> {
    if (this.phase !== "listening" || this.task === null) {
      throw new Error("no active task");
    }
    if (choice !== "skip" && !this.canSubmit()) {
      throw new Error("play both renditions before choosing");
    }
    this.phase = "submitting";
    const decidedMs = this.now() - this.taskShownAt;
    try {
      await this.api.submitJudgment(this.task.task_id, this.annotator, choice, decidedMs);
    } catch (err) {
      this.phase = "listening"; // task not consumed; annotator may retry
      throw err;
    }
    if (choice !== "skip") {
      this.judged += 1;
      const t = this.now();
      if (this.firstJudgmentAt === null) this.firstJudgmentAt = t;
      this.lastJudgmentAt = t;
    }
    await this.loadNext();
  }
}
