/** Typed client for the annotation service HTTP protocol. The client only
 * ever sees renditions labeled A and B; the true model/ground-truth mapping
 * stays server-side. */

export interface TaskView {
  task_id: string;
  guidelines: string[];
  audio_a: string;
  audio_b: string;
}

export interface AnnotatorStats {
  pairs: number;
  pairs_per_hour: number | null;
}

export interface ServiceStats {
  tasks: number;
  judged: number;
  annotators: Record<string, AnnotatorStats>;
}

export interface NextTaskResponse {
  task: TaskView | null;
  stats: ServiceStats;
}

export type Choice = "A" | "B" | "skip";

export interface JudgmentReceipt {
  task_id: string;
  recorded: Choice;
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class AnnotationApi {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  async nextTask(annotator: string): Promise<NextTaskResponse> {
    const url = `${this.baseUrl}/tasks/next?annotator=${encodeURIComponent(annotator)}`;
    return this.json(await this.fetchImpl(url));
  }

  async submitJudgment(
    taskId: string,
    annotator: string,
    choice: Choice,
    decidedMs: number,
  ): Promise<JudgmentReceipt> {
    const res = await this.fetchImpl(`${this.baseUrl}/judgments`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        task_id: taskId,
        annotator,
        choice,
        decided_ms: decidedMs,
      }),
    });
    return this.json(res);
  }

  private async json<T>(res: Response): Promise<T> {
    if (!res.ok) {
      let detail = res.statusText;
      try {
        const body = (await res.json()) as { detail?: unknown };
        if (body.detail !== undefined) detail = JSON.stringify(body.detail);
      } catch {
        /* non-JSON error body; keep statusText */
      }
      throw new ApiError(res.status, detail);
    }
    return (await res.json()) as T;
  }
}
