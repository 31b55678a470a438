/** DOM wiring for the single-page annotation client. All decision logic
 * lives in AnnotationSession; this file only renders state and forwards
 * events. */

import { AnnotationApi } from "./api.js";
import { AnnotationSession } from "./session.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export function start(): void {
  const params = new URLSearchParams(window.location.search);
  const annotator = params.get("annotator") ?? "";
  if (!annotator) {
    el<HTMLElement>("status").textContent =
      "Add ?annotator=<your-id> to the URL to begin.";
    return;
  }

  const api = new AnnotationApi("");
  const session = new AnnotationSession(api, annotator);

  const audioA = el<HTMLAudioElement>("audio-a");
  const audioB = el<HTMLAudioElement>("audio-b");
  const btnA = el<HTMLButtonElement>("choose-a");
  const btnB = el<HTMLButtonElement>("choose-b");
  const btnSkip = el<HTMLButtonElement>("choose-skip");
  const status = el<HTMLElement>("status");
  const counter = el<HTMLElement>("counter");
  const guidelines = el<HTMLElement>("guidelines");

  function render(): void {
    const s = session.snapshot();
    btnA.disabled = btnB.disabled = !s.canSubmit;
    btnSkip.disabled = s.phase !== "listening";
    const rate = s.pairsPerHour;
    counter.textContent =
      `${s.judged} judged this session` +
      (rate !== null ? ` · ${rate.toFixed(1)} pairs/hour` : "");
    if (s.phase === "done") {
      status.textContent = "No more tasks. Thank you!";
      audioA.removeAttribute("src");
      audioB.removeAttribute("src");
    } else if (s.task) {
      status.textContent = s.canSubmit
        ? "Pick the better rendition."
        : "Play both clips to unlock the buttons.";
      guidelines.textContent = `Judge by: ${s.task.guidelines.join(", ")}.`;
      if (audioA.getAttribute("src") !== s.task.audio_a) audioA.src = s.task.audio_a;
      if (audioB.getAttribute("src") !== s.task.audio_b) audioB.src = s.task.audio_b;
    }
  }

  audioA.addEventListener("ended", () => {
    session.markPlayed("A");
    render();
  });
  audioB.addEventListener("ended", () => {
    session.markPlayed("B");
    render();
  });
  audioA.addEventListener("error", () => {
    status.textContent = "Clip A failed to load — press play to retry.";
  });
  audioB.addEventListener("error", () => {
    status.textContent = "Clip B failed to load — press play to retry.";
  });

  const submit = (choice: "A" | "B" | "skip") => {
    session
      .choose(choice)
      .then(render)
      .catch((err: unknown) => {
        status.textContent = `Not recorded: ${String(err)}`;
        render();
      });
  };
  btnA.addEventListener("click", () => submit("A"));
  btnB.addEventListener("click", () => submit("B"));
  btnSkip.addEventListener("click", () => submit("skip"));
  document.addEventListener("keydown", (ev) => {
    if (ev.key === "a" && !btnA.disabled) submit("A");
    else if (ev.key === "b" && !btnB.disabled) submit("B");
    else if (ev.key === "s" && !btnSkip.disabled) submit("skip");
  });

  session.loadNext().then(render).catch((err: unknown) => {
    status.textContent = `Could not reach the service: ${String(err)}`;
  });
}

if (typeof document !== "undefined" && document.getElementById("audio-a")) {
  start();
}
