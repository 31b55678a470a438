"""Preference-annotation backend: dispenses blinded A/B duration renditions,
records one judgment per (task, annotator), and exports winner/loser pairs
in the same JSONL schema the preference trainer consumes."""

from __future__ import annotations

import json
import sqlite3
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

GUIDELINES = ["naturalness", "abnormal pausing", "prosodic similarity"]


@dataclass
class Rendition:
    durations: list[int]
    media: str = ""  # path to rendered audio/mel for playback


@dataclass
class CandidatePair:
    id: str
    phonemes: list[int]
    prompt_phonemes: list[int]
    prompt_durations: list[int]
    ref_mel_path: str
    rendition_1: Rendition  # by convention rendition_1 is the model output
    rendition_2: Rendition
    source: str = "human"


class ConflictError(RuntimeError):
    pass


class UnknownAnnotatorError(KeyError):
    pass


_SCHEMA = """
CREATE TABLE IF NOT EXISTS tasks (
    id TEXT PRIMARY KEY,
    payload TEXT NOT NULL,         -- CandidatePair fields as JSON
    a_is_first INTEGER NOT NULL,   -- hidden A/B mapping, server-side only
    status TEXT NOT NULL DEFAULT 'pending',
    assigned_to TEXT
);
CREATE TABLE IF NOT EXISTS judgments (
    task_id TEXT NOT NULL,
    annotator TEXT NOT NULL,
    choice TEXT NOT NULL,
    decided_ms REAL NOT NULL DEFAULT 0,
    created_at REAL NOT NULL,
    PRIMARY KEY (task_id, annotator)
);
CREATE TABLE IF NOT EXISTS annotators (
    id TEXT PRIMARY KEY,
    registered_at REAL NOT NULL
);
"""


class AnnotationStore:
    """Single-file store; assignment and judgment are serialized through one
    connection-level lock so concurrent annotators never share a task."""

    def __init__(self, path: str | Path, seed: int = 0):
        self._lock = threading.Lock()
        self._conn = sqlite3.connect(str(path), check_same_thread=False)
        self._conn.executescript(_SCHEMA)
        self._conn.commit()
        import random
        self._rng = random.Random(seed)

    def close(self):
        self._conn.close()

    # -- annotators ---------------------------------------------------------

    def register(self, annotator: str):
        if not annotator:
            raise UnknownAnnotatorError("empty annotator id")
        with self._lock:
            self._conn.execute(
                "INSERT OR IGNORE INTO annotators (id, registered_at) VALUES (?, ?)",
                (annotator, time.time()))
            self._conn.commit()

    # -- import -------------------------------------------------------------

    def import_candidates(self, candidates: list[CandidatePair],
                          prefilter=None) -> dict:
        """Creates pending tasks with a randomized hidden A/B order.
        Re-importing an existing id is a no-op (idempotent)."""
        created, skipped, filtered = [], [], []
        for c in candidates:
            if prefilter is not None:
                reason = prefilter(c)
                if reason:
                    filtered.append({"id": c.id, "reason": reason})
                    continue
            payload = json.dumps({
                "id": c.id, "phonemes": c.phonemes,
                "prompt_phonemes": c.prompt_phonemes,
                "prompt_durations": c.prompt_durations,
                "ref_mel_path": c.ref_mel_path,
                "rendition_1": {"durations": c.rendition_1.durations,
                                "media": c.rendition_1.media},
                "rendition_2": {"durations": c.rendition_2.durations,
                                "media": c.rendition_2.media},
                "source": c.source})
            with self._lock:
                cur = self._conn.execute("SELECT 1 FROM tasks WHERE id = ?", (c.id,))
                if cur.fetchone():
                    skipped.append(c.id)
                    continue
                self._conn.execute(
                    "INSERT INTO tasks (id, payload, a_is_first) VALUES (?, ?, ?)",
                    (c.id, payload, int(self._rng.random() < 0.5)))
                self._conn.commit()
            created.append(c.id)
        return {"created": created, "skipped": skipped, "filtered": filtered}

    # -- assignment ---------------------------------------------------------

    def next_task(self, annotator: str) -> dict | None:
        """Atomically hands one pending task to the annotator; sticky until
        judged or skipped; None once nothing eligible remains."""
        self._require_annotator(annotator)
        with self._lock:
            cur = self._conn.execute(
                "SELECT id, payload FROM tasks WHERE status = 'assigned' "
                "AND assigned_to = ?", (annotator,))
            row = cur.fetchone()
            if row is None:
                cur = self._conn.execute(
                    "SELECT id, payload FROM tasks WHERE status = 'pending' "
                    "AND id NOT IN (SELECT task_id FROM judgments WHERE annotator = ?) "
                    "ORDER BY id LIMIT 1", (annotator,))
                row = cur.fetchone()
                if row is None:
                    return None
                self._conn.execute(
                    "UPDATE tasks SET status = 'assigned', assigned_to = ? WHERE id = ?",
                    (annotator, row[0]))
                self._conn.commit()
        payload = json.loads(row[1])
        return self._task_view(row[0], payload)

    def _task_view(self, task_id: str, payload: dict) -> dict:
        # the true rendition identity stays server-side; the client only
        # ever sees A and B
        cur = self._conn.execute("SELECT a_is_first FROM tasks WHERE id = ?", (task_id,))
        a_first = bool(cur.fetchone()[0])
        r1, r2 = payload["rendition_1"], payload["rendition_2"]
        a, b = (r1, r2) if a_first else (r2, r1)
        return {"task_id": task_id, "guidelines": GUIDELINES,
                "audio_a": a["media"], "audio_b": b["media"]}

    # -- judgment -----------------------------------------------------------

    def submit_judgment(self, task_id: str, annotator: str, choice: str,
                        decided_ms: float = 0.0) -> dict:
        if choice not in ("A", "B", "skip"):
            raise ValueError(f"invalid choice {choice!r}")
        self._require_annotator(annotator)
        with self._lock:
            cur = self._conn.execute(
                "SELECT status, assigned_to FROM tasks WHERE id = ?", (task_id,))
            row = cur.fetchone()
            if row is None:
                raise KeyError(f"no such task {task_id}")
            status, assigned_to = row
            if status != "assigned" or assigned_to != annotator:
                raise ConflictError(f"task {task_id} is not assigned to {annotator}")
            try:
                self._conn.execute(
                    "INSERT INTO judgments (task_id, annotator, choice, decided_ms, "
                    "created_at) VALUES (?, ?, ?, ?, ?)",
                    (task_id, annotator, choice, decided_ms, time.time()))
            except sqlite3.IntegrityError as e:
                raise ConflictError(f"duplicate judgment on {task_id}") from e
            if choice == "skip":
                self._conn.execute(
                    "UPDATE tasks SET status = 'pending', assigned_to = NULL "
                    "WHERE id = ?", (task_id,))
            else:
                self._conn.execute(
                    "UPDATE tasks SET status = 'judged' WHERE id = ?", (task_id,))
            self._conn.commit()
        return {"task_id": task_id, "recorded": choice}

    def _require_annotator(self, annotator: str):
        if not annotator:
            raise UnknownAnnotatorError("empty annotator id")
        cur = self._conn.execute("SELECT 1 FROM annotators WHERE id = ?", (annotator,))
        if cur.fetchone() is None:
            raise UnknownAnnotatorError(annotator)

    # -- export -------------------------------------------------------------

    def export_pairs(self) -> list[dict]:
        """One winner/loser record per judged task, ordered by task id,
        hidden A/B mapping resolved server-side."""
        with self._lock:
            rows = self._conn.execute(
                "SELECT t.id, t.payload, t.a_is_first, j.choice FROM tasks t "
                "JOIN judgments j ON j.task_id = t.id AND j.choice != 'skip' "
                "WHERE t.status = 'judged' ORDER BY t.id").fetchall()
        out = []
        for task_id, payload, a_is_first, choice in rows:
            p = json.loads(payload)
            r1, r2 = p["rendition_1"]["durations"], p["rendition_2"]["durations"]
            chose_first = (choice == "A") == bool(a_is_first)
            d_w, d_l = (r1, r2) if chose_first else (r2, r1)
            out.append({"id": task_id,
                        "prompt": {"phonemes": p["prompt_phonemes"],
                                   "durations": p["prompt_durations"],
                                   "ref_mel": p["ref_mel_path"]},
                        "phonemes": p["phonemes"], "d_w": d_w, "d_l": d_l,
                        "source": p.get("source", "human")})
        return out

    def stats(self) -> dict:
        with self._lock:
            total = self._conn.execute("SELECT COUNT(*) FROM tasks").fetchone()[0]
            judged = self._conn.execute(
                "SELECT COUNT(*) FROM tasks WHERE status = 'judged'").fetchone()[0]
            per_annot = self._conn.execute(
                "SELECT annotator, COUNT(*), MIN(created_at), MAX(created_at) "
                "FROM judgments WHERE choice != 'skip' GROUP BY annotator").fetchall()
        rates = {}
        for annotator, n, t0, t1 in per_annot:
            hours = max((t1 - t0) / 3600.0, 1e-6)
            rates[annotator] = {"pairs": n, "pairs_per_hour": n / hours if n > 1 else None}
        return {"tasks": total, "judged": judged, "annotators": rates}


# ---------------------------------------------------------------------------
# HTTP surface


from pydantic import BaseModel


class RenditionIn(BaseModel):
    durations: list[int]
    media: str = ""


class CandidateIn(BaseModel):
    id: str
    phonemes: list[int]
    prompt_phonemes: list[int] = []
    prompt_durations: list[int] = []
    ref_mel_path: str = ""
    rendition_1: RenditionIn
    rendition_2: RenditionIn
    source: str = "human"


class ImportBody(BaseModel):
    candidates: list[CandidateIn]


class JudgmentIn(BaseModel):
    task_id: str
    annotator: str
    choice: str
    decided_ms: float = 0.0


def create_app(store: AnnotationStore, media_dir: str | Path | None = None):
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import JSONResponse

    app = FastAPI(title="duration preference annotation")

    @app.post("/tasks/import")
    def import_tasks(body: ImportBody):
        cands = [CandidatePair(
            id=c.id, phonemes=c.phonemes, prompt_phonemes=c.prompt_phonemes,
            prompt_durations=c.prompt_durations, ref_mel_path=c.ref_mel_path,
            rendition_1=Rendition(**c.rendition_1.model_dump()),
            rendition_2=Rendition(**c.rendition_2.model_dump()),
            source=c.source) for c in body.candidates]
        return store.import_candidates(cands)

    @app.get("/tasks/next")
    def next_task(annotator: str):
        store.register(annotator)
        task = store.next_task(annotator)
        if task is None:
            return JSONResponse({"task": None, "stats": store.stats()})
        return {"task": task, "stats": store.stats()}

    @app.post("/judgments")
    def submit(j: JudgmentIn):
        store.register(j.annotator)
        try:
            return store.submit_judgment(j.task_id, j.annotator, j.choice, j.decided_ms)
        except ConflictError as e:
            raise HTTPException(status_code=409, detail=str(e))
        except KeyError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))

    @app.get("/export")
    def export():
        return {"pairs": store.export_pairs()}

    if media_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/media", StaticFiles(directory=str(media_dir)), name="media")

    return app


def export_pairs_jsonl(store: AnnotationStore, path: str | Path):
    with open(path, "w") as f:
        for rec in store.export_pairs():
            f.write(json.dumps(rec) + "\n")
