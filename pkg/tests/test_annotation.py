import json
import threading

import numpy as np
import pytest

from flowtts.annotation import (AnnotationStore, CandidatePair, ConflictError,
                                Rendition, UnknownAnnotatorError, create_app,
                                export_pairs_jsonl)


def make_candidates(n, prefix="t"):
    out = []
    for i in range(n):
        out.append(CandidatePair(
            id=f"{prefix}{i:03d}", phonemes=[4, 5, 6],
            prompt_phonemes=[4, 4], prompt_durations=[2, 3],
            ref_mel_path=f"ref_{i}.mel",
            rendition_1=Rendition(durations=[1, 2, 3], media=f"m1_{i}.wav"),
            rendition_2=Rendition(durations=[4, 5, 6], media=f"m2_{i}.wav")))
    return out


@pytest.fixture
def store(tmp_path):
    s = AnnotationStore(tmp_path / "anno.db", seed=0)
    yield s
    s.close()


class TestImport:
    def test_creates_pending_tasks(self, store):
        res = store.import_candidates(make_candidates(5))
        assert len(res["created"]) == 5
        assert res["skipped"] == [] and res["filtered"] == []
        assert store.stats()["tasks"] == 5

    def test_idempotent_reimport(self, store):
        cands = make_candidates(4)
        store.import_candidates(cands)
        res = store.import_candidates(cands)
        assert res["created"] == [] and len(res["skipped"]) == 4
        assert store.stats()["tasks"] == 4

    def test_prefilter_hook(self, store):
        cands = make_candidates(4)
        res = store.import_candidates(
            cands, prefilter=lambda c: "abnormal pause" if c.id.endswith("1") else None)
        assert len(res["created"]) == 3
        assert res["filtered"] == [{"id": "t001", "reason": "abnormal pause"}]


class TestAssignment:
    def test_sticky_until_judged(self, store):
        store.import_candidates(make_candidates(3))
        store.register("alice")
        t1 = store.next_task("alice")
        t2 = store.next_task("alice")
        assert t1["task_id"] == t2["task_id"]
        store.submit_judgment(t1["task_id"], "alice", "A")
        t3 = store.next_task("alice")
        assert t3["task_id"] != t1["task_id"]

    def test_view_hides_mapping(self, store):
        store.import_candidates(make_candidates(1))
        store.register("alice")
        task = store.next_task("alice")
        assert set(task) == {"task_id", "guidelines", "audio_a", "audio_b"}
        assert {task["audio_a"], task["audio_b"]} == {"m1_0.wav", "m2_0.wav"}

    def test_exhaustion_returns_none(self, store):
        store.import_candidates(make_candidates(1))
        store.register("alice")
        t = store.next_task("alice")
        store.submit_judgment(t["task_id"], "alice", "B")
        assert store.next_task("alice") is None

    def test_unknown_annotator(self, store):
        store.import_candidates(make_candidates(1))
        with pytest.raises(UnknownAnnotatorError):
            store.next_task("ghost")
        with pytest.raises(UnknownAnnotatorError):
            store.register("")

    def test_concurrent_annotators_never_share(self, tmp_path):
        store = AnnotationStore(tmp_path / "c.db", seed=1)
        store.import_candidates(make_candidates(40))
        names = [f"w{i}" for i in range(8)]
        for n in names:
            store.register(n)
        taken: dict[str, list[str]] = {n: [] for n in names}
        errors = []

        def work(name):
            try:
                while True:
                    t = store.next_task(name)
                    if t is None:
                        return
                    taken[name].append(t["task_id"])
                    store.submit_judgment(t["task_id"], name, "A")
            except Exception as e:  # surfaced after join
                errors.append(e)

        threads = [threading.Thread(target=work, args=(n,)) for n in names]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        store.close()
        assert not errors
        all_ids = [tid for ids in taken.values() for tid in ids]
        assert len(all_ids) == 40
        assert len(set(all_ids)) == 40  # no task handed to two annotators


class TestJudgment:
    def test_choice_a_resolves_via_hidden_mapping(self, tmp_path):
        # across many seeds, choosing A must sometimes mean rendition_1 and
        # sometimes rendition_2; the export must resolve it correctly each time
        saw = set()
        for seed in range(12):
            store = AnnotationStore(tmp_path / f"j{seed}.db", seed=seed)
            store.import_candidates(make_candidates(1))
            store.register("a")
            task = store.next_task("a")
            store.submit_judgment(task["task_id"], "a", "A")
            rec = store.export_pairs()[0]
            if task["audio_a"] == "m1_0.wav":
                assert rec["d_w"] == [1, 2, 3] and rec["d_l"] == [4, 5, 6]
                saw.add("first")
            else:
                assert rec["d_w"] == [4, 5, 6] and rec["d_l"] == [1, 2, 3]
                saw.add("second")
            store.close()
        assert saw == {"first", "second"}

    def test_skip_returns_to_pending(self, store):
        store.import_candidates(make_candidates(1))
        store.register("alice")
        store.register("bob")
        t = store.next_task("alice")
        store.submit_judgment(t["task_id"], "alice", "skip")
        # alice already skipped it, so she gets nothing; bob can take it
        assert store.next_task("alice") is None
        tb = store.next_task("bob")
        assert tb["task_id"] == t["task_id"]
        assert store.export_pairs() == []

    def test_duplicate_judgment_conflicts(self, store):
        store.import_candidates(make_candidates(1))
        store.register("alice")
        t = store.next_task("alice")
        store.submit_judgment(t["task_id"], "alice", "A")
        with pytest.raises(ConflictError):
            store.submit_judgment(t["task_id"], "alice", "B")

    def test_unassigned_submission_conflicts(self, store):
        store.import_candidates(make_candidates(2))
        store.register("alice")
        store.register("bob")
        t = store.next_task("alice")
        with pytest.raises(ConflictError):
            store.submit_judgment(t["task_id"], "bob", "A")

    def test_invalid_choice_and_missing_task(self, store):
        store.import_candidates(make_candidates(1))
        store.register("alice")
        t = store.next_task("alice")
        with pytest.raises(ValueError):
            store.submit_judgment(t["task_id"], "alice", "C")
        with pytest.raises(KeyError):
            store.submit_judgment("nope", "alice", "A")


class TestExport:
    def judge_all(self, store, n, annotator="alice", choice="A"):
        store.register(annotator)
        while True:
            t = store.next_task(annotator)
            if t is None:
                return
            store.submit_judgment(t["task_id"], annotator, choice)

    def test_deterministic_byte_identical(self, store, tmp_path):
        store.import_candidates(make_candidates(6))
        self.judge_all(store, 6)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        export_pairs_jsonl(store, p1)
        export_pairs_jsonl(store, p2)
        assert p1.read_bytes() == p2.read_bytes()
        recs = [json.loads(l) for l in p1.read_text().splitlines()]
        assert [r["id"] for r in recs] == sorted(r["id"] for r in recs)
        assert len(recs) == 6

    def test_position_balance(self, tmp_path):
        # the A slot should hold rendition_1 about half the time
        store = AnnotationStore(tmp_path / "bal.db", seed=3)
        store.import_candidates(make_candidates(400))
        store.register("a")
        first = 0
        while True:
            t = store.next_task("a")
            if t is None:
                break
            first += t["audio_a"].startswith("m1")
            store.submit_judgment(t["task_id"], "a", "A")
        store.close()
        assert 0.4 <= first / 400 <= 0.6

    def test_export_feeds_dpo_training(self, store, tiny_corpus, tiny_duration_model,
                                       tmp_path):
        from flowtts import dpo
        from flowtts.data import save_mel
        u = tiny_corpus.utterances[0]
        mel_path = tmp_path / "ref.mel"
        save_mel(u.mel, mel_path)
        cands = [CandidatePair(
            id=f"rt{i}", phonemes=list(tiny_corpus.utterances[1].phonemes),
            prompt_phonemes=list(u.phonemes), prompt_durations=list(u.durations),
            ref_mel_path=str(mel_path),
            rendition_1=Rendition(durations=[3] * len(tiny_corpus.utterances[1].phonemes)),
            rendition_2=Rendition(durations=[5] * len(tiny_corpus.utterances[1].phonemes)))
            for i in range(3)]
        store.import_candidates(cands)
        self.judge_all(store, 3)
        path = tmp_path / "pairs.jsonl"
        export_pairs_jsonl(store, path)
        pairs = dpo.load_pairs(path)
        assert len(pairs) == 3
        policy = dpo.clone_policy(tiny_duration_model)
        policy, info = dpo.dpo_train(policy, tiny_duration_model, pairs,
                                     dpo.DPOConfig(steps=2))
        assert len(info["loss_history"]) == 2


class TestHTTP:
    @pytest.fixture
    def client(self, store):
        from fastapi.testclient import TestClient
        return TestClient(create_app(store))

    def candidate_body(self, n=2):
        return {"candidates": [
            {"id": f"h{i}", "phonemes": [4, 5], "prompt_phonemes": [4],
             "prompt_durations": [2], "ref_mel_path": "r.mel",
             "rendition_1": {"durations": [1, 1], "media": "a.wav"},
             "rendition_2": {"durations": [2, 2], "media": "b.wav"}}
            for i in range(n)]}

    def test_full_round_trip(self, client):
        r = client.post("/tasks/import", json=self.candidate_body())
        assert r.status_code == 200 and len(r.json()["created"]) == 2
        r = client.get("/tasks/next", params={"annotator": "carol"})
        task = r.json()["task"]
        assert set(task) == {"task_id", "guidelines", "audio_a", "audio_b"}
        r = client.post("/judgments", json={"task_id": task["task_id"],
                                            "annotator": "carol", "choice": "A"})
        assert r.status_code == 200
        r = client.get("/export")
        pairs = r.json()["pairs"]
        assert len(pairs) == 1
        assert sorted([pairs[0]["d_w"], pairs[0]["d_l"]]) == [[1, 1], [2, 2]]

    def test_error_codes(self, client):
        client.post("/tasks/import", json=self.candidate_body(1))
        task = client.get("/tasks/next", params={"annotator": "x"}).json()["task"]
        r = client.post("/judgments", json={"task_id": task["task_id"],
                                            "annotator": "x", "choice": "Q"})
        assert r.status_code == 422
        r = client.post("/judgments", json={"task_id": "missing",
                                            "annotator": "x", "choice": "A"})
        assert r.status_code == 404
        client.post("/judgments", json={"task_id": task["task_id"],
                                        "annotator": "x", "choice": "A"})
        r = client.post("/judgments", json={"task_id": task["task_id"],
                                            "annotator": "x", "choice": "B"})
        assert r.status_code == 409

    def test_exhaustion_payload(self, client):
        r = client.get("/tasks/next", params={"annotator": "y"})
        body = r.json()
        assert body["task"] is None and "stats" in body
