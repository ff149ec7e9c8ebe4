"""Evaluation harness: dataset construction, reconstruction, retrieval math,
ablation modes, and the refinement cap."""

from __future__ import annotations

import json
import re

import pytest

from sqlknow.errors import BudgetExhaustedError
from sqlknow.evalkit import (
    MODE_DIRECT,
    MODE_PIPELINE,
    MODE_RAG,
    MODE_REFINE,
    PAPER_TABLE1,
    PAPER_TABLE3,
    REFINE_CAP,
    EvalTask,
    apply_review,
    assemble_report,
    build_dataset,
    check_metric_identities,
    load_tasks,
    reconstruction_accuracy,
    retrieval_metrics,
    run_ablation,
    save_tasks,
)
from sqlknow.gateway import HashingEmbedder, MockFixture, MockGateway
from sqlknow.knowledge import index_knowledge
from sqlknow.sqlcore import parse_script

from test_knowledge import fragment_record


class TestBuildDataset:
    def synth_gateway(self, responses):
        counter = {"i": 0}

        def synth(variables):
            response = responses[counter["i"] % len(responses)]
            counter["i"] += 1
            return response

        return MockGateway(overrides={"synthesize_task": synth})

    def task_json(self, instruction, sql):
        return json.dumps({"instruction": instruction, "sql": sql, "item_refs": []})

    def test_n_tasks_all_executable_nonempty(self, tox_db, histories, dictionary):
        gw = self.synth_gateway([
            self.task_json("count molecules", "SELECT COUNT(*) FROM molecule"),
            self.task_json("list elements", "SELECT DISTINCT element FROM atom"),
        ])
        tasks = build_dataset(tox_db, histories, gw, 4, dictionary, seed=7)
        assert len(tasks) == 4
        for task in tasks:
            result = parse_script(task.ground_truth_sql)
            assert 1 <= len(task.context_scripts) <= 5

    def test_zero_tasks(self, tox_db, histories, dictionary, gateway):
        assert build_dataset(tox_db, histories, gateway, 0, dictionary) == []

    def test_zero_row_sql_discarded(self, tox_db, histories, dictionary):
        gw = self.synth_gateway([
            self.task_json("empty", "SELECT * FROM molecule WHERE label = 'zzz'"),
            self.task_json("good", "SELECT COUNT(*) FROM bond"),
        ])
        tasks = build_dataset(tox_db, histories, gw, 2, dictionary, seed=3)
        assert len(tasks) == 2
        assert all("zzz" not in t.ground_truth_sql for t in tasks)

    def test_unparseable_and_bad_json_discarded(self, tox_db, histories, dictionary):
        gw = self.synth_gateway([
            "not even json",
            self.task_json("broken", "SELECT FROM WHERE"),
            self.task_json("good", "SELECT COUNT(*) FROM atom"),
        ])
        tasks = build_dataset(tox_db, histories, gw, 1, dictionary)
        assert len(tasks) == 1

    def test_budget_exhausted(self, tox_db, histories, dictionary):
        gw = self.synth_gateway(["garbage"])
        with pytest.raises(BudgetExhaustedError):
            build_dataset(tox_db, histories, gw, 2, dictionary, retry_budget=5)

    def test_line_cap_enforced(self, tox_db, histories, dictionary):
        tall = "SELECT\n" + "\n".join([" 1 AS c" + str(i) + "," for i in range(60)]) + " 1 AS last"
        gw = self.synth_gateway([
            self.task_json("tall", tall),
            self.task_json("flat", "SELECT 1"),
        ])
        tasks = build_dataset(tox_db, histories, gw, 1, dictionary)
        assert tasks[0].ground_truth_sql == "SELECT 1"

    def test_review_file_and_ingestion(self, tox_db, histories, dictionary, tmp_path):
        gw = self.synth_gateway([
            self.task_json("count molecules", "SELECT COUNT(*) FROM molecule"),
        ])
        review = tmp_path / "review.jsonl"
        tasks = build_dataset(tox_db, histories, gw, 3, dictionary,
                              review_path=str(review))
        entries = [json.loads(x) for x in review.read_text().splitlines()]
        assert [e["status"] for e in entries] == ["pending"] * 3
        decisions = [
            {"task_id": tasks[0].task_id, "status": "accepted"},
            {"task_id": tasks[1].task_id, "status": "fixed",
             "sql": "SELECT COUNT(*) FROM atom"},
            {"task_id": tasks[2].task_id, "status": "rejected"},
        ]
        review.write_text("\n".join(json.dumps(d) for d in decisions))
        reviewed = apply_review(tasks, str(review))
        assert len(reviewed) == 2
        assert reviewed[1].ground_truth_sql == "SELECT COUNT(*) FROM atom"

    def test_tasks_round_trip(self, tmp_path):
        tasks = [EvalTask("t0", "db", "q", "SELECT 1", ["k1"], ["s1"])]
        path = tmp_path / "tasks.jsonl"
        save_tasks(tasks, str(path))
        assert [t.to_json() for t in load_tasks(str(path))] == [t.to_json() for t in tasks]


class TestReconstruction:
    def identity_gateway(self):
        return MockGateway(overrides={
            "describe_script": lambda v: v["sql"],
            "describe_fragment": lambda v: v["fragment_sql"],
            "reconstruct_sql": lambda v: v["script_description"],
        })

    def test_identity_mock_succeeds(self, tox_db, histories, dictionary):
        row = reconstruction_accuracy(tox_db, histories, dictionary,
                                      self.identity_gateway(), database_id="tox")
        assert row["History"] == len(histories)
        assert row["Success"] == len(histories)
        assert row["Success Ratio"] == 100.0

    def test_hand_audited_partial_ratio(self, tox_db, histories, dictionary):
        """Reconstruction succeeds only for the one history whose knowledge the
        mock can actually rebuild; everything else returns a wrong query."""
        good_id = histories[1][0]  # h002: the non-carcinogenic count

        def reconstruct(variables):
            if "non_carci_count" in variables["fragments"]:
                return ("SELECT COUNT(DISTINCT T2.molecule_id) AS non_carci_count "
                        "FROM atom AS T1 INNER JOIN molecule AS T2 "
                        "ON T1.molecule_id = T2.molecule_id WHERE T2.label = '-'")
            return "SELECT 1"

        gw = MockGateway(overrides={"reconstruct_sql": reconstruct})
        row = reconstruction_accuracy(tox_db, histories, dictionary, gw,
                                      database_id="tox")
        assert row["Success"] == 1
        outcome = next(o for o in row["outcomes"] if o["script_id"] == good_id)
        assert outcome["success"]
        assert row["Success Ratio"] == round(100.0 / len(histories), 2)

    def test_failures_recorded_never_fatal(self, tox_db, dictionary):
        gw = MockGateway(overrides={"reconstruct_sql": lambda v: "NOT SQL"})
        row = reconstruction_accuracy(tox_db, [("s0", "SELECT 1")], dictionary, gw)
        assert row["Success"] == 0
        assert "error" in row["outcomes"][0]

    def test_paper_scale_reference_kept(self):
        assert PAPER_TABLE1["Toxicology"] == {
            "History": 145, "Success": 139, "Success Ratio": 95.86,
        }


class TestRetrievalMetrics:
    def fixture(self, embedder):
        records = [
            fragment_record("s1", "SELECT a FROM t WHERE label = '-'", "non carcinogenic filter"),
            fragment_record("s2", "SELECT b FROM t", "least common element pick"),
            fragment_record("s3", "SELECT c FROM t", "join atoms and molecules"),
            fragment_record("s4", "SELECT d FROM t", "bond type histogram"),
            fragment_record("s5", "SELECT e FROM t", "average atoms per molecule"),
            fragment_record("s6", "SELECT f FROM t", "non bonding element atoms"),
        ]
        store = index_knowledge(records, embedder)
        r = [rec.id for rec in records]
        tasks = [
            EvalTask("t0", "fixture", "first question", "SELECT 1",
                     ground_truth_items=[r[0], r[1]]),
            EvalTask("t1", "fixture", "second question", "SELECT 1",
                     ground_truth_items=[r[2]]),
            EvalTask("t2", "fixture", "third question", "SELECT 1",
                     ground_truth_items=[r[3], r[4]]),
            EvalTask("t3", "fixture", "fourth question", "SELECT 1",
                     ground_truth_items=[r[5]]),
        ]
        retrieved_plan = {
            "first question": [r[0], r[2]],          # hit 1 of 2
            "second question": [r[2], r[3], r[4]],   # hit 1 of 1
            "third question": [r[3], r[4]],          # hit 2 of 2
            "fourth question": [r[0]],               # hit 0 of 1
        }
        fixtures = [
            MockFixture("rerank_knowledge", {"instruction": q},
                        "\n".join(ids), key_fields=["instruction"])
            for q, ids in retrieved_plan.items()
        ]
        return store, tasks, MockGateway(fixtures=fixtures)

    def test_hand_computed_precision_recall_f1(self, embedder):
        """Hand-computed: items=6, retrieved=2+3+2+1=8, hits=1+1+2+0=4, so
        P=4/8=50.00, R=4/6=66.67, F1=2PR/(P+R)=57.14."""
        store, tasks, gw = self.fixture(embedder)
        rows = retrieval_metrics(tasks, store, gw)
        assert rows == [{
            "Database": "fixture",
            "Items": 6,
            "Retrieved": 8,
            "Precision": 50.0,
            "Recall": 66.67,
            "F1": 57.14,
        }]

    def test_perfect_retrieval(self, embedder):
        store, tasks, _ = self.fixture(embedder)
        ids_by_q = {t.instruction: t.ground_truth_items for t in tasks}
        fixtures = [
            MockFixture("rerank_knowledge", {"instruction": q}, "\n".join(ids),
                        key_fields=["instruction"])
            for q, ids in ids_by_q.items()
        ]
        rows = retrieval_metrics(tasks, store, MockGateway(fixtures=fixtures))
        assert rows[0]["Precision"] == 100.0
        assert rows[0]["Recall"] == 100.0
        assert rows[0]["F1"] == 100.0


def _truth_sql(k: int) -> str:
    return f"SELECT {k} AS answer"


def ablation_fixture(n_tasks=8):
    tasks = [
        EvalTask(f"t{k}", "fixture", f"question {k}", _truth_sql(k))
        for k in range(n_tasks)
    ]
    return tasks


def scripted_gateway(direct_ok, rag_ok, refine_step_ok=None):
    """direct_ok/rag_ok: task indexes answered correctly; refine_step_ok maps
    task index -> the revision step at which revise_sql becomes correct."""
    refine_step_ok = refine_step_ok or {}
    state = {"revise_calls": {}}

    def _k(instruction):
        return int(instruction.rsplit(" ", 1)[1])

    def direct(variables):
        k = _k(variables["instruction"])
        return _truth_sql(k) if k in direct_ok else "SELECT -1 AS answer"

    def rag(variables):
        k = _k(variables["instruction"])
        return _truth_sql(k) if k in rag_ok else f"SELECT -1 AS answer, {k} AS tag"

    def revise(variables):
        wrong = variables["wrong_sql"]
        match = re.search(r"(\d+) AS tag", wrong)
        if match is None:
            return wrong
        k = int(match.group(1))
        calls = state["revise_calls"].get(k, 0) + 1
        state["revise_calls"][k] = calls
        if refine_step_ok.get(k) is not None and calls >= refine_step_ok[k]:
            return _truth_sql(k)
        return wrong

    return MockGateway(overrides={
        "generate_sql_direct": direct,
        "generate_sql": rag,
        "revise_sql": revise,
    }), state


class TestAblation:
    def test_direct_mode_scripted_outcomes(self, tox_db, dictionary):
        tasks = ablation_fixture()
        gw, _ = scripted_gateway(direct_ok={0, 1, 2}, rag_ok=set())
        row = run_ablation(tasks, MODE_DIRECT, gw, tox_db, dictionary)
        assert (row["Tasks"], row["Success"], row["Success Ratio"]) == (8, 3, 37.5)
        assert [o["success"] for o in row["outcomes"]] == [True] * 3 + [False] * 5

    def test_rag_mode_scripted_outcomes(self, tox_db, dictionary, store):
        tasks = ablation_fixture()
        gw, _ = scripted_gateway(direct_ok=set(), rag_ok={0, 1, 2, 3, 4})
        row = run_ablation(tasks, MODE_RAG, gw, tox_db, dictionary, store=store)
        assert (row["Success"], row["Success Ratio"]) == (5, 62.5)

    def test_rag_requires_store(self, tox_db, dictionary, gateway):
        with pytest.raises(ValueError):
            run_ablation(ablation_fixture(), MODE_RAG, gateway, tox_db, dictionary)

    def test_refine_zero_steps_when_initial_matches(self, tox_db, dictionary, gateway):
        task = EvalTask("t0", "fixture", "question 0", _truth_sql(0),
                        initial_sql=_truth_sql(0))
        row = run_ablation([task], MODE_REFINE, gateway, tox_db, dictionary)
        assert row["outcomes"][0] == {"task_id": "t0", "success": True, "steps": 0}

    def test_refine_requires_initial_sql(self, tox_db, dictionary, gateway):
        row = run_ablation([EvalTask("t0", "fixture", "question 0", _truth_sql(0))],
                           MODE_REFINE, gateway, tox_db, dictionary)
        assert not row["outcomes"][0]["success"]
        assert "initial_sql" in row["outcomes"][0]["error"]

    def test_refine_converges_at_scripted_step(self, tox_db, dictionary):
        tasks = [
            EvalTask("t6", "fixture", "question 6", _truth_sql(6),
                     initial_sql="SELECT -1 AS answer, 6 AS tag"),
            EvalTask("t7", "fixture", "question 7", _truth_sql(7),
                     initial_sql="SELECT -1 AS answer, 7 AS tag"),
        ]
        gw, _ = scripted_gateway(set(), set(), refine_step_ok={6: 2, 7: None})
        row = run_ablation(tasks, MODE_REFINE, gw, tox_db, dictionary)
        assert row["outcomes"][0] == {"task_id": "t6", "success": True, "steps": 2}
        assert row["outcomes"][1]["success"] is False
        assert row["outcomes"][1]["steps"] == REFINE_CAP

    def test_pipeline_rag_then_refine(self, tox_db, dictionary, store):
        tasks = ablation_fixture()
        gw, _ = scripted_gateway(
            direct_ok=set(), rag_ok={0, 1, 2, 3, 4}, refine_step_ok={5: 1, 6: 3},
        )
        row = run_ablation(tasks, MODE_PIPELINE, gw, tox_db, dictionary, store=store)
        assert row["Success"] == 7
        assert row["Success Ratio"] == 87.5
        assert row["outcomes"][5]["steps"] == 1
        assert row["outcomes"][6]["steps"] == 3
        assert not row["outcomes"][7]["success"]

    def test_refine_never_exceeds_cap(self, tox_db, dictionary):
        """A never-converging mock must stop after exactly 5 revision rounds."""
        task = EvalTask("t9", "fixture", "question 9", _truth_sql(9),
                        initial_sql="SELECT -1 AS answer, 9 AS tag")
        gw, _ = scripted_gateway(set(), set(), refine_step_ok={9: None})
        row = run_ablation([task], MODE_REFINE, gw, tox_db, dictionary)
        assert row["outcomes"][0]["steps"] == REFINE_CAP
        revision_calls = [x for x in gw.transcript
                          if x.template_id == "revision_instruction"]
        assert len(revision_calls) == REFINE_CAP

    def test_paper_ordering_reference(self):
        for db, modes in PAPER_TABLE3.items():
            assert (modes[MODE_DIRECT]["Success Ratio"]
                    < modes[MODE_RAG]["Success Ratio"]
                    <= modes[MODE_PIPELINE]["Success Ratio"])


class TestReportAssembly:
    def test_report_shape_mirrors_tables(self, tox_db, dictionary, gateway):
        extraction = reconstruction_accuracy(
            tox_db, [("s0", "SELECT 1")], dictionary,
            MockGateway(overrides={
                "describe_script": lambda v: v["sql"],
                "describe_fragment": lambda v: v["fragment_sql"],
                "reconstruct_sql": lambda v: v["script_description"],
            }),
        )
        ablation = run_ablation(
            [EvalTask("t0", "fixture", "question 0", _truth_sql(0),
                      initial_sql=_truth_sql(0))],
            MODE_REFINE, gateway, tox_db, dictionary,
        )
        report = assemble_report(
            extraction_rows=[extraction],
            retrieval_rows=[{"Database": "fixture", "Items": 4, "Retrieved": 8,
                             "Precision": 50.0, "Recall": 100.0, "F1": 66.67}],
            ablation_rows=[ablation],
            include_paper_reference=True,
        )
        assert set(report["knowledge_extraction"][0]) == {
            "Database", "History", "Success", "Success Ratio",
        }
        assert set(report["knowledge_retrieval"][0]) == {
            "Database", "Items", "Retrieved", "Precision", "Recall", "F1",
        }
        assert set(report["ablation"][0]) >= {"Mode", "Tasks", "Success", "Success Ratio"}
        assert report["paper_reference"]["ablation"]["Toxicology"]["Pipeline"][
            "Success Ratio"] == 90.91

    def test_identity_violations_detected(self):
        bad = {"knowledge_retrieval": [{
            "Database": "x", "Items": 4, "Retrieved": 8,
            "Precision": 50.0, "Recall": 100.0, "F1": 90.0,
        }]}
        assert check_metric_identities(bad)
        with pytest.raises(AssertionError):
            assemble_report(retrieval_rows=bad["knowledge_retrieval"])
