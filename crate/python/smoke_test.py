"""Smoke test for the e2t extension module.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist && pip install dist/e2t-*.whl
"""

import json
import math
import os
import tempfile

import e2t


def test_embedding():
    v = e2t.embed("a man is walking a dog in a park", 64)
    assert len(v) == 64
    assert abs(math.sqrt(sum(x * x for x in v)) - 1.0) < 1e-5
    assert e2t.is_unit(v)
    assert abs(e2t.cosine_sim(v, v) - 1.0) < 1e-6
    w = e2t.embed("a woman is riding a horse on a beach", 64)
    assert e2t.cosine_sim(v, w) < 0.9


def test_description_and_parse():
    text = e2t.render_description([
        ("man", "knife", "stabbing", "alley", 0.9),
        ("woman", None, "running", "alley", 0.8),
    ])
    assert "knife" in text and "alley" in text
    answer = (
        "## Relational Scene Decomposition\nA man holds a knife in an alley.\n\n"
        "## Contextual Semantic Parsing\nA drawn knife in an alley is threatening.\n\n"
        "## Temporal Narrative Synthesis\nThe man approached, then drew the knife.\n\n"
        "THREAT_SCORE: 0.85\n"
    )
    parsed = e2t.parse_llm_response(answer)
    assert abs(parsed["score"] - 0.85) < 1e-12
    try:
        e2t.parse_llm_response("nothing useful")
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")


def test_knowledge_base():
    kb = e2t.KnowledgeBase(dim=64, tau=0.9)
    texts = ["a man is walking in a park"] * 3 + ["a man is punching a man in a street"] * 2
    novel = [kb.ingest(i, i * 0.5, t)[1] for i, t in enumerate(texts)]
    assert novel == [True, False, False, True, False]
    assert kb.cluster_count == 2 and kb.event_count == 5
    timeline = kb.timeline()
    assert [e["member_count"] for e in timeline] == [3, 2]
    assert kb.cluster(timeline[0]["cluster_id"])["members"] == [0, 1, 2]
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "kb.snap")
        kb.save(path)
        loaded = e2t.KnowledgeBase.load(path)
        assert loaded.timeline() == timeline
        loaded.ingest(5, 3.0, "a man is walking in a park")
        assert loaded.event_count == 6
        try:
            e2t.KnowledgeBase.load(os.path.join(d, "missing"))
        except OSError:
            pass
        else:
            raise AssertionError("expected OSError")


def test_metrics_and_losses():
    assert e2t.compute_auc([0.9, 0.1, 0.8, 0.3], [True, False, True, False]) == 1.0
    assert e2t.compute_ap([0.9, 0.1, 0.8, 0.3], [True, False, True, False]) == 1.0
    entities = [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]
    assert e2t.pointer_select([0.0, 2.0], entities) == 1
    assert e2t.loc_loss([1.0, 0.0], [0.0, 1.0], entities, 0, 1) > 0.0
    assert abs(e2t.act_loss([0.0, 1.0], [0.5, 0.5]) - 2 * math.log(2.0)) < 1e-9
    assert abs(e2t.lm_loss([0.5, 0.25]) - (math.log(2) + math.log(4))) < 1e-9
    assert all(passed for _, passed, _ in e2t.losses_check(11))


def test_replay_and_cli():
    lines = [
        json.dumps({"ts": i / 4, "frame_id": i,
                    "desc": "a man is walking in a park" if i < 40 else "a man is stabbing a man with a knife"})
        for i in range(80)
    ]
    reports = e2t.replay(lines, fps=10.0)
    assert reports and all(0.0 <= r["threat_score"] <= 1.0 for r in reports)
    assert max(r["threat_score"] for r in reports) > 0.7
    code, out, _ = e2t.run_cli(["losses", "check"])
    assert code == 0 and "PASS" in out
    code, _, err = e2t.run_cli(["--frobnicate"])
    assert code == 1 and "Usage:" in err


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok {name}")
