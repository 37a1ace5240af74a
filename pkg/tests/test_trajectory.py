import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dnq.trajectory import (
    AtRoot,
    EmptyAnswer,
    EmptyQuestion,
    NodeClosed,
    NodeStatus,
    ObsKind,
    Observation,
    Tool,
    ToolCall,
    Trajectory,
    TrajectoryError,
    read_trajectories,
    write_trajectories,
)


def search(arg: str, titles=("T",)) -> tuple[ToolCall, Observation]:
    return ToolCall(Tool.ARTICLE_RETRIEVER, arg), Observation.of_entries([(t, "s") for t in titles])


def test_empty_question_rejected():
    with pytest.raises(EmptyQuestion):
        Trajectory("   ")


def test_toolcall_and_observation_validation():
    with pytest.raises(ValueError):
        ToolCall(Tool.ARTICLE_RETRIEVER, " ")
    assert ToolCall(Tool.FINISH, "").argument == ""
    assert Observation.of_entries([]).kind is ObsKind.EMPTY
    with pytest.raises(ValueError):
        Observation(ObsKind.ENTRIES, entries=())
    with pytest.raises(ValueError):
        Observation(ObsKind.ANSWER)


def test_child_finish_lifts_decompose_step():
    traj = Trajectory("Q?")
    traj.append_step(*search("q"))
    child = traj.spawn_child("sub?")
    assert child.spawned_at == 1 and traj.depth() == 1
    traj.append_step(*search("s", ("U",)))
    traj.finish("sub answer")
    assert traj.active_id == 0
    lifted = traj.root.steps[-1]
    assert lifted.call == ToolCall(Tool.DECOMPOSE, "sub?")
    assert lifted.obs.answer == "sub answer"
    assert traj.nodes[1].status is NodeStatus.FINISHED
    traj.finish("final")
    assert traj.finished and traj.final_answer == "final"
    assert traj.retrieved_titles() == ["T", "U"]


def test_rollback_leaves_parent_untouched():
    traj = Trajectory("Q?")
    traj.append_step(*search("q"))
    before = list(traj.root.steps)
    traj.spawn_child("dead end?")
    traj.append_step(*search("x", ("X",)))
    traj.rollback()
    assert traj.root.steps == before
    assert traj.nodes[1].status is NodeStatus.EXHAUSTED
    assert traj.attempted(0) == {(Tool.DECOMPOSE, "dead end?"), (Tool.ARTICLE_RETRIEVER, "x")}
    # Abandoned branches still count toward retrieval.
    assert "X" in traj.retrieved_titles()


def test_rollback_at_root_and_closed_nodes():
    traj = Trajectory("Q?")
    with pytest.raises(AtRoot):
        traj.rollback()
    with pytest.raises(EmptyAnswer):
        traj.finish("  ")
    traj.finish("", forced=True)
    assert traj.terminal and traj.final_answer == ""
    with pytest.raises(NodeClosed):
        traj.append_step(*search("late"))


def test_forced_finish_in_child_ends_episode():
    traj = Trajectory("Q?")
    traj.spawn_child("sub?")
    traj.finish("best effort", forced=True)
    assert traj.terminal and traj.final_answer == "best effort"
    assert traj.root.steps == []


def test_append_step_rejects_synthetic_calls():
    traj = Trajectory("Q?")
    with pytest.raises(ValueError):
        traj.append_step(ToolCall(Tool.FINISH, "x"), Observation.of_answer("x"))
    with pytest.raises(ValueError):
        traj.append_step(ToolCall(Tool.DECOMPOSE, "x"), Observation.of_answer("x"))


def test_from_dict_rejects_bad_trees():
    good = Trajectory("Q?").to_dict()
    bad = json.loads(json.dumps(good))
    bad["nodes"].append(dict(bad["nodes"][0], id=1))
    with pytest.raises(TrajectoryError):
        Trajectory.from_dict(bad)
    bad = json.loads(json.dumps(good))
    bad["active"] = 7
    with pytest.raises(TrajectoryError):
        Trajectory.from_dict(bad)
    bad = json.loads(json.dumps(good))
    bad["nodes"].append({"id": 1, "parent": 1, "question": "loop", "status": "Open", "steps": []})
    with pytest.raises(TrajectoryError):
        Trajectory.from_dict(bad)


def test_serialized_shape():
    traj = Trajectory("Q?")
    traj.append_step(*search("q"))
    data = traj.to_dict()
    assert list(data) == ["question", "final_answer", "nodes", "active", "toolset", "termination",
                          "schema_version"]
    assert data["nodes"][0]["steps"][0] == {
        "tool": "ArticleRetriever",
        "arg": "q",
        "obs": {"kind": "Entries", "entries": [["T", "s"]], "answer": None, "error": None},
    }


_word = st.text(alphabet="abcdefg xyz七夕\"\\", min_size=1, max_size=8).filter(lambda s: s.strip())
_ops = st.lists(
    st.tuples(st.sampled_from(["step", "empty", "error", "spawn", "rollback", "finish"]), _word),
    max_size=30,
)


def _build(ops) -> Trajectory:
    traj = Trajectory("root?")
    for op, w in ops:
        if traj.terminal:
            break
        if op == "step":
            traj.append_step(*search(w, (w, w + "2")))
        elif op == "empty":
            traj.append_step(ToolCall(Tool.PAGE_RETRIEVER, w), Observation.empty())
        elif op == "error":
            traj.append_step(ToolCall(Tool.PAGE_RETRIEVER, w), Observation.error("boom"))
        elif op == "spawn":
            traj.spawn_child(w)
        elif op == "rollback" and traj.active.parent_id is not None:
            traj.rollback()
        elif op == "finish":
            traj.finish(w)
    return traj


@given(_ops)
def test_json_roundtrip_preserves_content_hash(ops):
    traj = _build(ops)
    again = Trajectory.from_json(traj.to_json())
    assert again.to_dict() == traj.to_dict()
    assert again.content_hash() == traj.content_hash()
    assert again.active_id == traj.active_id and again.terminal == traj.terminal


@given(_ops)
def test_tree_invariants(ops):
    traj = _build(ops)
    for node_id, node in traj.nodes.items():
        chain = traj.ancestors(node_id)
        assert chain[-1] == 0
        if node.status is NodeStatus.OPEN:
            # Open nodes form the path from the root to the active node.
            assert node_id in traj.ancestors(traj.active_id)


def test_jsonl_file_roundtrip(tmp_path):
    a = _build([("step", "x"), ("spawn", "s"), ("finish", "y"), ("finish", "z")])
    b = _build([("spawn", "s"), ("rollback", "r")])
    path = tmp_path / "t.jsonl"
    write_trajectories(path, [a])
    write_trajectories(path, [b], append=True)
    got = read_trajectories(path)
    assert [t.content_hash() for t in got] == [a.content_hash(), b.content_hash()]
