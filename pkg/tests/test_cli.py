import json

import pytest

from trajrag import store as ST
from trajrag.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, main, parse_ints
from trajrag.cli import UsageError

COMMANDS = ("gen-scenes", "build-kb", "retrieve", "navigate", "eval", "render", "train-embedder", "inspect")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def table(text):
    lines = [l for l in text.splitlines() if l and not l.startswith("#")]
    head = lines[0].split("\t")
    return [dict(zip(head, l.split("\t"))) for l in lines[1:]]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["gen-scenes", "--seeds", "0-4", "--layouts", "0-4", "--out", str(root / "scenes")]) == 0
    assert main(["build-kb", str(root / "scenes"), "--episodes", "4", "--out", str(root / "kb")]) == 0
    return root


# -- parsing ----------------------------------------------------------------------


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help_for_every_command(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        main([cmd, "--help"])
    assert e.value.code == 0
    assert "usage:" in capsys.readouterr().out


def test_invalid_flags_exit_one(capsys):
    with pytest.raises(SystemExit) as e:
        main(["eval", "--bogus"])
    assert e.value.code == EXIT_USAGE
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == EXIT_USAGE


def test_parse_ints():
    assert parse_ints("0,3,5-7") == [0, 3, 5, 6, 7]
    assert parse_ints("") == []
    with pytest.raises(UsageError):
        parse_ints("4-2")
    with pytest.raises(UsageError):
        parse_ints("a")


def test_parser_lists_all_commands():
    text = build_parser().format_help()
    assert all(c in text for c in COMMANDS)


# -- gen-scenes / build-kb --------------------------------------------------------


def test_gen_scenes_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "gen-scenes", "--seeds", "3,4", "--out", a)[0] == EXIT_OK
    assert run(capsys, "gen-scenes", "--seeds", "3,4", "--out", b)[0] == EXIT_OK
    for name in ("000003.scene", "000004.scene"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_one_scene_one_episode_then_discard(tmp_path, capsys):
    run(capsys, "gen-scenes", "--seeds", "7", "--out", tmp_path / "s")
    code, out, _ = run(capsys, "build-kb", tmp_path / "s", "--episodes", "1", "--out", tmp_path / "kb")
    assert code == EXIT_OK
    row = table(out)[0]
    assert (row["groups"], row["chunks"], row["discarded"]) == ("1", "1", "0")
    code, out, _ = run(capsys, "build-kb", tmp_path / "s", "--episodes", "1", "--out", tmp_path / "kb", "--append")
    row = table(out)[0]
    assert (row["groups"], row["chunks"], row["discarded"]) == ("1", "1", "1")


def test_distinct_layouts_give_several_groups(corpus):
    store = ST.load(corpus / "kb")
    assert len(store.groups) >= 5
    tags = {
        store.chunks[cid].trajectory.source_tag.split(":")[1] for g in store.groups.values() for cid in g.members
    }
    assert tags == {"0", "1", "2", "3", "4"}


def test_build_kb_data_errors(tmp_path, capsys):
    code, _, err = run(capsys, "build-kb", tmp_path / "missing", "--out", tmp_path / "kb")
    assert code == EXIT_DATA and "does not exist" in err
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "x.scene").write_text("trajrag-scene v1\nseed zero\n")
    code, _, err = run(capsys, "build-kb", tmp_path / "bad", "--out", tmp_path / "kb")
    assert code == EXIT_DATA and "x.scene" in err
    code, _, _ = run(capsys, "build-kb", tmp_path / "bad", "--episodes", "0", "--out", tmp_path / "kb")
    assert code == EXIT_USAGE


# -- retrieve ---------------------------------------------------------------------


def test_retrieve_self_and_matches_library(corpus, capsys):
    store = ST.load(corpus / "kb")
    cid = sorted(store.chunks)[3]
    chunk_file = corpus / "kb" / "chunks" / str(cid)
    code, out, _ = run(capsys, "retrieve", corpus / "kb", chunk_file)
    assert code == EXIT_OK
    rows = table(out)
    chunks = [r for r in rows if r["kind"] == "chunk"]
    assert chunks[0]["id"] == str(cid) and float(chunks[0]["score"]) == pytest.approx(1.0)
    coarse, fine = ST.retrieve(store, store.chunks[cid].trajectory, 3, 3)
    assert [int(r["id"]) for r in rows if r["kind"] == "group"] == [h.group_id for h in coarse]
    assert [int(r["id"]) for r in chunks] == [f.chunk_id for f, _ in fine]


def test_retrieve_empty_kb_and_missing_kb(corpus, tmp_path, capsys):
    ST.save(ST.TrajRagStore(("chair", "bed")), tmp_path / "empty")
    query = next((corpus / "kb").glob("chunks/*"))
    code, out, _ = run(capsys, "retrieve", tmp_path / "empty", query)
    assert code == EXIT_OK and out.strip().count("\n") == 0
    code, _, _ = run(capsys, "retrieve", tmp_path / "nothing", query)
    assert code == EXIT_DATA


# -- navigate / eval --------------------------------------------------------------


def test_navigate_reproducible_with_trace_and_prompt(corpus, tmp_path, capsys):
    args = ["navigate", "--scene", corpus / "scenes" / "000001.scene", "--goal", "bed", "--kb", corpus / "kb"]
    outs = []
    for k in range(2):
        code, out, _ = run(capsys, *args, "--trace", tmp_path / f"t{k}", "--prompt", tmp_path / f"p{k}")
        assert code == EXIT_OK
        outs.append(out)
    assert outs[0] == outs[1]
    assert (tmp_path / "t0").read_bytes() == (tmp_path / "t1").read_bytes()
    assert (tmp_path / "p0").read_text().startswith("You are choosing")
    assert table(outs[0])[0]["planner"] == "trajrag"


def test_navigate_usage_errors(corpus, capsys):
    assert run(capsys, "navigate", "--goal", "bed", "--planner", "random")[0] == EXIT_USAGE
    code, _, err = run(capsys, "navigate", "--scene-seed", "3", "--goal", "unicorn", "--planner", "random")
    assert code == EXIT_USAGE and "unknown goal" in err
    assert run(capsys, "navigate", "--scene-seed", "3", "--goal", "bed")[0] == EXIT_USAGE


def test_eval_reproducible_with_delta(corpus, tmp_path, capsys):
    args = ["eval", "--kb", corpus / "kb", "--scene-seeds", "1000,1001", "--layouts", "0,1"]
    args += ["--goals-per-scene", "1", "--planners", "trajrag,random", "--seed", "3"]
    _, a, _ = run(capsys, *args)
    _, b, _ = run(capsys, *args, "--workers", "2")
    assert a == b
    body, summary = a.split("\n\n")
    assert len(table(body)) == 4
    rows = table(summary)
    assert [r["planner"] for r in rows] == ["trajrag", "random", "delta trajrag-random"]
    delta = float(rows[0]["SPL"]) - float(rows[1]["SPL"])
    assert float(rows[2]["SPL"]) == pytest.approx(delta, abs=2e-6)


def test_eval_rejects_empty_goal_list_and_bad_config(corpus, tmp_path, capsys):
    base = ["eval", "--scene-seeds", "1000", "--layouts", "0", "--planners", "random"]
    assert run(capsys, *base, "--goals", ",")[0] == EXIT_USAGE
    assert run(capsys, *base[:-2], "--planners", ",")[0] == EXIT_USAGE
    assert run(capsys, *base, "--set", "tau=-1")[0] == EXIT_DATA
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"colour": "red"}))
    code, _, err = run(capsys, *base, "--config", cfg)
    assert code == EXIT_DATA and "colour" in err


# -- render / train / inspect -----------------------------------------------------


def test_render_scene_and_group(corpus, tmp_path, capsys):
    scene = corpus / "scenes" / "000002.scene"
    assert run(capsys, "render", scene, "--out", tmp_path / "a.svg")[0] == EXIT_OK
    assert run(capsys, "render", scene, "--out", tmp_path / "b.svg")[0] == EXIT_OK
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    group = next((corpus / "kb").glob("groups/*"))
    assert run(capsys, "render", group, "--out", tmp_path / "g.svg")[0] == EXIT_OK
    bad = tmp_path / "bad.txt"
    bad.write_text("hello\n")
    assert run(capsys, "render", bad, "--out", tmp_path / "x.svg")[0] == EXIT_DATA


def test_train_embedder(corpus, tmp_path, capsys):
    import shutil

    kb = tmp_path / "kb"
    shutil.copytree(corpus / "kb", kb)
    code, out, _ = run(capsys, "train-embedder", kb, "--epochs", "20")
    row = table(out)[0]
    assert code == EXIT_OK and float(row["final_loss"]) <= float(row["initial_loss"])
    assert ST.load(kb).params != ST.load(corpus / "kb").params


def test_train_embedder_single_group(tmp_path, capsys):
    run(capsys, "gen-scenes", "--seeds", "7", "--out", tmp_path / "s")
    run(capsys, "build-kb", tmp_path / "s", "--episodes", "1", "--out", tmp_path / "kb")
    code, _, err = run(capsys, "train-embedder", tmp_path / "kb")
    assert code == EXIT_DATA and "group" in err


def test_inspect(corpus, capsys):
    code, out, _ = run(capsys, "inspect", corpus / "kb")
    assert code == EXIT_OK and len(table(out)) == len(ST.load(corpus / "kb").groups)
    chunk = sorted((corpus / "kb").glob("chunks/*"))[0]
    code, out, _ = run(capsys, "inspect", chunk, chunk)
    assert code == EXIT_OK and "valid merge: yes" in out
