"""Command-line entry point: ``trajrag <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed input,
invalid configuration), 3 internal invariant violation.  Tables go to stdout
as tab-separated text with a header row; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from . import render as R
from . import sim as S
from . import store as ST
from .config import RunConfig, from_dict, load_config
from .errors import ConfigError, MapError, ParseError, TrajRagError
from .gridmap import MAP_MAGIC, map_from_text
from .match import match_nodes
from .nav import export_prompt
from .topo import TRAJ_MAGIC, load_trajectory, trajectory_from_text

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_ints(text: str) -> list[int]:
    """``"0,3,5-7"`` -> ``[0, 3, 5, 6, 7]``."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        lo, sep, hi = part.partition("-")
        try:
            if sep and lo:
                a, b = int(lo), int(hi)
                if b < a:
                    raise ValueError
                out.extend(range(a, b + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise UsageError(f"bad integer list {text!r}") from None
    return out


def _override(text: str) -> tuple[str, object]:
    key, sep, val = text.partition("=")
    if not sep:
        raise UsageError(f"--set expects KEY=VALUE, got {text!r}")
    try:
        return key.strip(), json.loads(val)
    except json.JSONDecodeError:
        return key.strip(), val


def run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = dict(_override(s) for s in args.set)
    for name in ("seed", "top_m", "top_k", "epochs", "lr", "tau", "budget_steps"):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    return from_dict({**cfg.to_dict(), **overrides}) if overrides else cfg


def _emit(lines: Sequence[str], out: str | None) -> None:
    text = "".join(line + "\n" for line in lines)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _tsv(*cells) -> str:
    return "\t".join(str(c).replace("\t", " ").replace("\n", " ") for c in cells)


def _load_scenes(directory: str) -> list[S.Scene]:
    root = Path(directory)
    if not root.is_dir():
        raise TrajRagError(f"scene directory {root} does not exist")
    files = sorted(root.glob("*.scene"))
    if not files:
        raise TrajRagError(f"no *.scene files under {root}")
    return [S.load_scene(f) for f in files]


def _goal_index(categories: Sequence[str], name: str) -> int:
    if name in categories:
        return list(categories).index(name)
    raise UsageError(f"unknown goal category {name!r}; known: {', '.join(categories)}")


# -- commands -----------------------------------------------------------------------


def cmd_gen_scenes(args) -> int:
    cfg = run_config(args)
    seeds = parse_ints(args.seeds)
    layouts = parse_ints(args.layouts) if args.layouts else None
    if not seeds:
        raise UsageError("no scene seeds given")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [_tsv("seed", "layout", "rooms", "objects", "file")]
    for i, seed in enumerate(seeds):
        layout = layouts[i % len(layouts)] if layouts else None
        scene = S.generate_scene(seed, cfg.scene_params(layout))
        path = out / f"{seed:06d}.scene"
        S.save_scene(scene, path)
        rows.append(_tsv(seed, scene.layout, len(scene.rooms), len(scene.objects), path))
    _emit(rows, None)
    return EXIT_OK


def cmd_build_kb(args) -> int:
    cfg = run_config(args)
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    scenes = _load_scenes(args.scenes)
    out = Path(args.out)
    if args.append and (out / "manifest").exists():
        store = ST.load(out)
    else:
        store = ST.TrajRagStore(scenes[0].categories, cfg.store_config())
    store, rep = S.build_store(scenes, args.episodes, store, cfg.episode_config(), cfg.seed)
    ST.save(store, out)
    rows = [
        _tsv("groups", "chunks", "walks", "inserted", "new_groups", "merged", "superseded", "discarded", "failed"),
        _tsv(
            len(store.groups), len(store.chunks), rep.walks, rep.inserted, rep.new_groups,
            rep.merged, rep.superseded, rep.discarded, rep.failed_walks,
        ),
    ]
    _emit(rows, None)
    return EXIT_OK


def cmd_retrieve(args) -> int:
    cfg = run_config(args)
    store = ST.load(args.kb)
    query = _load_query(Path(args.query))
    rows = [_tsv("kind", "rank", "id", "group", "score", "description")]
    if store.groups:
        coarse, fine = ST.retrieve(store, query, cfg.top_m, cfg.top_k)
        for k, hit in enumerate(coarse, 1):
            g = store.groups[hit.group_id]
            desc = f"{len(g.members)} chunks, {len(g.summary.nodes)} summary nodes"
            rows.append(_tsv("group", k, hit.group_id, hit.group_id, f"{hit.score:.6f}", desc))
        for k, (f, hit) in enumerate(fine, 1):
            desc = store.chunks[f.chunk_id].description
            rows.append(_tsv("chunk", k, f.chunk_id, hit.group_id, f"{f.score:.6f}", desc))
    _emit(rows, args.out)
    return EXIT_OK


class _PromptRecorder:
    """Planner wrapper that records the prompt shown at every decision."""

    def __init__(self, inner, categories):
        self.inner = inner
        self.categories = categories
        self.uses_experience = getattr(inner, "uses_experience", False)
        self.prompts: list[str] = []

    def __call__(self, candidates, experiences, goal):
        self.prompts.append(export_prompt(candidates, experiences, goal, self.categories))
        return self.inner(candidates, experiences, goal)


def _scene_for(args, cfg) -> S.Scene:
    if args.scene:
        return S.load_scene(args.scene)
    if args.scene_seed is None:
        raise UsageError("give --scene FILE or --scene-seed N")
    return S.generate_scene(args.scene_seed, cfg.scene_params(args.layout))


def cmd_navigate(args) -> int:
    cfg = run_config(args)
    scene = _scene_for(args, cfg)
    goal = _goal_index(scene.categories, args.goal)
    store = ST.load(args.kb) if args.kb else None
    if args.planner == "trajrag" and store is None:
        raise UsageError("the trajrag planner needs --kb")
    spec = S.EpisodeSpec(scene.seed, scene.layout, goal, cfg.seed)
    planner = S.planner_factory(args.planner, cfg.seed)(spec)
    recorder = _PromptRecorder(planner, scene.categories) if args.prompt else planner
    trace: list = []
    r = S.run_episode(scene, goal, recorder, store, config=cfg.episode_config(), seed=cfg.seed, trace=trace)
    _emit([S.RESULT_HEADER, S.result_row(args.planner, spec, r, scene.categories)], None)
    if args.trace:
        _emit([S.TRACE_HEADER] + [d.to_line() for d in trace], args.trace)
    if args.prompt:
        sep = "\n" + "=" * 72 + "\n"
        Path(args.prompt).write_text(sep.join(recorder.prompts))
    if args.insert:
        if store is None:
            raise UsageError("--insert needs --kb")
        if r.trajectory is None or not len(r.trajectory):
            raise TrajRagError("episode produced no trajectory to insert")
        out = ST.insert_trajectory(store, r.trajectory)
        ST.save(store, args.kb)
        print(f"# inserted: {type(out).__name__} group {out.group_id}", file=sys.stderr)
    return EXIT_OK


def _summary_rows(results) -> list[str]:
    rows = [_tsv("planner", "episodes", "SR", "SPL")]
    metrics = {}
    for name, pairs in results.items():
        m = S.compute_metrics([r for _, r in pairs])
        metrics[name] = m
        rows.append(_tsv(name, len(pairs), f"{m['SR']:.6f}", f"{m['SPL']:.6f}"))
    if "trajrag" in metrics:
        for name, m in metrics.items():
            if name != "trajrag":
                t = metrics["trajrag"]
                d_sr, d_spl = f"{t['SR'] - m['SR']:+.6f}", f"{t['SPL'] - m['SPL']:+.6f}"
                rows.append(_tsv(f"delta trajrag-{name}", "", d_sr, d_spl))
    return rows


def cmd_eval(args) -> int:
    cfg = run_config(args)
    names = [n.strip() for n in args.planners.split(",") if n.strip()]
    if not names:
        raise UsageError("no planners given")
    factories = {n: S.planner_factory(n, cfg.seed) for n in names}
    store = ST.load(args.kb) if args.kb else None
    if "trajrag" in names and store is None:
        raise UsageError("the trajrag planner needs --kb")
    seeds = parse_ints(args.scene_seeds)
    layouts = parse_ints(args.layouts)
    if not seeds or not layouts:
        raise UsageError("scene seeds and layouts must be non-empty")
    specs = S.episode_specs(seeds, layouts, args.goals_per_scene, cfg.scene_params(), cfg.seed)
    if args.goals is not None:
        wanted = [g.strip() for g in args.goals.split(",") if g.strip()]
        if not wanted:
            raise UsageError("goal list is empty")
        idx = {_goal_index(cfg.categories, g) for g in wanted}
        specs = [s for s in specs if s.goal in idx]
    if not specs:
        raise UsageError("no episodes selected")
    results = S.evaluate(specs, factories, store, cfg.scene_params(), cfg.episode_config(), args.workers)
    rows = [S.RESULT_HEADER]
    for name in names:
        rows += [S.result_row(name, spec, r, cfg.categories) for spec, r in results[name]]
    rows.append("")
    rows += _summary_rows(results)
    _emit(rows, args.out)
    if args.out:
        _emit(_summary_rows(results), None)
    if args.consolidate:
        if store is None:
            raise UsageError("--consolidate needs --kb")
        pairs = results.get("trajrag") or next(iter(results.values()))
        outcomes = S.consolidate(store, pairs)
        ST.save(store, args.kb)
        print(f"# consolidated {len(outcomes)} trajectories", file=sys.stderr)
    return EXIT_OK


def _sniff(path: Path) -> str:
    try:
        with path.open() as fh:
            return fh.readline().strip()
    except OSError as exc:
        raise ParseError(f"cannot read: {exc.strerror}", None, str(path)) from None


def _load_group_file(path: Path) -> ST.Group:
    return ST._load_group(path)


def cmd_render(args) -> int:
    src = Path(args.input)
    head = _sniff(src)
    if head == MAP_MAGIC:
        svg = R.render_map(map_from_text(src.read_text(), str(src)))
    elif head == S.SCENE_MAGIC:
        svg = R.render_map(S.load_scene(src).map)
    elif head == TRAJ_MAGIC or head.startswith("trajrag-chunk"):
        traj = _load_query(src)
        if args.map:
            svg = R.render_map(map_from_text(Path(args.map).read_text(), args.map), trajectory=traj)
        else:
            svg = R.render_trajectory(traj)
    elif head.startswith("trajrag-group"):
        g = _load_group_file(src)
        svg = R.render_summary(g.summary.nodes, g.summary.edges)
    else:
        raise ParseError(f"unrecognised file header {head!r}", 1, str(src))
    R.write_svg(svg, args.out)
    return EXIT_OK


def _load_query(path: Path):
    head = _sniff(path)
    if head.startswith("trajrag-chunk"):
        return ST._load_chunk(path).trajectory
    return load_trajectory(path)


def cmd_train_embedder(args) -> int:
    cfg = run_config(args)
    store = ST.load(args.kb)
    run = ST.train_store(store, cfg.epochs, cfg.lr, cfg.tau, cfg.seed)
    ST.save(store, args.kb)
    _emit(
        [
            _tsv("groups", "chunks", "epochs", "initial_loss", "final_loss"),
            _tsv(len(store.groups), len(store.chunks), cfg.epochs, f"{run.initial_loss:.6f}", f"{run.final_loss:.6f}"),
        ],
        None,
    )
    return EXIT_OK


def _nodes_of(path: Path):
    head = _sniff(path)
    if head == TRAJ_MAGIC or head.startswith("trajrag-chunk"):
        return _load_query(path).nodes
    if head.startswith("trajrag-group"):
        return _load_group_file(path).summary.nodes
    raise ParseError(f"expected a trajectory or group file, got header {head!r}", 1, str(path))


def cmd_inspect(args) -> int:
    cfg = run_config(args)
    a = Path(args.target)
    if args.other is None:
        if not a.is_dir():
            raise UsageError("inspect with one argument expects a store directory")
        store = ST.load(a)
        rows = [_tsv("group", "chunks", "summary_nodes", "summary_edges", "goals")]
        for gid in sorted(store.groups):
            g = store.groups[gid]
            goals = sorted({store.categories[m.goal] for m in g.members.values()})
            rows.append(_tsv(gid, len(g.members), len(g.summary.nodes), len(g.summary.edges), ",".join(goals)))
        _emit(rows, None)
        return EXIT_OK
    q, t = _nodes_of(a), _nodes_of(Path(args.other))
    sc = cfg.store_config()
    res = match_nodes(q, t, sc.K, sc.ransac_iters, sc.inlier_tol, sc.seed)
    if res is None:
        print("no correspondences")
        return EXIT_OK
    print(res)
    ok = res.is_valid(sc.min_inlier_ratio, sc.min_inliers, len(q), sc.min_similarity)
    print(f"valid merge: {'yes' if ok else 'no'}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override it")
    common.add_argument("--seed", type=int, help="root seed (default from config, 0)")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key (JSON value)"
    )

    p = _Parser(prog="trajrag", description="Topo-polar trajectory store for object-goal navigation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scenes", parents=[common], help="generate procedural scene files")
    g.add_argument("--seeds", required=True, help="scene seeds, e.g. 0-9 or 1,4,7")
    g.add_argument("--layouts", help="layout ids cycled over the seeds (default: layout = seed)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_scenes)

    b = sub.add_parser("build-kb", parents=[common], help="run scripted walks and build a store")
    b.add_argument("scenes", help="directory of *.scene files")
    b.add_argument("--episodes", type=int, default=4, help="scripted walks per scene")
    b.add_argument("--out", required=True, help="store directory")
    b.add_argument("--append", action="store_true", help="insert into an existing store")
    b.set_defaults(func=cmd_build_kb)

    r = sub.add_parser("retrieve", parents=[common], help="coarse-to-fine retrieval for a query trajectory")
    r.add_argument("kb")
    r.add_argument("query", help="trajectory or chunk file")
    r.add_argument("--top-m", type=int, dest="top_m")
    r.add_argument("--top-k", type=int, dest="top_k")
    r.add_argument("--out", help="write the listing here instead of stdout")
    r.set_defaults(func=cmd_retrieve)

    n = sub.add_parser("navigate", parents=[common], help="run one episode")
    n.add_argument("--scene", help="scene file")
    n.add_argument("--scene-seed", type=int)
    n.add_argument("--layout", type=int)
    n.add_argument("--goal", required=True, help="goal category name")
    n.add_argument("--kb", help="store directory")
    n.add_argument("--planner", default="trajrag", choices=S.PLANNERS)
    n.add_argument("--budget-steps", type=int, dest="budget_steps")
    n.add_argument("--trace", help="write the decision trace (TSV) here")
    n.add_argument("--prompt", help="write the planner prompts here")
    n.add_argument("--insert", action="store_true", help="insert the episode trajectory into --kb")
    n.set_defaults(func=cmd_navigate)

    e = sub.add_parser("eval", parents=[common], help="paired evaluation of planners")
    e.add_argument("--kb", help="store directory")
    e.add_argument("--scene-seeds", required=True)
    e.add_argument("--layouts", required=True)
    e.add_argument("--goals-per-scene", type=int, default=3)
    e.add_argument("--goals", help="restrict to these goal categories (comma separated)")
    e.add_argument("--planners", default="trajrag,random")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--budget-steps", type=int, dest="budget_steps")
    e.add_argument("--out", help="write the results table here")
    e.add_argument("--consolidate", action="store_true", help="insert successful trajrag episodes afterwards")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("render", help="draw a map, scene, trajectory or group file as SVG")
    d.add_argument("input")
    d.add_argument("--map", help="map file drawn under a trajectory")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_render)

    t = sub.add_parser("train-embedder", parents=[common], help="fit the projection and re-embed all chunks")
    t.add_argument("kb")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--tau", type=float)
    t.set_defaults(func=cmd_train_embedder)

    i = sub.add_parser("inspect", parents=[common], help="list a store, or match two trajectory/group files")
    i.add_argument("target")
    i.add_argument("other", nargs="?")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"trajrag {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ConfigError, MapError, TrajRagError, OSError) as exc:
        print(f"trajrag {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AssertionError as exc:
        print(f"trajrag {args.command}: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
