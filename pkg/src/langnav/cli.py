"""Operator entry points: datasets, training, evaluation, stats, services.

Every subcommand resolves one RunConfig (defaults, then --config file,
then flags) and serializes it next to whatever artifact it produces, so
any dataset, checkpoint, or report can be traced back to the exact
settings that made it.  Exit codes: 0 success, 1 operational failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import command as cmd
from . import datastore
from . import grounder as gr
from . import metrics
from . import navctl
from . import nn
from . import oracle as oc
from . import service
from . import worldsim as ws
from .geometry import SemanticRaster

WORLD_SEEDS = (1, 2, 3)


@dataclass
class RunConfig:
    """Fully resolved tool configuration; one per invocation."""

    seed: int = 0
    actor_seed: int = 1
    episodes: int = 500
    split: str = "train"
    frames: int = 8
    use_context: bool = True
    channels: int = 32
    steps: int = 1500
    lr: float = 5e-4
    batch_size: int = 8
    port: int = 8600
    map_seed: int = 1
    spawn_index: int = 0
    time_scale: float = 1.0
    sim: ws.SimConfig = field(default_factory=ws.SimConfig)
    planner: navctl.PlannerConfig = field(default_factory=navctl.PlannerConfig)
    stop: navctl.StopCriterion = field(default_factory=navctl.StopCriterion)
    paths: dict = field(default_factory=dict)

    def model_config(self) -> gr.ModelConfig:
        return gr.ModelConfig(n_frames=self.frames, channels=self.channels,
                              use_context=self.use_context)

    def run_config(self, n_frames=None) -> navctl.RunConfig:
        return navctl.RunConfig(sim=self.sim, planner=self.planner,
                                stop=self.stop,
                                n_frames=n_frames or self.frames,
                                actor_seed=self.actor_seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


_SECTIONS = {"sim": ws.SimConfig, "planner": navctl.PlannerConfig,
             "stop": navctl.StopCriterion}


def resolve_config(args) -> RunConfig:
    """defaults < config file < explicit flags."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            overrides = json.load(fh)
        for key, val in overrides.items():
            if key in _SECTIONS:
                cfg = replace(cfg, **{key: replace(getattr(cfg, key), **val)})
            elif key in RunConfig.__dataclass_fields__:
                cfg = replace(cfg, **{key: val})
            else:
                raise KeyError(f"unknown config key {key!r}")
    for key in RunConfig.__dataclass_fields__:
        val = getattr(args, key, None)
        if val is not None and key not in _SECTIONS:
            cfg = replace(cfg, **{key: val})
    if getattr(args, "context", False):
        cfg = replace(cfg, use_context=True)
    return cfg


def _write_run_config(cfg: RunConfig, artifact_path, **paths):
    cfg = replace(cfg, paths=dict(paths))
    if os.path.isdir(artifact_path):
        out = os.path.join(artifact_path, "run_config.json")
    else:
        out = artifact_path + ".run.json"
    with open(out, "w") as fh:
        fh.write(cfg.to_json())


# ---------------------------------------------------------------------------
# dataset generation

def generate_split(root, split, episodes, seed,
                   progress=None) -> datastore.SplitManifest:
    """Record an accepted-episode split; pure function of its arguments.

    Every choice (world, spawn, command, traffic) is drawn from one seeded
    stream, and rejected drives advance the same stream, so two runs with
    the same seed produce byte-identical trees.  Distinct seeds give
    disjoint command-seed ranges, which keeps splits disjoint.
    """
    split_dir = os.path.join(root, split)
    if os.path.isdir(split_dir):        # re-runs replace, not append
        shutil.rmtree(split_dir)
    rng = np.random.default_rng(seed)
    worlds = {w: ws.generate_map(w) for w in WORLD_SEEDS}
    names = []
    while len(names) < episodes:
        w = int(rng.choice(WORLD_SEEDS))
        world = worlds[w]
        spawn = world.spawn_points[int(rng.integers(len(world.spawn_points)))]
        cmd_seed = int(seed) * 10_000_000 + int(rng.integers(10_000_000))
        actor_seed = int(rng.integers(1 << 31))
        try:
            plan, route = cmd.generate_command(world, spawn, cmd_seed)
        except cmd.InfeasibleError:
            continue
        rs = oc.make_route_state(route)
        rec = oc.record_episode(world, plan, rs,
                                oc.RecordConfig(actor_seed=actor_seed))
        if rec.verdict != "accepted":
            continue
        name = f"ep-{len(names):06d}"
        datastore.write_episode(replace(rec, split=split),
                                os.path.join(root, split, name))
        names.append(name)
        if progress is not None:
            progress(len(names))
    manifest = datastore.SplitManifest(split, tuple(names), int(seed))
    datastore.write_split(manifest, root)
    return manifest


def _cmd_dataset(cfg: RunConfig, args) -> int:
    t0 = time.time()
    manifest = generate_split(args.out, cfg.split, cfg.episodes, cfg.seed)
    _write_run_config(cfg, os.path.join(args.out, cfg.split), out=args.out)
    stats = datastore.compute_stats(args.out, manifest)
    print(f"wrote {stats.episodes} episodes ({stats.frames} frames) to "
          f"{os.path.join(args.out, cfg.split)} in {time.time() - t0:.0f} s")
    _print_stats(stats)
    return 0


def _split_parts(data_dir):
    data_dir = os.path.normpath(data_dir)
    return os.path.dirname(data_dir), os.path.basename(data_dir)


def _print_stats(stats: datastore.SplitStats):
    print(f"{'split':<8}{'episodes':>10}{'frames':>10}"
          f"{'words':>8}{'clicks':>8}")
    print(f"{stats.split:<8}{stats.episodes:>10}{stats.frames:>10}"
          f"{stats.mean_words:>8.2f}{stats.mean_clicks:>8.2f}")


def _cmd_stats(cfg: RunConfig, args) -> int:
    root, split = _split_parts(args.data)
    manifest = datastore.read_split(root, split)
    _print_stats(datastore.compute_stats(root, manifest))
    return 0


# ---------------------------------------------------------------------------
# training

def _cmd_train(cfg: RunConfig, args) -> int:
    root, split = _split_parts(args.data)
    manifest = datastore.read_split(root, split)
    vocab = cmd.Vocabulary()
    mcfg = cfg.model_config()
    samples = []
    for directory in datastore.split_episode_dirs(root, manifest):
        samples.extend(gr.episode_samples(datastore.read_episode(directory),
                                          mcfg, vocab))
    model = gr.GroundingModel(mcfg, seed=cfg.seed)
    t0 = time.time()
    hist = gr.fit(model, samples, steps=cfg.steps,
                  batch_size=cfg.batch_size, seed=cfg.seed, lr0=cfg.lr)
    dt = time.time() - t0
    gr.save_model(model, args.out, vocab)
    _write_run_config(cfg, args.out, data=args.data, out=args.out)
    navs = [h[0] for h in hist]
    print(f"trained {cfg.steps} steps on {len(samples)} samples in "
          f"{dt:.0f} s; nav loss {navs[0]:+.3f} -> "
          f"{float(np.mean(navs[-25:])):+.3f}; saved {args.out}")
    return 0


# ---------------------------------------------------------------------------
# evaluation

def _load_grounder_factory(cfg, args, vocab):
    """(factory, model_id, n_frames) for --oracle or --model paths."""
    if getattr(args, "oracle", False):
        cam = navctl.RunConfig().cam
        return (lambda world, rs: oc.OracleGrounder(world, rs, cam),
                "oracle", cfg.frames)
    if not os.path.exists(args.model):
        print(f"model not found: {args.model}", file=sys.stderr)
        return None, None, None
    model, mcfg = gr.load_model(args.model, vocab)
    return (lambda world, rs: gr.NeuralGrounder(model, vocab),
            os.path.basename(args.model), mcfg.n_frames)


def _cmd_eval(cfg: RunConfig, args) -> int:
    vocab = cmd.Vocabulary()
    factory, model_id, n_frames = _load_grounder_factory(cfg, args, vocab)
    if factory is None:
        return 1
    root, split = _split_parts(args.split)
    cfg = replace(cfg, split=split)      # flag held the directory
    manifest = datastore.read_split(root, split)
    eval_cfg = metrics.EvalConfig(run=cfg.run_config(n_frames))

    on_result = None
    if args.plots:
        os.makedirs(args.plots, exist_ok=True)

        def on_result(name, result, head):
            driven = np.asarray([(p.x, p.y) for p in result.driven_path])
            metrics.render_overlay_svg(
                driven, head.route,
                os.path.join(args.plots, f"{name}.svg"),
                goal_pose=head.goal_pose)

    report = metrics.evaluate_split(factory, root, manifest, eval_cfg,
                                    model_id=model_id, on_result=on_result)
    with open(args.report, "w") as fh:
        fh.write(report.to_json())
    _write_run_config(cfg, args.report, split=args.split,
                      report=args.report, model=getattr(args, "model", None))
    agg = report.aggregates
    print(f"{model_id} on {split}: TC {agg['mean_task_completion']:.3f}  "
          f"nDTW {agg['mean_ndtw']:.3f}  "
          f"frechet {agg['mean_frechet']:.2f} m  "
          f"({agg['scored']}/{agg['episodes']} scored) -> {args.report}")
    return 0


def _cmd_run(cfg: RunConfig, args) -> int:
    vocab = cmd.Vocabulary()
    factory, model_id, n_frames = _load_grounder_factory(cfg, args, vocab)
    if factory is None:
        return 1
    head = datastore.read_header(args.episode)
    world = ws.generate_map(head.map_seed)
    rs = oc.RouteState(points=head.route, goal_pose=head.goal_pose,
                       lane_ids=metrics.infer_lane_ids(world, head.route))
    result = navctl.run_episode(world, head.command, factory(world, rs), rs,
                                cfg.run_config(n_frames))
    row = metrics.score_episode(os.path.basename(args.episode), result,
                                head.route, head.goal_pose)
    print(json.dumps({"model": model_id, **row}, indent=1))
    return 0


# ---------------------------------------------------------------------------
# services

def _cmd_annotate(cfg: RunConfig, args) -> int:
    ann = service.AnnotationConfig(map_seed=cfg.map_seed,
                                   spawn_index=cfg.spawn_index,
                                   actor_seed=cfg.actor_seed,
                                   sim=cfg.sim, planner=cfg.planner,
                                   time_scale=cfg.time_scale)
    os.makedirs(args.out, exist_ok=True)
    _write_run_config(cfg, args.out, out=args.out)
    print(f"annotation service on port {cfg.port}, episodes -> {args.out}")
    try:
        service.serve_annotation(cfg.port, args.out, ann)
    except KeyboardInterrupt:
        pass
    return 0


def _cmd_serve(cfg: RunConfig, args) -> int:
    vocab = cmd.Vocabulary()
    if not os.path.exists(args.model):
        print(f"model not found: {args.model}", file=sys.stderr)
        return 1
    model, _ = gr.load_model(args.model, vocab)
    print(f"grounding service for {args.model} on port {cfg.port}")
    try:
        service.serve_grounding(cfg.port, service.TokenGrounder(model))
    except KeyboardInterrupt:
        pass
    return 0


# ---------------------------------------------------------------------------
# gradient checking

def _gradcheck_cases():
    rng = np.random.default_rng(7)
    lin = nn.Linear(6, 4, rng)
    x_lin = nn.Tensor(rng.normal(size=(3, 6)))
    conv2 = nn.Conv2d(2, 3, 3, rng, padding=1)
    x_c2 = nn.Tensor(rng.normal(size=(1, 2, 6, 6)))
    conv3 = nn.Conv3d(1, 2, (3, 2, 2), rng)
    x_c3 = nn.Tensor(rng.normal(size=(1, 1, 3, 4, 4)))
    emb = nn.Embedding(10, 4, rng)
    ids = rng.integers(0, 10, 5)
    attn = nn.MultiHeadSelfAttention(8, 2, rng)
    x_at = nn.Tensor(rng.normal(size=(5, 8)))

    def attn_loss():
        out, weights = attn(x_at)
        return (out * out).sum() + weights.sum()

    return [
        ("linear", lambda: lin(x_lin).sigmoid().sum(), lin.parameters()),
        ("conv2d", lambda: conv2(x_c2).relu().sum(), conv2.parameters()),
        ("conv3d", lambda: conv3(x_c3).sigmoid().sum(), conv3.parameters()),
        ("embedding", lambda: emb(ids).sum(), emb.parameters()),
        ("attention", attn_loss, attn.parameters()),
    ]


def _fusion_case():
    cfg = gr.ModelConfig(n_frames=2, channels=8, grid=2, resolution=16)
    model = gr.GroundingModel(cfg, seed=3)
    # biases start at zero, so all-zero one-hot patches land pre-activations
    # exactly on the relu kink where central differences see half a slope;
    # nudge every parameter to a generic point before differencing
    jitter = np.random.default_rng(7)
    for _, p in model.parameters():
        p.data = p.data + jitter.normal(scale=0.05, size=p.data.shape)
    rng = np.random.default_rng(4)
    frames = gr.one_hot_frames(
        [SemanticRaster(rng.integers(0, 9, (16, 16), dtype=np.uint8))
         for _ in range(2)], cfg.n_classes)
    context = SemanticRaster(((rng.random((16, 16)) < 0.3)
                              .astype(np.uint8)) * 255)
    tokens = rng.integers(0, 30, cfg.n_tokens)
    target = (rng.random((16, 16)) < 0.5).astype(float)

    def loss():
        nav, traj = model(frames, context, tokens)
        a = nn.combo_loss(nav.sigmoid(), target)
        b = nn.combo_loss(traj.sigmoid(), 1.0 - target)
        return a + b

    return model, loss


def _cmd_gradcheck(cfg: RunConfig, args) -> int:
    ok = True
    with nn.using_dtype(np.float64):
        for name, loss, params in _gradcheck_cases():
            report = nn.grad_check(loss, params, tolerance=1e-4)
            ok &= report.passed
            print(f"{name:<10} max rel err {report.max_rel_error:.2e} "
                  f"{'ok' if report.passed else 'FAIL'}")
        model, loss = _fusion_case()
        rng = np.random.default_rng(11)
        report = nn.grad_check(loss, model.parameters(), tolerance=1e-3,
                               samples_per_param=4, rng=rng)
        ok &= report.passed
        print(f"{'fusion':<10} max rel err {report.max_rel_error:.2e} "
              f"{'ok' if report.passed else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="langnav",
        description="language-guided navigation tools")
    p.add_argument("--config", help="JSON file overriding defaults")
    sub = p.add_subparsers(dest="subcommand", required=True)

    d = sub.add_parser("dataset", help="record an oracle-driven split")
    d.add_argument("--episodes", type=int, default=None)
    d.add_argument("--seed", type=int, default=None)
    d.add_argument("--out", required=True)
    d.add_argument("--split", default=None)
    d.set_defaults(fn=_cmd_dataset)

    t = sub.add_parser("train", help="fit a grounding model on a split")
    t.add_argument("--data", required=True, help="split directory")
    t.add_argument("--frames", type=int, choices=(1, 2, 4, 6, 8),
                   default=None)
    t.add_argument("--context", action="store_true")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--channels", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True, help="checkpoint path (.nnw)")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="re-drive a split and score it")
    g = e.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--oracle", action="store_true")
    e.add_argument("--split", required=True, help="split directory")
    e.add_argument("--report", required=True, help="output JSON path")
    e.add_argument("--plots", default=None, help="SVG overlay directory")
    e.add_argument("--actor-seed", dest="actor_seed", type=int, default=None)
    e.set_defaults(fn=_cmd_eval)

    r = sub.add_parser("run", help="drive one stored episode live")
    g = r.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--oracle", action="store_true")
    r.add_argument("--episode", required=True, help="episode directory")
    r.add_argument("--actor-seed", dest="actor_seed", type=int, default=None)
    r.set_defaults(fn=_cmd_run)

    a = sub.add_parser("annotate", help="host the annotation service")
    a.add_argument("--port", type=int, default=None)
    a.add_argument("--out", required=True)
    a.add_argument("--map-seed", dest="map_seed", type=int, default=None)
    a.add_argument("--spawn", dest="spawn_index", type=int, default=None)
    a.set_defaults(fn=_cmd_annotate)

    s = sub.add_parser("serve", help="host a grounding model")
    s.add_argument("--port", type=int, default=None)
    s.add_argument("--model", required=True)
    s.set_defaults(fn=_cmd_serve)

    st = sub.add_parser("stats", help="print split statistics")
    st.add_argument("--data", required=True, help="split directory")
    st.set_defaults(fn=_cmd_stats)

    gc = sub.add_parser("gradcheck", help="numeric gradient verification")
    gc.set_defaults(fn=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (OSError, json.JSONDecodeError, KeyError) as err:
        print(f"bad config: {err}", file=sys.stderr)
        return 1
    try:
        return args.fn(cfg, args)
    except (datastore.FormatError, datastore.ValidationError,
            nn.WeightsError, cmd.ParseError, OSError) as err:
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        return 1


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
