"""Command-line entry point: data generation, training, evaluation, inference.

Exit codes: 0 success, 1 I/O error, 2 config or precondition error, 3 model
output parse failure. Every command writes a RunManifest into its output
directory before long-running work starts. The seed precedence is
--seed flag > OPENVLA_MICRO_SEED environment variable > config file > 0.
"""

import argparse
import hashlib
import json
import os
import sys
import time

from . import __version__, annotate, codec, evaluation, lm, trainpipe, world
from .lm import LMConfig
from .perception import PerceptionConfig

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_PARSE = 3

SEED_ENV_VAR = "OPENVLA_MICRO_SEED"

# CLI stage names to internal stage ids
STAGE_NAMES = {"s0": "s0", "s1": "s1", "s2": "s2", "s2.5": "s25", "s3": "s3"}
PARENT_STAGE = {"s0": None, "s1": "s0", "s2": "s1", "s25": "s2", "s3": "s25"}


class ConfigError(Exception):
    pass


def load_config(path):
    """Parse a JSON or TOML config file into a dict."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    if path.endswith(".toml"):
        import tomllib
        try:
            return tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"bad TOML in {path}: {e}")
    try:
        return json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"bad JSON in {path}: {e}")


def resolve_seed(flag_seed, config):
    """Seed precedence: flag > environment > config file > 0."""
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer: {env!r}")
    return int(config.get("seed", 0))


def _file_hash(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:16]


def write_manifest(out_dir, args, seed, extra=None):
    """Write the RunManifest before any long-running work starts."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command_line": sys.argv,
        "tool_version": __version__,
        "seed": seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "output_dir": os.path.abspath(out_dir),
        "config_file": getattr(args, "config", None),
        "config_hash": (_file_hash(args.config)
                        if getattr(args, "config", None) else None),
    }
    manifest.update(extra or {})
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


def _world_config(config):
    return world.WorldConfig(**config.get("world", {}))


def _model_configs(config):
    pcfg = PerceptionConfig(**{
        k: tuple(v) if isinstance(v, list) else v
        for k, v in config.get("perception", {}).items()})
    lcfg = LMConfig(**config.get("lm", {}))
    return pcfg, lcfg


def _stage_configs(config):
    out = {}
    for name, overrides in config.get("stages", {}).items():
        stage = STAGE_NAMES.get(name, name)
        base = trainpipe.DEFAULT_STAGE_CONFIGS[stage]
        merged = dict(base.to_json())
        merged.update(overrides)
        merged["stage"] = stage
        out[stage] = trainpipe.StageConfig(**merged)
    return out


# --- gen-data ----------------------------------------------------------------


def cmd_gen_data(args):
    config = load_config(args.config)
    seed = resolve_seed(args.seed, config)
    write_manifest(args.out, args, seed, extra={"episodes": args.episodes})
    wcfg = _world_config(config)
    episodes = [world.generate_episode(wcfg, seed=seed + i)
                for i in range(args.episodes)]
    world.write_episodes_jsonl(episodes, os.path.join(args.out, "world.jsonl"))
    counts = annotate.build_instruction_dataset(
        episodes, args.out,
        frame_stride=int(config.get("frame_stride", 1)),
        qa_seed=int(config.get("qa_seed", 0)))
    print(f"episodes {args.episodes}")
    for stage, n in counts.items():
        print(f"{stage} {n}")
    return EXIT_OK


# --- train -------------------------------------------------------------------


def _load_data(data_dir):
    episodes = world.read_episodes_jsonl(os.path.join(data_dir, "world.jsonl"))
    streams = {stage: annotate.read_records(os.path.join(data_dir, fname))
               for stage, fname in annotate.STAGE_FILES.items()}
    return episodes, streams


def _fresh_pipeline(streams, config, seed):
    import torch
    records = [r for v in streams.values() for r in v]
    if not records:
        raise ConfigError("no training records in data directory")
    vocab = lm.build_vocab(records)
    pcfg, lcfg = _model_configs(config)
    torch.manual_seed(seed)
    return trainpipe.DrivingPipeline(vocab, pcfg, lcfg)


def cmd_train(args):
    config = load_config(args.config)
    seed = resolve_seed(args.seed, config)
    write_manifest(args.ckpt, args, seed, extra={"stage": args.stage,
                                                 "data_dir": args.data})
    episodes, streams = _load_data(args.data)
    stage_cfgs = _stage_configs(config)
    frames_per_ep = int(config.get("frames_per_episode", 3))

    if args.stage == "all":
        pipeline = _fresh_pipeline(streams, config, seed)
        reports = trainpipe.run_all(pipeline, episodes, streams, args.ckpt,
                                    stage_configs=stage_cfgs,
                                    frames_per_episode=frames_per_ep)
    else:
        stage = STAGE_NAMES[args.stage]
        parent = PARENT_STAGE[stage]
        if parent is None:
            pipeline = _fresh_pipeline(streams, config, seed)
            parent_hash = None
        else:
            parent_dir = os.path.join(args.ckpt, parent)
            if not os.path.exists(os.path.join(parent_dir, "manifest.json")):
                print(f"error: stage {args.stage} requires a {parent} "
                      f"checkpoint at {parent_dir} (none found)",
                      file=sys.stderr)
                return EXIT_CONFIG
            pipeline, parent_manifest = trainpipe.load_checkpoint(parent_dir)
            parent_hash = parent_manifest["params_hash"]
        cfg = stage_cfgs.get(stage, trainpipe.DEFAULT_STAGE_CONFIGS[stage])
        if stage == "s0":
            frames = [ep.frames[k] for ep in episodes
                      for k in sorted(ep.ego_future)[:frames_per_ep]]
            reports = [trainpipe.pretrain_perception(frames, pipeline, cfg)]
            mixed = [r for name in trainpipe.STAGE_RECORD_FILES.values()
                     for r in streams[name]]
            lm_cfg = stage_cfgs.get("s0_lm",
                                    trainpipe.DEFAULT_STAGE_CONFIGS["s0_lm"])
            reports.append(
                trainpipe.pretrain_lm(pipeline, mixed, episodes, lm_cfg))
        else:
            records = streams[trainpipe.STAGE_RECORD_FILES[stage]]
            reports = [trainpipe.train_stage(pipeline, records, episodes, cfg)]
        trainpipe.save_checkpoint(pipeline, os.path.join(args.ckpt, stage),
                                  stage, parent_hash=parent_hash,
                                  report=reports)

    for report in reports:
        if report.stage == "s0_lm":
            path = os.path.join(args.ckpt, "s0", "train_report_lm.json")
        else:
            path = os.path.join(args.ckpt, report.stage, "train_report.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report.to_json(), f, indent=1)
        print(f"{report.stage}: loss {report.start_loss:.4f} -> "
              f"{report.end_loss:.4f} in {report.wall_time_s:.1f}s")
    return EXIT_OK


# --- eval --------------------------------------------------------------------


def _print_headline(metrics):
    print(f"stp3 avg L2 {metrics.l2_stp3['avg']:.4f} m")
    print(f"stp3 avg collision {metrics.coll_stp3['avg']:.4f} %")
    print(f"uniad avg L2 {metrics.l2_uniad['avg']:.4f} m")
    print(f"uniad avg collision {metrics.coll_uniad['avg']:.4f} %")


def cmd_eval(args):
    config = load_config(args.config)
    seed = resolve_seed(args.seed, config)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    write_manifest(out_dir, args, seed, extra={"suite": args.suite,
                                               "checkpoint": args.ckpt})
    episodes, streams = _load_data(args.data)
    base, _ = os.path.splitext(args.out)
    meta = {"checkpoint": args.ckpt,
            "checkpoint_hash": trainpipe.checkpoint_params_hash(args.ckpt)
            if args.ckpt else None,
            "suite": args.suite, "seed": seed}

    if args.suite == "plan":
        pipeline, _ = trainpipe.load_checkpoint(args.ckpt)
        metrics, samples = evaluation.evaluate_planner(
            evaluation.model_policy(pipeline), episodes, streams["stage3"],
            workers=args.workers)
        baseline, _ = evaluation.evaluate_planner(
            evaluation.constant_velocity_policy, episodes, streams["stage3"])
        evaluation.write_report(args.out, metrics, meta=meta)
        evaluation.write_csv(base + ".csv", [("model", metrics),
                                             ("constant_velocity", baseline)])
        evaluation.write_samples_jsonl(base + "_samples.jsonl", samples)
        _print_headline(metrics)
    elif args.suite == "qa":
        pipeline, _ = trainpipe.load_checkpoint(args.ckpt)
        qa, _ = evaluation.evaluate_qa(pipeline, episodes, streams["stage2"])
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump({"meta": meta, "qa": qa}, f, indent=1, sort_keys=True)
            f.write("\n")
        for n in ("1", "2", "3", "4"):
            print(f"BLEU-{n} {qa['bleu'][n]:.4f}")
        for cat in annotate.QA_CATEGORIES:
            acc = qa["by_category"].get(cat)
            print(f"{cat} accuracy " +
                  ("n/a" if acc is None else f"{acc:.4f}"))
        print(f"overall accuracy {qa['overall']:.4f}")
    elif args.suite == "ablate-input":
        pipeline, _ = trainpipe.load_checkpoint(args.ckpt)
        rows = evaluation.run_input_ablation(pipeline, episodes,
                                             streams["stage3"])
        named = [(r["row"], r["metrics"]) for r in rows]
        evaluation.write_csv(base + ".csv", named)
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump({"meta": meta,
                       "rows": [{"row": r["row"], "enabled": r["enabled"],
                                 "metrics": r["metrics"].to_json()}
                                for r in rows]}, f, indent=1, sort_keys=True)
            f.write("\n")
        for name, m in named:
            print(f"{name}: stp3 avg L2 {m.l2_stp3['avg']:.4f} m")
    elif args.suite == "ablate-stage":
        stage_cfgs = _stage_configs(config)

        def make_pipeline():
            return _fresh_pipeline(streams, config, seed)
        rows = evaluation.run_stage_ablation(
            make_pipeline, episodes, streams, streams["stage3"],
            os.path.join(out_dir, "stage_ablation_ckpts"),
            stage_configs=stage_cfgs)
        named = [(r["row"], r["metrics"]) for r in rows]
        evaluation.write_csv(base + ".csv", named)
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump({"meta": meta,
                       "rows": [{"row": r["row"], "stages": r["stages"],
                                 "metrics": r["metrics"].to_json()}
                                for r in rows]}, f, indent=1, sort_keys=True)
            f.write("\n")
        for name, m in named:
            print(f"{name}: stp3 avg L2 {m.l2_stp3['avg']:.4f} m")
    else:
        print(f"error: unknown suite {args.suite}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


# --- infer -------------------------------------------------------------------


def cmd_infer(args):
    episodes = world.read_episodes_jsonl(args.episode)
    if not episodes:
        raise ConfigError(f"no episodes in {args.episode}")
    ep = episodes[args.episode_index]
    if args.frame not in ep.ego_future:
        raise ConfigError(
            f"frame {args.frame} is not a planning keyframe; "
            f"available: {sorted(ep.ego_future)}")
    frame = ep.frames[args.frame]
    command = args.command

    if args.dry_run:
        prompt = codec.assemble_prompt("plan", ego=frame.ego, command=command)
        print(prompt.text)
        return EXIT_OK

    pipeline, _ = trainpipe.load_checkpoint(args.ckpt)
    out = trainpipe.plan_trajectory(pipeline, frame, command)
    print(f"raw: {out['raw']}")
    if args.question:
        answer = trainpipe.answer_question(pipeline, frame, args.question)
        print(f"answer: {answer}")
    if out["waypoints"] is None:
        print(f"error: {out['error']}", file=sys.stderr)
        return EXIT_PARSE
    for i, (x, y) in enumerate(out["waypoints"]):
        print(f"waypoint {i + 1}: ({x:.2f}, {y:.2f})")
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="microdrive",
        description="Synthetic micro-world driving pipeline: data generation, "
                    "staged training, evaluation, and inference.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate episodes and stage corpora")
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage or all of them")
    t.add_argument("--stage", required=True,
                   choices=["s0", "s1", "s2", "s2.5", "s3", "all"])
    t.add_argument("--data", required=True)
    t.add_argument("--ckpt", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--workers", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run an evaluation suite")
    e.add_argument("--ckpt", default=None)
    e.add_argument("--data", required=True)
    e.add_argument("--suite", required=True,
                   choices=["plan", "qa", "ablate-input", "ablate-stage"])
    e.add_argument("--out", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="plan a trajectory for one frame")
    i.add_argument("--ckpt", default=None)
    i.add_argument("--episode", required=True,
                   help="episodes JSONL file")
    i.add_argument("--episode-index", type=int, default=0)
    i.add_argument("--frame", type=int, required=True)
    i.add_argument("--command", required=True,
                   choices=sorted(codec.COMMAND_TEXT))
    i.add_argument("--question", default=None)
    i.add_argument("--dry-run", action="store_true",
                   help="print the assembled prompt and exit")
    i.add_argument("--workers", type=int, default=1)
    i.set_defaults(func=cmd_infer)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
