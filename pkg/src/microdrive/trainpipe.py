"""Staged training orchestration.

Stage 0 pretrains the perception stack on detection and segmentation, then
warm-starts the language model with a next-token pass over the mixed record
streams (perception and projectors frozen) so the later stages start from a
language model that already knows the prompt templates and output grammars.
Stage 1 aligns the token-type projectors against caption targets with
everything else frozen. Stage 2 instruction-tunes projectors plus the
language model on QA records, stage 2.5 adds per-agent motion forecasting,
and stage 3 tunes everything except the 2D view encoder on trajectory
planning. Freeze schedules are enforced per named parameter group and
verified through exact parameter-delta norms in each TrainReport.
"""

import hashlib
import math
import json
import os
import random
import time
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from . import annotate, codec, lm as lm_mod, perception, world
from .lm import (LMConfig, MultimodalSequence, Projectors, TinyLM, splice,
                 append_target, lm_loss)
from .perception import PerceptionConfig, PerceptionModel, filter_agents

PARAM_GROUPS = ["view_encoder_2d", "bev_refiner", "query_transformers",
                "projectors", "lm"]

STAGES = ["s0", "s1", "s2", "s25", "s3"]

# stage 0 runs two phases: perception pretraining ("s0") and the language
# warm-start ("s0_lm"); both live in the single s0 checkpoint
PHASES = ["s0", "s0_lm", "s1", "s2", "s25", "s3"]

# trainable groups per stage
FREEZE_PLANS = {
    "s0": {"view_encoder_2d": True, "bev_refiner": True,
           "query_transformers": True, "projectors": False, "lm": False},
    "s0_lm": {"view_encoder_2d": False, "bev_refiner": False,
              "query_transformers": False, "projectors": False, "lm": True},
    "s1": {"view_encoder_2d": False, "bev_refiner": False,
           "query_transformers": False, "projectors": True, "lm": False},
    "s2": {"view_encoder_2d": False, "bev_refiner": False,
           "query_transformers": False, "projectors": True, "lm": True},
    "s25": {"view_encoder_2d": False, "bev_refiner": False,
            "query_transformers": False, "projectors": True, "lm": True},
    "s3": {"view_encoder_2d": False, "bev_refiner": True,
           "query_transformers": True, "projectors": True, "lm": True},
}

STAGE_RECORD_FILES = {
    "s1": "stage1", "s2": "stage2", "s25": "stage25", "s3": "stage3",
}

# language warm-start data mixture: planning trajectories are repeated
# because the digit-level trajectory grammar is the hardest skill to acquire
# and dilution measurably degrades it
WARMSTART_MIX = {"stage1": 1, "stage2": 1, "stage25": 1, "stage3": 16}

# planning records whose ground-truth future bends sideways are rare (most
# keyframes drive straight), so greedy decoding otherwise collapses onto
# straight-line trajectories; repeating maneuver frames gives turn commands
# enough gradient mass to shape the lateral digits
MANEUVER_MIN_LATERAL_M = 0.25
MANEUVER_REPEATS = 3


def emphasize_maneuvers(records, episodes,
                        min_lateral=MANEUVER_MIN_LATERAL_M,
                        repeats=MANEUVER_REPEATS):
    """Repeat planning records whose future has lateral displacement."""
    extra = []
    for rec in records:
        future = episodes[rec["episode_id"]].ego_future[rec["frame_index"]]
        lateral = abs(sum(x for x, _ in future) / len(future))
        if lateral >= min_lateral:
            extra.extend([rec] * (repeats - 1))
    return list(records) + extra


# question categories are heavily imbalanced in the generated corpus;
# left/right comparison is both the rarest and the slowest to converge
# (the answer restates both entities, so the copying skill needs many
# examples), so it gets extra repeats during instruction tuning
QA_CATEGORY_REPEATS = {"comparison": 4}


def emphasize_categories(records, repeats=None):
    """Repeat question records of under-represented categories."""
    repeats = QA_CATEGORY_REPEATS if repeats is None else repeats
    extra = []
    for rec in records:
        n = repeats.get(rec.get("category"), 1)
        if n > 1:
            extra.extend([rec] * (n - 1))
    return list(records) + extra


@dataclass
class StageConfig:
    stage: str
    lr: float = 1e-3
    lr_vision: float = None
    epochs: int = 1
    batch_size: int = 1
    seed: int = 0
    warmup_frac: float = 0.03
    grad_accum: int = 1
    max_records: int = None
    decay_to: float = 1.0

    def __post_init__(self):
        if self.stage not in PHASES:
            raise ValueError(f"unknown stage: {self.stage}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0 or (self.lr_vision is not None and self.lr_vision <= 0):
            raise ValueError("learning rates must be positive")
        if self.max_records is not None and self.max_records < 1:
            raise ValueError("max_records must be >= 1")
        if not 0.0 < self.decay_to <= 1.0:
            raise ValueError("decay_to must be in (0, 1]")

    def to_json(self):
        return asdict(self)


@dataclass
class TrainReport:
    stage: str
    losses: list
    start_loss: float
    end_loss: float
    wall_time_s: float
    config_hash: str
    delta_norms: dict

    def to_json(self):
        return asdict(self)


def config_hash(*configs):
    """Stable hash over canonically serialized config dicts."""
    blob = json.dumps([c.to_json() if hasattr(c, "to_json") else c
                       for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class DrivingPipeline(nn.Module):
    """Perception stack, token-type projectors, and the language model."""

    def __init__(self, vocab, perception_config=None, lm_config=None):
        super().__init__()
        self.vocab = vocab
        self.perception_config = perception_config or PerceptionConfig()
        lm_config = lm_config or LMConfig()
        if lm_config.vocab_size == 0:
            lm_config.vocab_size = len(vocab)
        self.lm_config = lm_config
        self.perception = PerceptionModel(self.perception_config)
        self.projectors = Projectors(in_dim=self.perception_config.d_model,
                                     d_model=lm_config.d_model)
        self.lm = TinyLM(lm_config)

    def param_groups(self):
        p = self.perception
        return {
            "view_encoder_2d": list(p.view_encoder.parameters()),
            "bev_refiner": list(p.bev_refiner.parameters()),
            "query_transformers": (list(p.agent_transformer.parameters())
                                   + list(p.map_transformer.parameters())
                                   + list(p.scene_sampler.parameters())),
            "projectors": list(self.projectors.parameters()),
            "lm": list(self.lm.parameters()),
        }

    def env_tokens(self, frame):
        """Unfiltered environment tokens for one frame."""
        return self.perception(frame)

    def spans(self, env):
        """Projected scene / track / map embedding spans for splicing."""
        kept = filter_agents(env.agents, self.perception_config.score_threshold,
                             self.perception_config.max_agents)
        return {
            "scene": self.projectors("scene", env.scene),
            "track": self.projectors("agent", kept.tokens),
            "map": self.projectors("map", env.map.tokens),
        }

    def object_token(self, env, frame, agent_id):
        """Query token matched to a ground-truth agent by center distance."""
        gt = frame.agent(agent_id)
        x, y = world.to_ego_frame(frame.ego.pose, gt.pose[:2])
        d = ((env.agents.boxes[:, 0] - x) ** 2
             + (env.agents.boxes[:, 1] - y) ** 2)
        return env.agents.tokens[int(d.argmin())]


def apply_freeze(pipeline, plan):
    for name, params in pipeline.param_groups().items():
        for p in params:
            p.requires_grad_(plan[name])


def group_norms(pipeline):
    with torch.no_grad():
        return {name: torch.cat([p.flatten() for p in params]).clone()
                for name, params in pipeline.param_groups().items()}


def delta_norms(pipeline, before):
    with torch.no_grad():
        after = group_norms(pipeline)
        return {name: float((after[name] - before[name]).norm())
                for name in before}


def _summary_loss(losses, n=20):
    k = min(n, max(1, len(losses) // 5))
    return float(sum(losses[:k]) / k), float(sum(losses[-k:]) / k)


def _make_optimizer(pipeline, cfg):
    plan = FREEZE_PLANS[cfg.stage]
    vision_groups = {"view_encoder_2d", "bev_refiner", "query_transformers"}
    groups = []
    for name, params in pipeline.param_groups().items():
        if not plan[name]:
            continue
        lr = cfg.lr
        if name in vision_groups and cfg.lr_vision is not None:
            lr = cfg.lr_vision
        groups.append({"params": params, "lr": lr})
    return torch.optim.Adam(groups)


def _warmup_scale(step, total, frac):
    warm = max(1, int(total * frac))
    return min(1.0, (step + 1) / warm)


def _lr_scale(step, total, cfg):
    """Linear warmup followed by cosine decay to cfg.decay_to of the base lr."""
    scale = _warmup_scale(step, total, cfg.warmup_frac)
    if cfg.decay_to < 1.0:
        progress = min(1.0, step / max(1, total - 1))
        cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
        scale *= cfg.decay_to + (1.0 - cfg.decay_to) * cosine
    return scale


def text_prior_span(pipeline, frame, group, agent_id=None):
    """Span of the LM's own token embeddings for a ground-truth description.

    scene: the scene caption's token embeddings, zero-padded to the span
    length; track: one mean-pooled agent-caption embedding per agent slot;
    map: the map caption's tokens mean-pooled into one chunk per map slot;
    object: the pooled caption of one agent.
    """
    pc = pipeline.perception_config
    d = pipeline.lm_config.d_model
    tok = pipeline.lm.tok_emb

    def padded(text, length):
        ids = pipeline.vocab.encode_text(text)[:length]
        out = torch.zeros(length, d)
        if ids:
            out[:len(ids)] = tok(torch.tensor(ids))
        return out

    def pooled(text):
        ids = pipeline.vocab.encode_text(text)
        if not ids:
            return torch.zeros(d)
        return tok(torch.tensor(ids)).mean(0)

    if group == "scene":
        return padded(annotate.caption_scene(frame).text, pc.n_scene_tokens)
    if group == "track":
        agents = frame.agents[:pc.max_agents]
        if not agents:
            return torch.zeros(0, d)
        return torch.stack(
            [pooled(annotate.caption_agent(frame, a.agent_id).text)
             for a in agents])
    if group == "map":
        ids = pipeline.vocab.encode_text(
            annotate.caption_map(frame.lane_graph).text)
        chunks = []
        n = pc.n_map_queries
        for i in range(n):
            part = ids[i * len(ids) // n:(i + 1) * len(ids) // n]
            chunks.append(tok(torch.tensor(part)).mean(0) if part
                          else torch.zeros(d))
        return torch.stack(chunks)
    if group == "object":
        return pooled(annotate.caption_agent(frame, agent_id).text)[None]
    raise ValueError(f"unknown span group: {group}")


def build_sequence(pipeline, record, episodes, env=None, text_only=False):
    """Spliced, target-appended training sequence for one corpus record.

    With text_only=True the embedding spans carry the language model's own
    token embeddings of ground-truth text descriptions (scene caption, one
    pooled agent caption per track slot, map caption) at their natural span
    lengths, instead of perception outputs. The warm-start therefore (a)
    sees text at the same positions the aligned model will — the position
    embeddings are absolute — and (b) learns to *read* span content that
    lives in its own text embedding space, which is what the later projector
    alignment stage maps perception tokens into.
    """
    ep = episodes[record["episode_id"]]
    frame = ep.frames[record["frame_index"]]
    kind = record["prompt_kind"]
    if kind in ("caption_scene", "caption_map", "caption_agent"):
        prompt = codec.assemble_prompt(kind)
        groups = {"caption_scene": ("scene",), "caption_map": ("map",),
                  "caption_agent": ("object",)}[kind]
    elif kind == "qa":
        prompt = codec.assemble_prompt(kind, ego=frame.ego,
                                       question=record["question"])
        groups = ("scene", "track", "map")
    elif kind == "forecast":
        history_text = codec.format_points(frame.ego.history)
        prompt = codec.assemble_prompt(kind, history_text=history_text)
        groups = ("scene", "track", "map", "object")
    elif kind == "plan":
        prompt = codec.assemble_prompt(kind, ego=frame.ego,
                                       command=record["command"])
        groups = ("scene", "track", "map")
    else:
        raise ValueError(f"unknown prompt kind: {kind}")
    if text_only:
        embeds = {g: text_prior_span(pipeline, frame, g,
                                     agent_id=record.get("agent_id"))
                  for g in groups}
    else:
        if env is None:
            env = pipeline.env_tokens(frame)
        spans = pipeline.spans(env)
        embeds = {g: spans[g] for g in groups if g in spans}
        if "object" in groups:
            tok = pipeline.object_token(env, frame, record["agent_id"])
            embeds["object"] = pipeline.projectors("agent", tok[None])
    seq = splice(prompt, embeds, pipeline.vocab)
    return append_target(seq, kind, record["answer"], pipeline.vocab)


def pretrain_perception(frames, pipeline, cfg):
    """Stage 0: detection + segmentation training of the perception stack."""
    if cfg.stage != "s0":
        raise ValueError("pretrain_perception expects a stage-0 config")
    torch.manual_seed(cfg.seed)
    apply_freeze(pipeline, FREEZE_PLANS["s0"])
    opt = _make_optimizer(pipeline, cfg)
    before = group_norms(pipeline)
    total = cfg.epochs * len(frames)
    losses = []
    t0 = time.time()
    model = pipeline.perception
    pcfg = pipeline.perception_config
    step = 0
    for _ in range(cfg.epochs):
        for frame in frames:
            env = model(frame)
            at = model.agent_transformer
            out = perception.perception_loss(
                env.agents, env.map, frame, pcfg,
                class_logits=at.class_logits(), heat=at._heat)
            loss = out["total"]
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite stage-0 loss at step {step}")
            scale = _lr_scale(step, total, cfg)
            for g in opt.param_groups:
                g["lr"] = cfg.lr * scale
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
    start, end = _summary_loss(losses)
    return TrainReport(stage="s0", losses=losses, start_loss=start,
                       end_loss=end, wall_time_s=time.time() - t0,
                       config_hash=config_hash(cfg), delta_norms=delta_norms(pipeline, before))


def pretrain_lm(pipeline, records, episodes, cfg):
    """Stage-0 language warm-start: next-token training over text sequences.

    Trains only the language model on the pure-text form of the mixed record
    streams (embedding spans left empty), supervising every position, so the
    model enters alignment knowing the prompt templates, answer structure,
    and trajectory grammar — but nothing about the visual tokens. Records
    are shuffled deterministically and optionally capped via cfg.max_records.
    """
    if cfg.stage != "s0_lm":
        raise ValueError("pretrain_lm expects an s0_lm config")
    torch.manual_seed(cfg.seed)
    records = list(records)
    random.Random(cfg.seed).shuffle(records)
    if cfg.max_records is not None:
        records = records[:cfg.max_records]
    apply_freeze(pipeline, FREEZE_PLANS["s0_lm"])
    opt = _make_optimizer(pipeline, cfg)
    base_lrs = [g["lr"] for g in opt.param_groups]
    before = group_norms(pipeline)
    losses = []
    total = cfg.epochs * len(records)
    t0 = time.time()
    step = 0
    for _ in range(cfg.epochs):
        for rec in records:
            seq = build_sequence(pipeline, rec, episodes, text_only=True)
            seq = MultimodalSequence(slots=seq.slots,
                                     target_mask=[True] * len(seq.slots))
            loss = lm_loss(pipeline.lm(seq), seq)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite s0_lm loss at step {step}")
            scale = _lr_scale(step, total, cfg)
            for g, base in zip(opt.param_groups, base_lrs):
                g["lr"] = base * scale
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
    start, end = _summary_loss(losses)
    return TrainReport(stage="s0_lm", losses=losses, start_loss=start,
                       end_loss=end, wall_time_s=time.time() - t0,
                       config_hash=config_hash(cfg),
                       delta_norms=delta_norms(pipeline, before))


def train_stage(pipeline, records, episodes, cfg):
    """Language-side stages s1 / s2 / s25 / s3 over prepared records."""
    if cfg.stage not in ("s1", "s2", "s25", "s3"):
        raise ValueError(f"train_stage does not handle {cfg.stage}")
    torch.manual_seed(cfg.seed)
    if cfg.max_records is not None and len(records) > cfg.max_records:
        records = list(records)
        random.Random(cfg.seed).shuffle(records)
        records = records[:cfg.max_records]
    plan = FREEZE_PLANS[cfg.stage]
    apply_freeze(pipeline, plan)
    opt = _make_optimizer(pipeline, cfg)
    base_lrs = [g["lr"] for g in opt.param_groups]
    before = group_norms(pipeline)
    vision_frozen = not (plan["bev_refiner"] or plan["query_transformers"]
                         or plan["view_encoder_2d"])
    env_cache = {}
    losses = []
    total = cfg.epochs * len(records)
    t0 = time.time()
    step = 0
    for _ in range(cfg.epochs):
        for rec in records:
            env = None
            if vision_frozen:
                key = (rec["episode_id"], rec["frame_index"])
                if key not in env_cache:
                    with torch.no_grad():
                        frame = episodes[rec["episode_id"]].frames[rec["frame_index"]]
                        env_cache[key] = pipeline.env_tokens(frame)
                env = env_cache[key]
            seq = build_sequence(pipeline, rec, episodes, env=env)
            loss = lm_loss(pipeline.lm(seq), seq)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite {cfg.stage} loss at step {step}")
            scale = _lr_scale(step, total, cfg)
            for g, base in zip(opt.param_groups, base_lrs):
                g["lr"] = base * scale
            (loss / cfg.grad_accum).backward()
            if (step + 1) % cfg.grad_accum == 0:
                opt.step()
                opt.zero_grad()
            losses.append(float(loss.detach()))
            step += 1
    opt.step()
    opt.zero_grad()
    start, end = _summary_loss(losses)
    return TrainReport(stage=cfg.stage, losses=losses, start_loss=start,
                       end_loss=end, wall_time_s=time.time() - t0,
                       config_hash=config_hash(cfg),
                       delta_norms=delta_norms(pipeline, before))


# --- checkpoints ---------------------------------------------------------


def save_checkpoint(pipeline, path, stage, parent_hash=None, report=None):
    """Write {params.pt, vocab.json, manifest.json} under path."""
    os.makedirs(path, exist_ok=True)
    params_path = os.path.join(path, "params.pt")
    torch.save(pipeline.state_dict(), params_path)
    pipeline.vocab.save(os.path.join(path, "vocab.json"))
    with open(params_path, "rb") as f:
        params_hash = hashlib.sha256(f.read()).hexdigest()[:16]
    manifest = {
        "stage": stage,
        "config_hash": config_hash(
            {"perception": asdict(pipeline.perception_config),
             "lm": asdict(pipeline.lm_config)}),
        "params_hash": params_hash,
        "parent_hash": parent_hash,
        "perception_config": asdict(pipeline.perception_config),
        "lm_config": asdict(pipeline.lm_config),
        "param_shapes": {k: list(v.shape)
                         for k, v in pipeline.state_dict().items()},
    }
    if report is not None:
        reports = report if isinstance(report, list) else [report]
        summaries = [{k: v for k, v in r.to_json().items() if k != "losses"}
                     for r in reports]
        manifest["report"] = summaries[-1]
        if len(summaries) > 1:
            manifest["reports"] = summaries
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_checkpoint(path):
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    vocab = lm_mod.Vocabulary.load(os.path.join(path, "vocab.json"))
    pcfg = PerceptionConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in manifest["perception_config"].items()})
    lcfg = LMConfig(**manifest["lm_config"])
    pipeline = DrivingPipeline(vocab, pcfg, lcfg)
    state = torch.load(os.path.join(path, "params.pt"), weights_only=True)
    pipeline.load_state_dict(state)
    return pipeline, manifest


def checkpoint_params_hash(path):
    with open(os.path.join(path, "params.pt"), "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:16]


DEFAULT_STAGE_CONFIGS = {
    "s0": StageConfig(stage="s0", lr=1e-3, epochs=3),
    "s0_lm": StageConfig(stage="s0_lm", lr=1e-3, epochs=1, max_records=10000,
                         decay_to=0.1),
    "s1": StageConfig(stage="s1", lr=1e-3, epochs=1, max_records=2000),
    # question answering needs by far the most optimization: the attention
    # circuits that look up span content form an order of magnitude later
    # than the answer-format skills
    "s2": StageConfig(stage="s2", lr=1e-3, epochs=3, max_records=9000,
                      decay_to=0.2),
    "s25": StageConfig(stage="s25", lr=3e-4, epochs=1, max_records=1500),
    "s3": StageConfig(stage="s3", lr=1e-3, lr_vision=1e-4, epochs=7,
                      decay_to=0.05),
}


def run_all(pipeline, episodes, streams, ckpt_dir, stage_configs=None,
            stages=None, frames_per_episode=3):
    """Run the staged pipeline in order, saving a checkpoint per stage.

    streams: {"stage1": [...], ..., "stage3": [...]} record lists. stages
    may be a subset (always in canonical order) for ablation protocols.
    Returns the ordered list of TrainReports.
    """
    stages = [s for s in STAGES if s in (stages or STAGES)]
    cfgs = dict(DEFAULT_STAGE_CONFIGS)
    cfgs.update(stage_configs or {})
    reports = []
    parent = None
    for stage in stages:
        cfg = cfgs[stage]
        stage_reports = []
        if stage == "s0":
            frames = [ep.frames[k] for ep in episodes
                      for k in sorted(ep.ego_future)[:frames_per_episode]]
            stage_reports.append(pretrain_perception(frames, pipeline, cfg))
            mixed = [rec for name, repeats in WARMSTART_MIX.items()
                     for rec in streams[name] * repeats]
            stage_reports.append(
                pretrain_lm(pipeline, mixed, episodes, cfgs["s0_lm"]))
        else:
            records = streams[STAGE_RECORD_FILES[stage]]
            if stage == "s2":
                records = emphasize_categories(records)
            elif stage == "s3":
                records = emphasize_maneuvers(records, episodes)
            stage_reports.append(train_stage(pipeline, records, episodes, cfg))
        path = os.path.join(ckpt_dir, stage)
        manifest = save_checkpoint(pipeline, path, stage,
                                   parent_hash=parent, report=stage_reports)
        parent = manifest["params_hash"]
        reports.extend(stage_reports)
    return reports


# --- inference ----------------------------------------------------------


def plan_trajectory(pipeline, frame, command, max_new_tokens=120):
    """Full planning inference path for one frame.

    Returns {"waypoints": [(x, y) * 6] | None, "raw": str, "truncated": bool,
    "error": str | None}.
    """
    pipeline.eval()
    with torch.no_grad():
        env = pipeline.env_tokens(frame)
        prompt = codec.assemble_prompt("plan", ego=frame.ego, command=command)
        seq = splice(prompt, pipeline.spans(env), pipeline.vocab)
        out = lm_mod.generate(pipeline.lm, seq, pipeline.vocab,
                              max_new_tokens=max_new_tokens)
    parsed = codec.parse_answer(out["token_ids"], pipeline.vocab)
    result = {"waypoints": None, "raw": parsed["trajectory"] or "",
              "truncated": out["truncated"], "error": None}
    if parsed["trajectory"] is None:
        result["error"] = "no trajectory span in output"
        return result
    try:
        result["waypoints"] = codec.decode_waypoints(parsed["trajectory"])
    except codec.CodecError as e:
        result["error"] = str(e)
    return result


def answer_question(pipeline, frame, question, max_new_tokens=32):
    """QA inference path; returns the detokenized answer string (may be "")."""
    pipeline.eval()
    with torch.no_grad():
        env = pipeline.env_tokens(frame)
        prompt = codec.assemble_prompt("qa", ego=frame.ego, question=question)
        seq = splice(prompt, pipeline.spans(env), pipeline.vocab)
        out = lm_mod.generate(pipeline.lm, seq, pipeline.vocab,
                              max_new_tokens=max_new_tokens)
    parsed = codec.parse_answer(out["token_ids"], pipeline.vocab)
    return parsed["answer"] or ""
