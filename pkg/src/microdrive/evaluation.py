"""Open-loop planning and QA metrics, collision geometry, and ablations.

Both metric conventions are implemented and documented here as the normative
definitions: the "stp3" value at horizon T is the cumulative mean over all
waypoints up to T, the "uniad" value is the value at T exactly. Collision
rates follow the same pair: per-step collision fractions averaged up to the
horizon versus the fraction of samples colliding at the horizon step.
"""

import csv
import json
import math
from dataclasses import dataclass, asdict

from . import codec, world
from .codec import N_WAYPOINTS, WAYPOINT_DT_S

HORIZONS_S = (1.0, 2.0, 3.0)
EGO_LENGTH_M = 4.08
EGO_WIDTH_M = 1.73

CONVENTIONS = ("stp3", "uniad")


def _steps(horizon_s):
    if horizon_s not in HORIZONS_S:
        raise ValueError(f"horizon must be one of {HORIZONS_S}: {horizon_s}")
    return int(round(horizon_s / WAYPOINT_DT_S))


def l2_at(pred, gt, horizon_s, convention):
    """Displacement error at a horizon under one of the two conventions.

    "uniad" is the Euclidean error at the waypoint for horizon_s exactly;
    "stp3" is the mean error over all waypoints with t <= horizon_s.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention: {convention}")
    pred, gt = list(pred), list(gt)
    if len(pred) != N_WAYPOINTS or len(gt) != N_WAYPOINTS:
        raise ValueError(
            f"expected {N_WAYPOINTS} waypoints, got {len(pred)} vs {len(gt)}")
    k = _steps(horizon_s)
    errs = [math.hypot(px - gx, py - gy)
            for (px, py), (gx, gy) in zip(pred, gt)]
    if convention == "uniad":
        return errs[k - 1]
    return sum(errs[:k]) / k


# --- collision geometry ------------------------------------------------------


@dataclass
class OrientedBox:
    x: float
    y: float
    length: float
    width: float
    yaw: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("box extents must be positive")

    def corners(self):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2, self.width / 2
        out = []
        for dx, dy in ((hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)):
            out.append((self.x + dx * c - dy * s, self.y + dx * s + dy * c))
        return out


def _overlap_on_axis(axis, corners_a, corners_b):
    pa = [ax * x + ay * y for x, y in corners_a for ax, ay in [axis]]
    pb = [ax * x + ay * y for x, y in corners_b for ax, ay in [axis]]
    return max(pa) >= min(pb) and max(pb) >= min(pa)


def _boxes_intersect(a, b):
    """Separating-axis test on two oriented rectangles."""
    ca, cb = a.corners(), b.corners()
    axes = []
    for box in (a, b):
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        axes.extend([(c, s), (-s, c)])
    return all(_overlap_on_axis(axis, ca, cb) for axis in axes)


def collides(ego_box, agent_boxes):
    """True iff the ego box intersects any of the agent boxes."""
    return any(_boxes_intersect(ego_box, b) for b in agent_boxes)


def waypoint_headings(waypoints, initial_yaw=math.pi / 2):
    """Heading at each waypoint from the direction of the entering segment.

    The first waypoint uses the ego's initial heading (+Y in the ego frame);
    zero-length segments inherit the previous heading.
    """
    headings = []
    prev = (0.0, 0.0)
    yaw = initial_yaw
    for x, y in waypoints:
        dx, dy = x - prev[0], y - prev[1]
        if math.hypot(dx, dy) > 1e-6:
            yaw = math.atan2(dy, dx)
        headings.append(yaw)
        prev = (x, y)
    return headings


def collision_flags(waypoints, frame, agent_futures):
    """Per-step collision booleans for one predicted trajectory.

    The ego footprint is placed at each predicted waypoint with heading from
    the consecutive-waypoint direction; agents sit at their ground-truth
    future positions (ego frame of the prediction keyframe) with heading
    carried forward along their own futures.
    """
    headings = waypoint_headings(waypoints)
    flags = []
    agents = [a for a in frame.agents if a.agent_id in agent_futures]
    agent_headings = {}
    for a in agents:
        rel_yaw = a.pose[2] - frame.ego.pose[2] + math.pi / 2
        agent_headings[a.agent_id] = waypoint_headings(
            agent_futures[a.agent_id], initial_yaw=rel_yaw)
    for t, (x, y) in enumerate(waypoints):
        ego_box = OrientedBox(x, y, EGO_LENGTH_M, EGO_WIDTH_M, headings[t])
        boxes = []
        for a in agents:
            ax, ay = agent_futures[a.agent_id][t]
            boxes.append(OrientedBox(ax, ay, a.size[0], a.size[1],
                                     agent_headings[a.agent_id][t]))
        flags.append(collides(ego_box, boxes))
    return flags


def collision_rate(flag_lists, horizon_s, convention):
    """Percent collision rate over a dataset of per-step collision flags.

    Parse failures should be passed as all-False rows (non-colliding) and
    tracked separately in parse_failure_rate.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention: {convention}")
    if not flag_lists:
        return 0.0
    k = _steps(horizon_s)
    per_step = [sum(flags[t] for flags in flag_lists) / len(flag_lists)
                for t in range(k)]
    if convention == "uniad":
        return 100.0 * per_step[k - 1]
    return 100.0 * sum(per_step) / k


# --- language metrics --------------------------------------------------------


def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu_n(hypothesis, references, n):
    """BLEU with modified n-gram precision, geometric mean over orders 1..n,
    and brevity penalty exp(1 - r/c) when the hypothesis is shorter than the
    closest reference."""
    if n not in (1, 2, 3, 4):
        raise ValueError(f"n must be in 1..4: {n}")
    hyp = hypothesis.split()
    refs = [r.split() for r in references]
    if not hyp or not refs:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        hyp_grams = _ngrams(hyp, order)
        if not hyp_grams:
            return 0.0
        counts = {}
        for g in hyp_grams:
            counts[g] = counts.get(g, 0) + 1
        max_ref = {}
        for ref in refs:
            rc = {}
            for g in _ngrams(ref, order):
                rc[g] = rc.get(g, 0) + 1
            for g, c in rc.items():
                max_ref[g] = max(max_ref.get(g, 0), c)
        clipped = sum(min(c, max_ref.get(g, 0)) for g, c in counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / len(hyp_grams))
    c = len(hyp)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / n)


def _normalize(text):
    return " ".join(text.lower().split())


def qa_accuracy(preds, gts):
    """Exact-match accuracy per category, per hop tag, and overall.

    preds: list of answer strings. gts: aligned records with "answer",
    "category", and "hops" fields. Matching is exact after lowercasing and
    whitespace collapsing.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} references")
    by_cat, by_hop = {}, {}
    correct = 0
    for pred, gt in zip(preds, gts):
        hit = _normalize(pred) == _normalize(gt["answer"])
        correct += hit
        by_cat.setdefault(gt["category"], []).append(hit)
        by_hop.setdefault(gt["hops"], []).append(hit)
    return {
        "overall": correct / len(gts) if gts else 0.0,
        "by_category": {k: sum(v) / len(v) for k, v in sorted(by_cat.items())},
        "by_hops": {k: sum(v) / len(v) for k, v in sorted(by_hop.items())},
        "n_samples": len(gts),
    }


def qa_metrics(preds, gts):
    """Accuracy fields plus mean sentence-level BLEU-1..4 against the
    ground-truth answer."""
    acc = qa_accuracy(preds, gts)
    bleu = {}
    for n in (1, 2, 3, 4):
        scores = [bleu_n(p, [g["answer"]], n) for p, g in zip(preds, gts)]
        bleu[str(n)] = sum(scores) / len(scores) if scores else 0.0
    acc["bleu"] = bleu
    return acc


# --- planner evaluation ------------------------------------------------------


@dataclass
class PlanningMetrics:
    l2_stp3: dict
    l2_uniad: dict
    coll_stp3: dict
    coll_uniad: dict
    n_samples: int
    parse_failure_rate: float

    def __post_init__(self):
        for d in (self.l2_stp3, self.l2_uniad, self.coll_stp3, self.coll_uniad):
            for v in d.values():
                if v < 0 or not math.isfinite(v):
                    raise ValueError(f"invalid metric value: {v}")

    def to_json(self):
        return asdict(self)


def _horizon_dict(values_by_h):
    d = {f"{int(h)}s": values_by_h[h] for h in HORIZONS_S}
    d["avg"] = sum(values_by_h[h] for h in HORIZONS_S) / len(HORIZONS_S)
    return d


def constant_velocity_policy(rec, frame):
    """Baseline: extrapolate the current ego-frame velocity."""
    vx, vy = frame.ego.velocity
    pts = [(vx * WAYPOINT_DT_S * (t + 1), vy * WAYPOINT_DT_S * (t + 1))
           for t in range(N_WAYPOINTS)]
    return {"waypoints": pts, "error": None}


def oracle_policy(episodes):
    """Pass-through policy: serializes the ground-truth future through the
    waypoint codec, so quantization is the only error source."""
    def policy(rec, frame):
        pts = episodes[rec["episode_id"]].ego_future[rec["frame_index"]]
        text = codec.encode_waypoints([(codec.round2(x), codec.round2(y))
                                       for x, y in pts])
        return {"waypoints": codec.decode_waypoints(text), "error": None}
    return policy


def evaluate_planner(policy, episodes, records, workers=1):
    """PlanningMetrics for a policy over planning records.

    policy(record, frame) must return {"waypoints": list | None, "error":
    str | None}. Parse failures are excluded from L2 but counted as
    non-colliding and reported in parse_failure_rate. With workers > 1 the
    policy runs on a thread pool over read-only model state; aggregation
    stays in record order, so results are identical to the sequential path.
    """
    def run(rec):
        frame = episodes[rec["episode_id"]].frames[rec["frame_index"]]
        return policy(rec, frame)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(run, records))
    else:
        outs = [run(rec) for rec in records]

    l2 = {c: {h: [] for h in HORIZONS_S} for c in CONVENTIONS}
    flag_lists = []
    failures = 0
    samples = []
    for rec, out in zip(records, outs):
        ep = episodes[rec["episode_id"]]
        k = rec["frame_index"]
        frame = ep.frames[k]
        gt = [tuple(p) for p in ep.ego_future[k]]
        pts = out.get("waypoints")
        sample = {"episode_id": rec["episode_id"], "frame_index": k,
                  "command": rec["command"], "gt": [list(p) for p in gt],
                  "pred": None, "error": out.get("error")}
        if pts is None:
            failures += 1
            flag_lists.append([False] * N_WAYPOINTS)
            samples.append(sample)
            continue
        sample["pred"] = [list(p) for p in pts]
        for c in CONVENTIONS:
            for h in HORIZONS_S:
                l2[c][h].append(l2_at(pts, gt, h, c))
        futures = ep.agent_futures.get(k, {})
        flag_lists.append(collision_flags(pts, frame, futures))
        samples.append(sample)
    def mean(xs):
        return sum(xs) / len(xs) if xs else 0.0
    metrics = PlanningMetrics(
        l2_stp3=_horizon_dict({h: mean(l2["stp3"][h]) for h in HORIZONS_S}),
        l2_uniad=_horizon_dict({h: mean(l2["uniad"][h]) for h in HORIZONS_S}),
        coll_stp3=_horizon_dict({h: collision_rate(flag_lists, h, "stp3")
                                 for h in HORIZONS_S}),
        coll_uniad=_horizon_dict({h: collision_rate(flag_lists, h, "uniad")
                                  for h in HORIZONS_S}),
        n_samples=len(records),
        parse_failure_rate=failures / len(records) if records else 0.0,
    )
    return metrics, samples


def model_policy(pipeline, max_new_tokens=120):
    """Planning policy wrapping the full trained pipeline inference path."""
    from . import trainpipe

    def policy(rec, frame):
        return trainpipe.plan_trajectory(pipeline, frame, rec["command"],
                                         max_new_tokens=max_new_tokens)
    return policy


def evaluate_qa(pipeline, episodes, qa_records, max_new_tokens=32):
    """Run QA inference over records and score with qa_metrics."""
    from . import trainpipe
    preds = []
    for rec in qa_records:
        frame = episodes[rec["episode_id"]].frames[rec["frame_index"]]
        preds.append(trainpipe.answer_question(
            pipeline, frame, rec["question"], max_new_tokens=max_new_tokens))
    return qa_metrics(preds, qa_records), preds


# --- ablations ---------------------------------------------------------------

INPUT_CHANNELS = ("visual", "ego", "history", "command")

DEFAULT_INPUT_ROWS = [
    ("full", frozenset(INPUT_CHANNELS)),
    ("no_visual", frozenset(("ego", "history", "command"))),
    ("no_ego", frozenset(("visual", "history", "command"))),
    ("no_history", frozenset(("visual", "ego", "command"))),
    ("no_command", frozenset(("visual", "ego", "history"))),
]


def masked_policy(pipeline, enabled, max_new_tokens=120):
    """Planning policy with input channels outside `enabled` nulled out.

    Visual spans are replaced by zero embeddings, the ego-state block by a
    zeroed ego state, the history line by a zeroed history, and the mission
    goal by the word "unknown".
    """
    import torch
    from . import lm as lm_mod, trainpipe
    enabled = frozenset(enabled)
    bad = enabled - set(INPUT_CHANNELS)
    if bad:
        raise ValueError(f"unknown input channels: {sorted(bad)}")
    if not enabled:
        raise ValueError("at least one input channel must be enabled")

    def policy(rec, frame):
        command = rec["command"]
        ego = frame.ego
        if "ego" not in enabled or "history" not in enabled:
            zero_hist = [(0.0, 0.0)] * 4
            ego = world.EgoState(
                pose=ego.pose,
                velocity=ego.velocity if "ego" in enabled else (0.0, 0.0),
                yaw_rate=ego.yaw_rate if "ego" in enabled else 0.0,
                acceleration=ego.acceleration if "ego" in enabled else (0.0, 0.0),
                heading_speed=ego.heading_speed if "ego" in enabled else 0.0,
                steering=ego.steering if "ego" in enabled else 0.0,
                history=list(ego.history) if "history" in enabled else zero_hist)
        cmd = command if "command" in enabled else "unknown"
        with torch.no_grad():
            env = pipeline.env_tokens(frame)
            spans = pipeline.spans(env)
            if "visual" not in enabled:
                spans = {k: torch.zeros_like(v) for k, v in spans.items()}
            prompt = codec.assemble_prompt("plan", ego=ego, command=cmd)
            seq = lm_mod.splice(prompt, spans, pipeline.vocab)
            out = lm_mod.generate(pipeline.lm, seq, pipeline.vocab,
                                  max_new_tokens=max_new_tokens)
        parsed = codec.parse_answer(out["token_ids"], pipeline.vocab)
        result = {"waypoints": None, "error": None}
        if parsed["trajectory"] is None:
            result["error"] = "no trajectory span in output"
            return result
        try:
            result["waypoints"] = codec.decode_waypoints(parsed["trajectory"])
        except codec.CodecError as e:
            result["error"] = str(e)
        return result
    return policy


def run_input_ablation(pipeline, episodes, records, rows=None,
                       max_new_tokens=120):
    """Planning metrics with each input channel masked in turn.

    Returns [{"row": name, "enabled": [...], "metrics": PlanningMetrics}].
    """
    rows = rows if rows is not None else DEFAULT_INPUT_ROWS
    out = []
    for name, enabled in rows:
        policy = masked_policy(pipeline, enabled, max_new_tokens=max_new_tokens)
        metrics, _ = evaluate_planner(policy, episodes, records)
        out.append({"row": name, "enabled": sorted(enabled), "metrics": metrics})
    return out


STAGE_ABLATION_ROWS = [
    ("s3_only", ["s0", "s3"]),
    ("s1_s3", ["s0", "s1", "s3"]),
    ("s1_s2_s3", ["s0", "s1", "s2", "s3"]),
    ("full", ["s0", "s1", "s2", "s25", "s3"]),
]


def run_stage_ablation(make_pipeline, episodes, streams, records_eval,
                       ckpt_root, stage_configs=None, rows=None):
    """Train each stage subset from the same init and evaluate planning.

    make_pipeline: zero-argument factory returning a freshly initialized
    DrivingPipeline (must be deterministic so rows differ only by schedule).
    Rows containing s0 share one s0 checkpoint: retraining it per row from
    the same init and seed would produce bit-identical parameters, so it is
    trained once. Returns [{"row", "stages", "metrics"}] per row.
    """
    import os
    from . import trainpipe
    rows = rows if rows is not None else STAGE_ABLATION_ROWS
    shared_s0 = None
    if any("s0" in stages for _, stages in rows):
        shared_s0 = os.path.join(ckpt_root, "s0_shared")
        pipeline = make_pipeline()
        trainpipe.run_all(pipeline, episodes, streams, shared_s0,
                          stage_configs=stage_configs, stages=["s0"])
    out = []
    for name, stages in rows:
        if "s0" in stages:
            pipeline, _ = trainpipe.load_checkpoint(
                os.path.join(shared_s0, "s0"))
            rest = [s for s in stages if s != "s0"]
        else:
            pipeline = make_pipeline()
            rest = stages
        if rest:
            trainpipe.run_all(pipeline, episodes, streams,
                              os.path.join(ckpt_root, name),
                              stage_configs=stage_configs, stages=rest)
        metrics, _ = evaluate_planner(model_policy(pipeline), episodes,
                                      records_eval)
        out.append({"row": name, "stages": stages, "metrics": metrics})
    return out


# --- reports -----------------------------------------------------------------


def write_report(path, metrics, meta=None, qa=None):
    """Report JSON: {meta, stp3, uniad, qa}."""
    report = {
        "meta": dict(meta or {}, n_samples=metrics.n_samples,
                     parse_failure_rate=metrics.parse_failure_rate),
        "stp3": {"l2": metrics.l2_stp3, "collision_pct": metrics.coll_stp3},
        "uniad": {"l2": metrics.l2_uniad, "collision_pct": metrics.coll_uniad},
        "qa": qa,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
    return report


def write_csv(path, named_metrics):
    """CSV export, one row per named PlanningMetrics, horizon columns in
    the 1s / 2s / 3s / avg order for each convention block."""
    cols = ["row"]
    for block in ("l2_stp3", "l2_uniad", "coll_stp3", "coll_uniad"):
        cols += [f"{block}_{h}" for h in ("1s", "2s", "3s", "avg")]
    cols += ["n_samples", "parse_failure_rate"]
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for name, m in named_metrics:
            row = [name]
            for block in ("l2_stp3", "l2_uniad", "coll_stp3", "coll_uniad"):
                d = getattr(m, block)
                row += [f"{d[h]:.6f}" for h in ("1s", "2s", "3s", "avg")]
            row += [m.n_samples, f"{m.parse_failure_rate:.6f}"]
            w.writerow(row)


def write_samples_jsonl(path, samples):
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s, separators=(",", ":")) + "\n")
