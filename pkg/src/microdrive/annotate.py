"""Deterministic template-based supervision streams.

Agent captions with BEV coordinates, scene and map captions, instruction QA
pairs, and the stage corpora assembled from episodes. Every answer is derived
from ground-truth world state, so exact-match accuracy is well defined.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import codec
from .world import FUTURE_STEPS, to_ego_frame

QA_CATEGORIES = ["existence", "counting", "object", "status", "comparison"]

PARKED_SPEED = 0.1          # below this an agent counts as parked
TURN_YAW_RATE = 0.05        # rad/s threshold separating straight from turning

_PLURALS = {
    "car": "cars", "truck": "trucks", "bus": "buses",
    "pedestrian": "pedestrians", "bicycle": "bicycles",
}
_NUMBER_WORDS = ["zero", "one", "two", "three", "four", "five", "six",
                 "seven", "eight"]


@dataclass
class AgentCaption:
    agent_id: int
    text: str


@dataclass
class SceneCaption:
    text: str


@dataclass
class MapCaption:
    text: str


@dataclass
class QAPair:
    question: str
    answer: str
    category: str
    hops: str                  # "H0" or "H1"

    def __post_init__(self):
        if self.category not in QA_CATEGORIES:
            raise ValueError(f"bad QA category: {self.category}")
        if self.hops not in ("H0", "H1"):
            raise ValueError(f"bad hop tag: {self.hops}")


def motion_phrase(agent):
    if agent.speed < PARKED_SPEED:
        return "parked"
    if agent.yaw_rate > TURN_YAW_RATE:
        return "turning left"
    if agent.yaw_rate < -TURN_YAW_RATE:
        return "turning right"
    return "moving forward"


def agent_bev_position(frame, agent):
    """Agent center in the ego frame (X right, Y forward)."""
    return to_ego_frame(frame.ego.pose, agent.pose[:2])


def caption_agent(frame, agent_id):
    agent = frame.agent(agent_id)
    x, y = agent_bev_position(frame, agent)
    text = (f"a {agent.color} {agent.cls} {motion_phrase(agent)} "
            f"at BEV coordinate ({x:.1f}, {y:.1f})")
    return AgentCaption(agent_id=agent_id, text=text)


def _count_phrase(frame):
    counts = {}
    for a in frame.agents:
        counts[a.cls] = counts.get(a.cls, 0) + 1
    if not counts:
        return "no road users"
    parts = []
    for cls in _PLURALS:
        if cls in counts:
            n = counts[cls]
            noun = cls if n == 1 else _PLURALS[cls]
            parts.append(f"{n} {noun}")
    if len(parts) == 1:
        return parts[0]
    return ", ".join(parts[:-1]) + " and " + parts[-1]


def caption_scene(frame):
    day, weather = frame.ambience
    sky = "daytime" if day == "day" else "nighttime"
    wx = "clear" if weather == "clear" else "rainy"
    where = ("at a four-way intersection" if frame.lane_graph.is_intersection
             else "on a straight road")
    return SceneCaption(text=f"a {wx} {sky} scene with {_count_phrase(frame)} {where}")


def caption_map(lane_graph):
    n = len(lane_graph.lanes)
    word = _NUMBER_WORDS[n] if n < len(_NUMBER_WORDS) else str(n)
    lanes = f"{word} lane" + ("s" if n != 1 else "")
    cross = "a crosswalk" if lane_graph.crosswalks else "no crosswalk"
    topo = ("four connecting roads at an intersection"
            if lane_graph.is_intersection else "straight boundaries")
    return MapCaption(text=f"{lanes}, {cross}, {topo}")


def _unique_class_agents(frame):
    by_cls = {}
    for a in frame.agents:
        by_cls.setdefault(a.cls, []).append(a)
    return {cls: ags[0] for cls, ags in by_cls.items() if len(ags) == 1}


def make_qa(frame, rng_seed):
    """At least one pair per instantiable category, ground-truth answers."""
    rng = np.random.default_rng(rng_seed)
    pairs = []
    present = {a.cls for a in frame.agents}

    # existence (H0): ask about one present and one absent class when possible
    asked = []
    absent = [c for c in _PLURALS if c not in present]
    if present:
        asked.append(str(rng.choice(sorted(present))))
    if absent:
        asked.append(str(rng.choice(absent)))
    if not asked:
        asked = ["pedestrian"]
    for cls in asked:
        pairs.append(QAPair(
            question=f"is there any {cls}?",
            answer="yes" if cls in present else "no",
            category="existence", hops="H0"))

    # counting (H0)
    cls = str(rng.choice(sorted(present))) if present else "car"
    n = sum(1 for a in frame.agents if a.cls == cls)
    pairs.append(QAPair(
        question=f"how many {_PLURALS[cls]} are there?",
        answer=str(n), category="counting", hops="H0"))

    unique = _unique_class_agents(frame)

    # object (H0): color lookup on a unique-class agent
    if unique:
        cls = str(rng.choice(sorted(unique)))
        pairs.append(QAPair(
            question=f"what color is the {cls}?",
            answer=unique[cls].color, category="object", hops="H0"))

    # object (H1): nearest neighbour of a unique-class agent
    if unique and len(frame.agents) >= 2:
        cls = str(rng.choice(sorted(unique)))
        ref = unique[cls]
        others = [a for a in frame.agents if a.agent_id != ref.agent_id]
        dists = [math.hypot(a.pose[0] - ref.pose[0], a.pose[1] - ref.pose[1])
                 for a in others]
        order = sorted(range(len(others)), key=lambda i: dists[i])
        if len(order) == 1 or dists[order[1]] - dists[order[0]] > 0.5:
            near = others[order[0]]
            pairs.append(QAPair(
                question=f"what is the closest road user to the {cls}?",
                answer=f"a {near.color} {near.cls}",
                category="object", hops="H1"))

    # status (H0)
    if unique:
        cls = str(rng.choice(sorted(unique)))
        pairs.append(QAPair(
            question=f"is the {cls} moving or parked?",
            answer="parked" if unique[cls].speed < PARKED_SPEED else "moving",
            category="status", hops="H0"))

    # comparison (H1): lateral order of two unique-class agents
    if len(unique) >= 2:
        names = sorted(unique)
        for _ in range(4):
            a_cls, b_cls = rng.choice(names, size=2, replace=False)
            xa = agent_bev_position(frame, unique[a_cls])[0]
            xb = agent_bev_position(frame, unique[b_cls])[0]
            if abs(xa - xb) > 1.0:
                side = "right" if xa > xb else "left"
                pairs.append(QAPair(
                    question=f"is the {a_cls} to the left or right of the {b_cls}?",
                    answer=f"the {a_cls} is to the {side} of the {b_cls}",
                    category="comparison", hops="H1"))
                break
    return pairs


# --- corpus building ---------------------------------------------------------

STAGE_FILES = {
    "stage1": "stage1_align.jsonl",
    "stage2": "stage2_qa.jsonl",
    "stage25": "stage25_forecast.jsonl",
    "stage3": "stage3_plan.jsonl",
}


def _record(episode_id, frame_index, prompt_kind, question, answer, **extra):
    rec = {"episode_id": episode_id, "frame_index": frame_index,
           "prompt_kind": prompt_kind, "question": question, "answer": answer}
    rec.update(extra)
    return rec


def build_records(episodes, frame_stride=1, qa_seed=0):
    """Build the four per-stage record streams from a list of episodes.

    Returns {"stage1": [...], "stage2": [...], "stage25": [...], "stage3": [...]}.
    Only keyframes with a full 6-step future are used, so every stage sees the
    same frame set. QA seeds derive from (qa_seed, episode, frame) and are
    therefore reproducible.
    """
    out = {k: [] for k in STAGE_FILES}
    for ep_id, ep in enumerate(episodes):
        usable = sorted(ep.ego_future)
        for k in usable[::frame_stride]:
            frame = ep.frames[k]
            out["stage1"].append(_record(
                ep_id, k, "caption_scene", "", caption_scene(frame).text))
            out["stage1"].append(_record(
                ep_id, k, "caption_map", "", caption_map(frame.lane_graph).text))
            for agent in frame.agents:
                out["stage1"].append(_record(
                    ep_id, k, "caption_agent", "",
                    caption_agent(frame, agent.agent_id).text,
                    agent_id=agent.agent_id))
            seed = (qa_seed * 1_000_003 + ep_id * 1009 + k) % (2 ** 32)
            for qa in make_qa(frame, seed):
                out["stage2"].append(_record(
                    ep_id, k, "qa", qa.question, qa.answer,
                    category=qa.category, hops=qa.hops))
            futures = ep.agent_futures.get(k, {})
            for agent in frame.agents:
                if agent.agent_id not in futures:
                    continue
                pts = [(codec.round2(x), codec.round2(y))
                       for x, y in futures[agent.agent_id]]
                out["stage25"].append(_record(
                    ep_id, k, "forecast", "", codec.format_points(pts),
                    agent_id=agent.agent_id))
            pts = [(codec.round2(x), codec.round2(y)) for x, y in ep.ego_future[k]]
            out["stage3"].append(_record(
                ep_id, k, "plan", "", codec.format_points(pts),
                command=ep.command))
    return out


def write_records(records, path):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_records(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def build_instruction_dataset(episodes, out_dir, frame_stride=1, qa_seed=0):
    """Write the four stage corpora under out_dir; returns record counts."""
    import os
    if not episodes:
        streams = {k: [] for k in STAGE_FILES}
    else:
        streams = build_records(episodes, frame_stride=frame_stride, qa_seed=qa_seed)
    counts = {}
    for stage, fname in STAGE_FILES.items():
        write_records(streams[stage], os.path.join(out_dir, fname))
        counts[stage] = len(streams[stage])
    return counts
