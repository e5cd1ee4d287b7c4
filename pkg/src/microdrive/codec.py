"""Bit-exact text codecs and prompt assembly.

Waypoint serialization / parsing, ego-state textualization, the prompt
templates for every pipeline stage, and structured parsing of model output.
All coordinates are in the ego frame (X right, Y forward) and are rendered
with exactly 2 fractional digits, rounding half away from zero.
"""

from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP

from . import tokens as tk


class CodecError(Exception):
    """Base class for trajectory-text parse failures. Carries a byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class MissingDelimiter(CodecError):
    pass


class WrongArity(CodecError):
    pass


class MalformedNumber(CodecError):
    pass


class MissingBinding(KeyError):
    pass


N_WAYPOINTS = 6
WAYPOINT_DT_S = 0.5


def round2(x):
    """Round to 2 decimals, half away from zero. Returns a float."""
    if x != x or x in (float("inf"), float("-inf")):
        raise ValueError(f"non-finite coordinate: {x}")
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def format_coord(x):
    """Render a coordinate with exactly 2 fractional digits."""
    if x != x or x in (float("inf"), float("-inf")):
        raise ValueError(f"non-finite coordinate: {x}")
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def format_points(points):
    return "[" + ",".join(f"({format_coord(x)},{format_coord(y)})" for x, y in points) + "]"


def encode_waypoints(points):
    """Serialize 6 waypoints as '<traj_start>[(x1,y1),...,(x6,y6)]<traj_end>'."""
    pts = list(points)
    if len(pts) != N_WAYPOINTS:
        raise ValueError(f"expected {N_WAYPOINTS} waypoints, got {len(pts)}")
    return tk.TRAJ_START + format_points(pts) + tk.TRAJ_END


class _Scanner:
    def __init__(self, text):
        self.text = text
        self.pos = 0

    def expect(self, literal, err=MissingDelimiter):
        if not self.text.startswith(literal, self.pos):
            raise err(f"expected {literal!r}", self.pos)
        self.pos += len(literal)

    def peek(self, literal):
        return self.text.startswith(literal, self.pos)

    def number(self):
        start = self.pos
        t = self.text
        if self.pos < len(t) and t[self.pos] in "+-":
            self.pos += 1
        digits = 0
        while self.pos < len(t) and t[self.pos].isdigit():
            self.pos += 1
            digits += 1
        if digits == 0:
            raise MalformedNumber("expected digits before decimal point", start)
        if self.pos >= len(t) or t[self.pos] != ".":
            raise MalformedNumber("expected decimal point", self.pos)
        self.pos += 1
        frac = 0
        while self.pos < len(t) and t[self.pos].isdigit():
            self.pos += 1
            frac += 1
        if frac != 2:
            raise MalformedNumber("expected exactly 2 fractional digits", start)
        return float(t[start:self.pos])


def decode_waypoints(text):
    """Parse trajectory text back into a list of 6 (x, y) floats.

    Total function over strings: every failure raises one of MissingDelimiter,
    WrongArity, or MalformedNumber, each carrying the byte offset of the
    failure. Whitespace is tolerated only outside the delimiters.
    """
    stripped = text.strip()
    lead = len(text) - len(text.lstrip())
    s = _Scanner(stripped)
    s.expect(tk.TRAJ_START)
    s.expect("[")
    pairs = []
    while True:
        if s.peek("]"):
            s.pos += 1
            break
        if pairs:
            s.expect(",", MalformedNumber)
        s.expect("(", MalformedNumber)
        x = s.number()
        s.expect(",", MalformedNumber)
        y = s.number()
        s.expect(")", MalformedNumber)
        pairs.append((x, y))
        if len(pairs) > N_WAYPOINTS:
            raise WrongArity(f"more than {N_WAYPOINTS} pairs", lead + s.pos)
    if len(pairs) != N_WAYPOINTS:
        raise WrongArity(f"expected {N_WAYPOINTS} pairs, got {len(pairs)}", lead + s.pos)
    s.expect(tk.TRAJ_END)
    if s.pos != len(stripped):
        raise MissingDelimiter("trailing content after end delimiter", lead + s.pos)
    return pairs


def encode_ego_state(ego):
    """Render the textual ego-state block used inside QA and planning prompts.

    The "Can Bus" field carries the kinematic 4-tuple
    (vx, vy, yaw_rate, heading_speed); downstream code must not rely on its
    semantics. Requires a warmed-up 4-point history.
    """
    if len(ego.history) != 4:
        raise ValueError(f"ego history not warmed up: {len(ego.history)} points")
    vx, vy = ego.velocity
    ax, ay = ego.acceleration
    fields = {
        "velocity": f"({format_coord(vx)},{format_coord(vy)})",
        "yaw_rate": format_coord(ego.yaw_rate),
        "acceleration": f"({format_coord(ax)},{format_coord(ay)})",
        "can_bus": "({},{},{},{})".format(
            format_coord(vx), format_coord(vy),
            format_coord(ego.yaw_rate), format_coord(ego.heading_speed)),
        "heading_speed": format_coord(ego.heading_speed),
        "steering": format_coord(ego.steering),
        "history": format_points(ego.history),
    }
    return fields


SYSTEM_PROMPT = (
    "You are Open-DriveVLA, an advanced vision-language driving model. "
    "Your core responsibilities include safe trajectory planning and interpretable decision-making. "
    "You generate collision-free driving plans while providing clear, logical explanations for user queries.\n"
    "Context:\n"
    " - Coordinates: X-axis is pointing to the right, and Y-axis is pointing to the front. "
    "You're at point (0,0). All coordinates are in meters.\n"
    " - Objective: Generate a 3-second safe driving plan consisting of 6 waypoints, one every 0.5 seconds. "
    "Provide logical responses to user queries.\n"
    "Task:\n"
    "- Perception & Prediction: Analyze the driving environment using visual data. "
    "Identify road users and hazards and predict their motion.\n"
    "- Thought Process: Determine critical objects and assess potential hazards. "
    "Consider road constraints and traffic rules.\n"
    "- Trajectory Planning: Define the driving objective. "
    "Generate a safe, feasible 3-second route consisting of 6 waypoints.\n"
    "- Explainability & User Interaction: If the user asks a question, provide a clear and logical response.\n"
    "Output Format:\n"
    "1. Trajectory (MOST IMPORTANT):\n"
    "  - Format: <traj_start>[(x1,y1),(x2,y2),(x3,y3),(x4,y4),(x5,y5),(x6,y6)]<traj_end>\n"
    "2. User Question Response (OPTIONAL):\n"
    "  - Format: <answer_start> Answer to the user's question <answer_end>"
)

_EGO_BLOCK = (
    "Ego states: - Velocity (vx,vy): <Velocity Placeholder>"
    " - Heading Angular Velocity (v_yaw): <Angular Velocity Placeholder>"
    " - Acceleration (ax,ay): <Acceleration Placeholder>"
    " - Can Bus: <Can Bus Placeholder>"
    " - Heading Speed: <Speed Placeholder>"
    " - Steering: <Steering Placeholder>\n"
    "Historical trajectory (last 2 seconds): <Trajectory Placeholder>"
)

_VISUAL_BLOCK = (
    "Scene information: <scene_start><SCENE><scene_end>\n"
    "Object-wise tracking information: <track_start><TRACK><track_end>\n"
    "Map information: <map_start><MAP><map_end>"
)

TEMPLATES = {
    "caption_agent": (
        "Please provide a caption and the BEV coordinate for the following object: "
        "<track_start><OBJECT><track_end>"
    ),
    "caption_map": "Please provide a caption for the following map: <map_start><MAP><map_end>",
    "caption_scene": "Please provide a caption for the following scene: <scene_start><SCENE><scene_end>",
    "qa": (
        _VISUAL_BLOCK + "\n" + _EGO_BLOCK + " \n"
        "Please answer the following question: <Question Placeholder>"
    ),
    "forecast": (
        "<scene_start><SCENE><scene_end>\n"
        "Object-wise tracking information: <track_start><TRACK><track_end>\n"
        "Map information: <map_start><MAP><map_end>\n"
        "Ego Vehicle Token: <Trajectory Placeholder>\n"
        "Please predict relative motion trajectory for the following object: "
        "<track_start><OBJECT><track_end>"
    ),
    "plan": (
        _VISUAL_BLOCK + "\n" + _EGO_BLOCK + "\n"
        "Mission goal: <Command Placeholder>\n"
        "Planning trajectory: <trajectory>"
    ),
}

# Text placeholders each kind must bind before splicing.
_TEXT_PLACEHOLDERS = {
    "<Velocity Placeholder>": "velocity",
    "<Angular Velocity Placeholder>": "yaw_rate",
    "<Acceleration Placeholder>": "acceleration",
    "<Can Bus Placeholder>": "can_bus",
    "<Speed Placeholder>": "heading_speed",
    "<Steering Placeholder>": "steering",
    "<Trajectory Placeholder>": "history",
    "<Question Placeholder>": "question",
    "<Command Placeholder>": "command",
}

# Kinds whose prompt gets the system prompt prepended (instruction and
# planning stages; alignment caption prompts are used bare).
SYSTEM_KINDS = {"qa", "forecast", "plan"}

COMMAND_TEXT = {
    "keep_forward": "keep forward",
    "turn_left": "turn left",
    "turn_right": "turn right",
}


@dataclass
class PromptSpec:
    kind: str
    template: str
    text: str                      # full prompt text, for dry-run dumps and golden tests
    bindings: dict = field(default_factory=dict)
    # Structural view consumed by splicing: ("text", str) segments are run
    # through the word segmenter, ("special", name) become single special
    # token ids, ("embed", group) are continuous-embedding slots. The system
    # prompt is an opaque text segment, so marker strings quoted inside it
    # never turn into special ids.
    segments: list = field(default_factory=list)

    def embedding_placeholders(self):
        return [seg[1] for seg in self.segments if seg[0] == "embed"]


_EMBED_GROUPS = {
    tk.SCENE_PLACEHOLDER: "scene",
    tk.TRACK_PLACEHOLDER: "track",
    tk.MAP_PLACEHOLDER: "map",
    tk.OBJECT_PLACEHOLDER: "object",
}

_STRUCTURAL_MARKERS = sorted(
    tk.SPECIAL_TOKENS + tk.PLACEHOLDER_TOKENS, key=len, reverse=True)


def _segment_template(text):
    """Split substituted template text into text / special / embed segments."""
    segments = []
    pos = 0
    while pos < len(text):
        nxt = None
        for marker in _STRUCTURAL_MARKERS:
            i = text.find(marker, pos)
            if i != -1 and (nxt is None or i < nxt[0]):
                nxt = (i, marker)
        if nxt is None:
            segments.append(("text", text[pos:]))
            break
        i, marker = nxt
        if i > pos:
            segments.append(("text", text[pos:i]))
        if marker in _EMBED_GROUPS:
            segments.append(("embed", _EMBED_GROUPS[marker]))
        else:
            segments.append(("special", marker))
        pos = i + len(marker)
    return segments


def assemble_prompt(kind, ego=None, question=None, command=None, history_text=None):
    """Build a PromptSpec for one of the pipeline prompt kinds.

    Text placeholders are substituted here; the continuous-embedding
    placeholders (<SCENE>, <TRACK>, <MAP>, <OBJECT>) survive into the text
    and are resolved by splicing. The system prompt is prepended for the
    instruction / forecasting / planning kinds.
    """
    if kind not in TEMPLATES:
        raise ValueError(f"unknown prompt kind: {kind}")
    template = TEMPLATES[kind]
    bindings = {}
    if ego is not None:
        bindings.update(encode_ego_state(ego))
    if history_text is not None:
        bindings["history"] = history_text
    if question is not None:
        bindings["question"] = question
    if command is not None:
        bindings["command"] = COMMAND_TEXT.get(command, command)

    text = template
    for placeholder, key in _TEXT_PLACEHOLDERS.items():
        if placeholder in text:
            if key not in bindings:
                raise MissingBinding(f"{kind} prompt requires binding {key!r}")
            text = text.replace(placeholder, bindings[key])
    segments = _segment_template(text)
    if kind in SYSTEM_KINDS:
        text = SYSTEM_PROMPT + "\n" + text
        segments = [("text", SYSTEM_PROMPT + "\n")] + segments
    return PromptSpec(kind=kind, template=template, text=text,
                      bindings=bindings, segments=segments)


def _first_span(token_strs, start_tok, end_tok):
    """First well-formed start..end span; returns (inner tokens, truncated)."""
    try:
        i = token_strs.index(start_tok)
    except ValueError:
        return None, False
    try:
        j = token_strs.index(end_tok, i + 1)
    except ValueError:
        return token_strs[i + 1:], True
    return token_strs[i + 1:j], False


def detokenize(token_strs):
    """Inverse of the word segmenter: spaces only between alphabetic words."""
    out = []
    prev_word = False
    for t in token_strs:
        is_word = t[:1].isalpha() and t.isalnum()
        if prev_word and is_word:
            out.append(" ")
        out.append(t)
        prev_word = is_word
    return "".join(out)


def parse_answer(token_ids, vocab):
    """Extract answer / trajectory spans from generated token ids.

    Returns {"answer": str|None, "trajectory": str|None, "truncated": bool}.
    Absent spans are reported as None; a span opened but never closed within
    the output is returned with truncated=True.
    """
    strs = [vocab.token_of(i) for i in token_ids]
    ans, ans_trunc = _first_span(strs, tk.ANSWER_START, tk.ANSWER_END)
    traj, traj_trunc = _first_span(strs, tk.TRAJ_START, tk.TRAJ_END)
    result = {"answer": None, "trajectory": None, "truncated": ans_trunc or traj_trunc}
    if ans is not None:
        result["answer"] = detokenize(ans).strip()
    if traj is not None:
        result["trajectory"] = tk.TRAJ_START + detokenize(traj) + tk.TRAJ_END
    return result
