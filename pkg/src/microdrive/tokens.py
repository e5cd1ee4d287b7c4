"""Special token names shared by the codec, vocabulary, and splicing code."""

SCENE_START = "<scene_start>"
SCENE_END = "<scene_end>"
TRACK_START = "<track_start>"
TRACK_END = "<track_end>"
MAP_START = "<map_start>"
MAP_END = "<map_end>"
EGO_START = "<ego_start>"
EGO_END = "<ego_end>"
COMMAND_START = "<command_start>"
COMMAND_END = "<command_end>"
TRAJ_START = "<traj_start>"
TRAJ_END = "<traj_end>"
QUESTION_START = "<question_start>"
QUESTION_END = "<question_end>"
ANSWER_START = "<answer_start>"
ANSWER_END = "<answer_end>"
TRAJECTORY = "<trajectory>"

# Placeholder markers replaced during splicing: continuous embedding groups.
SCENE_PLACEHOLDER = "<SCENE>"
TRACK_PLACEHOLDER = "<TRACK>"
MAP_PLACEHOLDER = "<MAP>"
OBJECT_PLACEHOLDER = "<OBJECT>"

SPECIAL_TOKENS = [
    SCENE_START, SCENE_END,
    TRACK_START, TRACK_END,
    MAP_START, MAP_END,
    EGO_START, EGO_END,
    COMMAND_START, COMMAND_END,
    TRAJ_START, TRAJ_END,
    QUESTION_START, QUESTION_END,
    ANSWER_START, ANSWER_END,
    TRAJECTORY,
]

PLACEHOLDER_TOKENS = [
    SCENE_PLACEHOLDER, TRACK_PLACEHOLDER, MAP_PLACEHOLDER, OBJECT_PLACEHOLDER,
]
