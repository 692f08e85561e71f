"""Token vocabulary, prompt templates and question/answer records."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .synth import COLORS, SHAPES, RenderedScene

SPECIALS = ("<pad>", "<sys>", "<img_start>", "<img>", "<img_end>", "<assistant>")
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")
TEMPLATE_WORDS = (
    "what", "is", "the", "number", "of", "black", "dots", "colorful", "polygons", "in", "image",
    "?", "answer", "with", "only", "there", "are", ",", "or", "color", "shape", "name", "object",
    "identify", "shown", ".", "this", "figure",
)
TASKS = ("count", "verify", "color", "shape")

# segment tags
SYSTEM, IMAGE, LAST_IMAGE, INSTRUCTION, LAST_PROMPT, GENERATED = (
    "SystemPrompt", "ImageToken", "LastImageToken", "UserInstruction", "LastPromptToken", "GeneratedToken")
GROUPS = (SYSTEM, IMAGE, LAST_IMAGE, INSTRUCTION, LAST_PROMPT, GENERATED)

OBJECT_NAMES = {"syndot": ("black", "dots"), "synpoly": ("colorful", "polygons")}

COUNT_PROMPT = "what is the number of the {obj} in the image ? answer with the number only"
VERIFY_PROMPT = "there are {k} {obj} in the image , yes or no ?"
COLOR_PROMPTS = (
    "what is the color of the {shape} in the image ? answer with the color name only",
    "identify the color of the {shape} shown . answer with the color name only",
    "what color is the {shape} in this image ? answer with the color name only",
)
SHAPE_PROMPTS = (
    "what is the shape of the {color} object in the image ? answer with the shape name only",
    "identify the shape of the {color} figure shown . answer with the shape name only",
    "what shape is the {color} object in this image ? answer with the shape name only",
)


class Vocab:
    """Fixed hand-built vocabulary. Count tokens are single tokens "0".."max_count"."""

    def __init__(self, max_count: int = 10):
        if max_count < 1:
            raise ValueError("max_count must be >= 1")
        self.max_count = max_count
        self.count_tokens = tuple(str(i) for i in range(max_count + 1))
        words = (*SPECIALS, *self.count_tokens, *NUMBER_WORDS, "yes", "no", *COLORS, *SHAPES, *TEMPLATE_WORDS)
        seen: dict[str, int] = {}
        for w in words:
            seen.setdefault(w, len(seen))
        self.tokens = tuple(seen)
        self.index = seen

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def encode(self, words) -> list[int]:
        if isinstance(words, str):
            words = words.split()
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise KeyError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def id(self, tok: str) -> int:
        return self.index[tok]

    def count_id(self, n: int) -> int:
        if not 0 <= n <= self.max_count:
            raise KeyError(f"no count token for {n} (max_count={self.max_count})")
        return self.index[str(n)]

    def lexicon_ids(self, name: str) -> np.ndarray:
        lex = load_lexicons()[name]
        return np.array(sorted(self.index[t] for t in lex if t in self.index), dtype=int)


def load_lexicons() -> dict[str, list[str]]:
    """Counting/visual/yes-no lexicons shipped as package data."""
    text = resources.files("countlab").joinpath("lexicons.json").read_text()
    lex = json.loads(text)
    # count tokens beyond ten exist only in extended vocabularies
    lex["counting"] = lex["counting"] + [str(i) for i in range(11, 100)]
    return lex


@dataclass
class QARecord:
    scene_id: str
    task: str
    prompt: list[str]
    answer: list[str]
    k: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not 1 <= len(self.answer) <= 2:
            raise ValueError("answers carry one or two tokens")
        if self.task == "verify" and self.k is None:
            raise ValueError("verify records need the probed quantity k")


def count_record(scene: RenderedScene, scene_id: str) -> QARecord:
    obj = " ".join(OBJECT_NAMES.get(scene.kind, OBJECT_NAMES["synpoly"]))
    return QARecord(scene_id, "count", COUNT_PROMPT.format(obj=obj).split(), [str(scene.count)])


def verify_record(scene: RenderedScene, scene_id: str, k: int, as_word: bool = False) -> QARecord:
    obj = " ".join(OBJECT_NAMES.get(scene.kind, OBJECT_NAMES["synpoly"]))
    kt = NUMBER_WORDS[k] if as_word and k < len(NUMBER_WORDS) else str(k)
    ans = "yes" if k == scene.count else "no"
    return QARecord(scene_id, "verify", VERIFY_PROMPT.format(k=kt, obj=obj).split(), [ans], k=k)


def attribute_record(scene: RenderedScene, scene_id: str, task: str, template: int = 0) -> QARecord:
    a = scene.attributes[0]
    if task == "color":
        prompt = COLOR_PROMPTS[template].format(shape=a["shape"])
        ans = a["color"]
    elif task == "shape":
        prompt = SHAPE_PROMPTS[template].format(color=a["color"])
        ans = a["shape"]
    else:
        raise ValueError(f"not an attribute task: {task!r}")
    return QARecord(scene_id, task, prompt.split(), [ans])


def sample_verify_k(rng: np.random.Generator, count: int, k_max: int) -> tuple[int, bool]:
    """Half the time the true count, otherwise a nearby wrong count; plus digit/word form."""
    if rng.random() < 0.5:
        k = count
    else:
        offs = [d for d in (-2, -1, 1, 2) if 0 <= count + d <= k_max]
        k = count + offs[int(rng.integers(len(offs)))]
    return k, bool(rng.random() < 0.5)
