"""Controlled-grammar instructions: generation, decomposition and verbatim prefixes.

An instruction is a concatenation of clauses.  Each clause owns its leading
whitespace, an optional connector word and its trailing separator, so any
prefix of the clause list concatenates to an exact prefix of the text::

    "exit the bathroom," + " go straight to the end of the hallway," + " and turn left."
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

from .worldsim import FloorPlan, InputError

VERBS = ("EXIT", "ENTER", "WALK_TO", "PASS", "TURN_LEFT", "TURN_RIGHT", "STOP_AT")
LANDMARK_VERBS = frozenset({"EXIT", "ENTER", "WALK_TO", "PASS", "STOP_AT"})

MENTION_RADIUS = 0.5  # surface distance for a landmark to be described
NEAR_PATH_RADIUS = 2.0
EXIT_RADIUS = 2.0
TURN_THRESHOLD = math.radians(30.0)
TURN_MERGE_ARC = 1.5
REVERSAL = math.radians(150.0)  # sharper corners have no well-defined turn side


class GrammarError(ValueError):
    pass


class ParseError(GrammarError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class GenerationError(GrammarError):
    pass


@lru_cache(maxsize=1)
def load_grammar() -> dict:
    text = resources.files("dualanchor.resources").joinpath("grammar.json").read_text()
    return json.loads(text)


def categories() -> list[str]:
    return list(load_grammar()["categories"])


def vocab_size() -> int:
    return len(load_grammar()["categories"])


def max_subgoals() -> int:
    return int(load_grammar()["max_subgoals"])


@dataclass(frozen=True)
class SubGoal:
    verb: str
    landmark_category: int | None
    clause: str
    # corner location for turn sub-goals; known only to the generator
    anchor: tuple[float, float] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.verb not in VERBS:
            raise GrammarError(f"unknown verb {self.verb}")
        if not self.clause:
            raise GrammarError("empty clause")
        if (self.verb in LANDMARK_VERBS) != (self.landmark_category is not None):
            raise GrammarError(f"{self.verb}: landmark presence mismatch")

    @property
    def completion_event(self) -> str:
        if self.verb == "STOP_AT":
            return "stop"
        if self.verb in ("TURN_LEFT", "TURN_RIGHT"):
            return "turn"
        return "reach"

    def to_dict(self) -> dict:
        d = {"verb": self.verb, "category": self.landmark_category, "clause": self.clause}
        if self.anchor is not None:
            d["anchor"] = list(self.anchor)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SubGoal":
        anchor = tuple(d["anchor"]) if d.get("anchor") is not None else None
        return cls(d["verb"], d["category"], d["clause"], anchor)


@dataclass(frozen=True)
class Instruction:
    text: str
    subgoals: tuple[SubGoal, ...]

    def __post_init__(self):
        object.__setattr__(self, "subgoals", tuple(self.subgoals))
        if "".join(s.clause for s in self.subgoals) != self.text:
            raise GrammarError("clauses do not concatenate to the instruction text")

    @property
    def K(self) -> int:
        return len(self.subgoals)

    @property
    def clause_spans(self) -> list[tuple[int, int]]:
        spans, pos = [], 0
        for s in self.subgoals:
            spans.append((pos, pos + len(s.clause)))
            pos += len(s.clause)
        return spans

    def to_dict(self) -> dict:
        return {"text": self.text, "subgoals": [s.to_dict() for s in self.subgoals]}

    @classmethod
    def from_dict(cls, d: dict) -> "Instruction":
        return cls(d["text"], tuple(SubGoal.from_dict(s) for s in d["subgoals"]))


def prefix_text(instr: Instruction, k: int) -> str:
    """Verbatim prefix covering the first k clauses."""
    if not 0 <= k <= instr.K:
        raise InputError(f"prefix index {k} outside [0, {instr.K}]")
    end = instr.clause_spans[k - 1][1] if k else 0
    return instr.text[:end]


# -- parsing ------------------------------------------------------------------

@lru_cache(maxsize=1)
def _clause_patterns():
    g = load_grammar()
    nouns = sorted(g["categories"], key=len, reverse=True)
    noun_re = "(?P<noun>" + "|".join(re.escape(n) for n in nouns) + ")"
    pats = []
    for verb, templates in g["templates"].items():
        for tpl in templates:
            body = re.escape(tpl).replace(re.escape("{noun}"), noun_re)
            pats.append((verb, re.compile(body + r"\Z")))
    return pats


_CLAUSE_RE = re.compile(r"[^,.]*[,.]")
_LEAD_RE = re.compile(r"\s*(?:(?:and|then)\s+)?")


def decompose(text: str) -> list[SubGoal]:
    """Split grammar-conformant text into ordered atomic sub-goals."""
    g = load_grammar()
    cat_ids = {name: i for i, name in enumerate(g["categories"])}
    out: list[SubGoal] = []
    pos = 0
    while pos < len(text):
        m = _CLAUSE_RE.match(text, pos)
        if m is None:
            raise ParseError("clause is missing a trailing ',' or '.'", pos)
        clause = m.group(0)
        lead = _LEAD_RE.match(clause).end()
        body = clause[lead:-1].rstrip()
        for verb, pat in _clause_patterns():
            pm = pat.match(body)
            if pm:
                noun = pm.groupdict().get("noun")
                out.append(SubGoal(verb, cat_ids[noun] if noun else None, clause))
                break
        else:
            raise ParseError(f"unrecognized clause {body!r}", len(text[:pos + lead].encode()))
        pos = m.end()
    if not out:
        raise ParseError("empty instruction", 0)
    return out


def parse_instruction(text: str) -> Instruction:
    return Instruction(text, tuple(decompose(text)))


# -- tokenization ---------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z]+|[,.]")


@lru_cache(maxsize=1)
def token_vocab() -> dict[str, int]:
    g = load_grammar()
    words = set(g["connectors"]) | set(g["separators"])
    for name in g["categories"]:
        words.update(name.split())
    for templates in g["templates"].values():
        for tpl in templates:
            words.update(_TOKEN_RE.findall(tpl.replace("{noun}", "")))
    vocab = {"<pad>": 0, "<unk>": 1}
    for w in sorted(words):
        vocab[w] = len(vocab)
    return vocab


def tokenize(text: str) -> list[int]:
    vocab = token_vocab()
    return [vocab.get(w, 1) for w in _TOKEN_RE.findall(text.lower())]


def content_tokens(text: str) -> set[str]:
    """Vocabulary nouns and verb words appearing in text (hallucination check unit)."""
    g = load_grammar()
    low = text.lower()
    found = set()
    for name in g["categories"]:
        if re.search(r"\b" + re.escape(name) + r"\b", low):
            found.add(name)
    verb_words = set()
    for templates in g["templates"].values():
        for tpl in templates:
            verb_words.add(_TOKEN_RE.findall(tpl)[0])
    stop = {"the", "to", "of", "and", "then", "end", "straight", "into", "past", "at", "by", "near"}
    noun_words = {w for n in g["categories"] for w in n.split()}
    for w in _TOKEN_RE.findall(low):
        if w in verb_words or (w.isalpha() and w not in stop and w not in noun_words):
            found.add(w)
    return found


# -- generation -----------------------------------------------------------------

@dataclass
class _Event:
    arc: float
    verb: str
    category: int | None = None
    anchor: tuple[float, float] | None = None
    dist: float = 0.0
    priority: int = 0


def _closest_on_path(pts: np.ndarray, cum: np.ndarray, q: np.ndarray):
    a, b = pts[:-1], pts[1:]
    d = b - a
    l2 = np.maximum((d * d).sum(1), 1e-12)
    t = np.clip(((q - a) * d).sum(1) / l2, 0, 1)
    proj = a + t[:, None] * d
    dist = np.hypot(*(proj - q).T)
    k = int(np.argmin(dist))
    return float(dist[k]), float(cum[k] + t[k] * math.sqrt(l2[k]))


def path_events(plan: FloorPlan, path) -> list[_Event]:
    pts = np.asarray(path, dtype=np.float64)
    if len(pts) < 2:
        raise GenerationError("reference path needs at least two points")
    seg = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = float(cum[-1])
    rooms = set(load_grammar()["rooms"])
    names = categories()

    near = 0
    lm_events = []
    for lm in plan.landmarks:
        dist, arc = _closest_on_path(pts, cum, np.array([lm.cx, lm.cy]))
        surface = dist - lm.r
        if surface <= NEAR_PATH_RADIUS:
            near += 1
        if surface <= MENTION_RADIUS:
            lm_events.append((arc, surface, lm))
    if near < 2:
        raise GenerationError(f"only {near} landmark(s) within {NEAR_PATH_RADIUS} m of the path")

    events: list[_Event] = []
    start_xy = pts[0]
    for arc, surface, lm in lm_events:
        name = names[lm.category]
        end_surface = math.hypot(pts[-1][0] - lm.cx, pts[-1][1] - lm.cy) - lm.r
        if end_surface <= MENTION_RADIUS and total - arc <= 1.0:
            verb, prio = "STOP_AT", 3
        elif name in rooms:
            start_surface = math.hypot(start_xy[0] - lm.cx, start_xy[1] - lm.cy) - lm.r
            verb = "EXIT" if start_surface <= EXIT_RADIUS and arc <= 2.5 else "ENTER"
            prio = 2
        elif surface <= 0.6 or name == "hallway":
            verb, prio = "WALK_TO", 2
        else:
            verb, prio = "PASS", 0
        events.append(_Event(arc, verb, lm.category, dist=surface, priority=prio))
    stops = [e for e in events if e.verb == "STOP_AT"]
    for e in stops[:-1]:
        e.verb, e.priority = "WALK_TO", 2

    turns = []
    for i in range(1, len(pts) - 1):
        h0 = math.atan2(*(pts[i] - pts[i - 1])[::-1])
        h1 = math.atan2(*(pts[i + 1] - pts[i])[::-1])
        dh = (h1 - h0 + math.pi) % (2 * math.pi) - math.pi
        if TURN_THRESHOLD < abs(dh) <= REVERSAL and seg[i - 1] > 1e-9 and seg[i] > 1e-9:
            verb = "TURN_LEFT" if dh > 0 else "TURN_RIGHT"
            if turns and turns[-1].verb == verb and cum[i] - turns[-1].arc < TURN_MERGE_ARC:
                continue
            turns.append(_Event(float(cum[i]), verb, anchor=(float(pts[i][0]), float(pts[i][1])),
                                priority=1))
    events.extend(turns)
    # landmarks sort ahead of turns at the same corner
    events.sort(key=lambda e: (e.arc, e.verb.startswith("TURN")))
    while len(events) > max_subgoals():
        drop = min(range(len(events)), key=lambda i: (events[i].priority, -events[i].arc))
        events.pop(drop)
    if len(events) < 2:
        raise GenerationError("path yields fewer than two sub-goals")
    return events


def _phrase(verb: str, category: int | None, rng) -> str:
    g = load_grammar()
    templates = g["templates"][verb]
    noun = g["categories"][category] if category is not None else None
    if rng is None:
        canon = g["canonical"].get(verb, {})
        idx = canon.get(noun, canon.get("*", 0)) if noun else 0
    else:
        limits = g.get("restricted", {}).get(verb, {})
        allowed = [i for i in range(len(templates)) if noun in limits.get(str(i), [noun])]
        idx = allowed[int(rng.integers(len(allowed)))]
    return templates[idx].replace("{noun}", noun or "")


def realize(specs, seed: int | None = None) -> Instruction:
    """Render (verb, category, anchor) triples as an instruction.

    seed=None yields the canonical rendering: first clause bare, middle clauses
    joined by commas, the last introduced by "and" and closed by a period.
    """
    rng = None if seed is None else np.random.default_rng(seed)
    specs = list(specs)
    subgoals = []
    for i, (verb, cat, anchor) in enumerate(specs):
        body = _phrase(verb, cat, rng)
        last = i == len(specs) - 1
        if i == 0:
            lead = ""
        elif rng is None:
            lead = " and " if last else " "
        else:
            prev_sep = subgoals[-1].clause[-1]
            options = [" then "] if prev_sep == "." else [" ", " then "] + ([" and "] if last else [])
            lead = options[int(rng.integers(len(options)))]
        if last:
            sep = "."
        elif rng is None:
            sep = ","
        else:
            sep = "," if rng.random() < 0.75 else "."
        subgoals.append(SubGoal(verb, cat, lead + body + sep, anchor))
    return Instruction("".join(s.clause for s in subgoals), tuple(subgoals))


def generate(plan: FloorPlan, reference_path, seed: int | None = None) -> Instruction:
    """Describe a reference path: landmarks in path order plus turns at sharp corners."""
    events = path_events(plan, reference_path)
    return realize([(e.verb, e.category, e.anchor) for e in events], seed)
