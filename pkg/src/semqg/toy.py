"""A deterministic toy QA language: biography facts, typed answers, paraphrased questions.

Contexts are a few fact sentences about a few people. Each labeled record asks
one question whose answer is one slot of one fact; the generator knows the
gold POS/NER tag of every token it emits.
"""
from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from .data import QAExample
from .text import RuleTagger

SLOT_RE = re.compile(r"\{(\w+)\}")

WH_WORDS = frozenset({"who", "whom", "what", "when", "where", "which", "why", "how"})
WH_BY_TYPE = {"PERSON": "who", "LOCATION": "where", "DATE": "when", "THING": "what"}

DEFAULT_FACTS = {
    "born": "{person} was born in {city} in {year} .",
    "moved": "{person} moved to {city} in {year} .",
    "studied": "{person} studied {field} in {city} .",
    "married": "{person} married {person2} in {year} .",
    "won": "{person} won a prize for {field} in {year} .",
}

DEFAULT_QUESTIONS = {
    "born": {
        "person": ("who was born in {city} in {year} ?", "who is the person born in {city} in {year} ?"),
        "city": ("where was {person} born ?", "where is the birthplace of {person} ?"),
        "year": ("when was {person} born ?", "when did the birth of {person} happen ?"),
    },
    "moved": {
        "person": ("who moved to {city} in {year} ?", "who is the person that moved to {city} in {year} ?"),
        "city": ("where did {person} move to ?", "where did {person} relocate ?"),
        "year": ("when did {person} move to {city} ?", "when did {person} relocate to {city} ?"),
    },
    "studied": {
        "person": ("who studied {field} in {city} ?", "who is the person that studied {field} in {city} ?"),
        "field": ("what did {person} study ?", "what subject did {person} study ?"),
        "city": ("where did {person} study {field} ?", "where did {person} learn {field} ?"),
    },
    "married": {
        "person": ("who married {person2} ?", "who is the spouse of {person2} ?"),
        "person2": ("who did {person} marry ?", "who is the spouse of {person} ?"),
        "year": ("when did {person} marry {person2} ?", "when did {person} wed {person2} ?"),
    },
    "won": {
        "field": ("what did {person} win a prize for ?", "what field earned {person} a prize ?"),
        "year": ("when did {person} win a prize for {field} ?", "when was {person} awarded a prize for {field} ?"),
    },
}

DEFAULT_POS = {
    "was": "AUX", "is": "AUX", "did": "AUX", "born": "VERB", "moved": "VERB", "move": "VERB",
    "relocate": "VERB", "studied": "VERB", "study": "VERB", "learn": "VERB", "married": "VERB",
    "marry": "VERB", "wed": "VERB", "won": "VERB", "win": "VERB", "earned": "VERB", "awarded": "VERB",
    "happen": "VERB", "in": "ADP", "to": "ADP", "for": "ADP", "of": "ADP", "a": "DET", "the": "DET",
    "who": "PRON", "what": "PRON", "that": "PRON", "when": "ADV", "where": "ADV",
    "prize": "NOUN", "person": "NOUN", "birthplace": "NOUN", "birth": "NOUN", "spouse": "NOUN",
    "subject": "NOUN", "field": "NOUN", ".": "PUNCT", "?": "PUNCT",
}

FIRST_NAMES = ("alice", "bob", "carol", "david", "emma", "frank", "grace", "henry", "irene", "jack",
               "karen", "leo", "maria", "noah", "olga", "paul", "quinn", "rosa", "sam", "tina",
               "umar", "vera", "walter", "yuki")
LAST_NAMES = ("smith", "jones", "brown", "miller", "davis", "garcia", "wilson", "moore", "taylor",
              "clark", "lewis", "walker", "young", "king", "wright", "hill")
CITIES = ("paris", "london", "berlin", "rome", "madrid", "vienna", "prague", "lisbon", "dublin", "oslo",
          "athens", "warsaw", "zurich", "geneva", "milan", "lyon", "munich", "bruges", "krakow", "porto")
FIELDS = ("physics", "music", "chemistry", "painting", "poetry", "medicine", "law", "botany",
          "history", "architecture", "astronomy", "sculpture")


def slot_type(slot: str) -> str:
    base = slot.rstrip("0123456789")
    return {"person": "PERSON", "city": "LOCATION", "year": "DATE", "field": "THING"}[base]


@dataclass(frozen=True)
class ToyLanguageSpec:
    first_names: tuple = FIRST_NAMES
    last_names: tuple = LAST_NAMES
    cities: tuple = CITIES
    fields: tuple = FIELDS
    year_min: int = 1800
    year_max: int = 1899
    facts: dict = field(default_factory=lambda: dict(DEFAULT_FACTS))
    questions: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_QUESTIONS.items()})
    pos_lexicon: dict = field(default_factory=lambda: dict(DEFAULT_POS))
    facts_per_context: int = 3
    persons_per_context: int = 2
    seed: int = 7

    def __post_init__(self):
        for name in ("first_names", "last_names", "cities", "fields"):
            if not getattr(self, name):
                raise ValueError(f"lexicon {name} is empty")
        if self.year_max < self.year_min:
            raise ValueError("year_max < year_min")
        if self.persons_per_context < 1 or self.facts_per_context < 1:
            raise ValueError("persons_per_context and facts_per_context must be >= 1")

    # config file: "key = value" lines, lexicons comma-separated, templates "|"-separated
    @classmethod
    def from_config(cls, path) -> "ToyLanguageSpec":
        return cls.from_config_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def from_config_text(cls, text: str) -> "ToyLanguageSpec":
        kw: dict = {}
        facts, questions, pos = {}, {}, {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in ("first_names", "last_names", "cities", "fields"):
                kw[key] = tuple(w.strip().lower() for w in value.split(",") if w.strip())
            elif key in ("year_min", "year_max", "facts_per_context", "persons_per_context", "seed"):
                kw[key] = int(value)
            elif key.startswith("fact."):
                facts[key[5:]] = value
            elif key.startswith("question."):
                fact, slot = key[9:].split(".", 1)
                questions.setdefault(fact, {})[slot] = tuple(t.strip() for t in value.split("|"))
            elif key.startswith("pos."):
                pos[key[4:]] = value
            else:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
        if facts:
            kw["facts"] = facts
            kw["questions"] = questions
        if pos:
            kw["pos_lexicon"] = {**DEFAULT_POS, **pos}
        return cls(**kw)

    def to_config_text(self) -> str:
        lines = [f"seed = {self.seed}", f"year_min = {self.year_min}", f"year_max = {self.year_max}",
                 f"facts_per_context = {self.facts_per_context}",
                 f"persons_per_context = {self.persons_per_context}"]
        for key in ("first_names", "last_names", "cities", "fields"):
            lines.append(f"{key} = {', '.join(getattr(self, key))}")
        for name, tpl in self.facts.items():
            lines.append(f"fact.{name} = {tpl}")
        for name, slots in self.questions.items():
            for slot, tpls in slots.items():
                lines.append(f"question.{name}.{slot} = {' | '.join(tpls)}")
        for w, p in sorted(self.pos_lexicon.items()):
            lines.append(f"pos.{w} = {p}")
        return "\n".join(lines) + "\n"

    def tagger(self) -> RuleTagger:
        lex = dict(RuleTagger().lexicon)
        lex.update(self.pos_lexicon)
        return RuleTagger(persons=frozenset(self.first_names) | frozenset(self.last_names),
                          locations=frozenset(self.cities), nouns=frozenset(self.fields), lexicon=lex)

    def lexicon(self) -> list[str]:
        """Every lowercased token the language can emit, in a fixed order."""
        words = list(self.first_names) + list(self.last_names) + list(self.cities) + list(self.fields)
        words += [str(y) for y in range(self.year_min, self.year_max + 1)]
        templates = list(self.facts.values()) + [t for slots in self.questions.values()
                                                 for tpls in slots.values() for t in tpls]
        for tpl in templates:
            words += [w.lower() for w in SLOT_RE.sub(" ", tpl).split()]
        return list(dict.fromkeys(words))

    def capacity(self) -> int:
        """Upper bound on distinct contexts the templates can produce."""
        n_persons = len(self.first_names) * len(self.last_names)
        n_years = self.year_max - self.year_min + 1
        per_fact = 0
        for tpl in self.facts.values():
            c = 1
            for slot in SLOT_RE.findall(tpl):
                c *= {"PERSON": n_persons, "LOCATION": len(self.cities), "DATE": n_years,
                      "THING": len(self.fields)}[slot_type(slot)]
            per_fact += c
        return per_fact ** self.facts_per_context


@dataclass
class FactInstance:
    name: str
    values: dict          # slot -> surface string (cased)


@dataclass
class ToyRecord:
    """One rendered context plus gold token tags and the chosen question."""

    example: QAExample
    pos_tags: list
    ner_tags: list
    answer_type: str
    fact: str
    slot: str


def _cap(word: str) -> str:
    return word[:1].upper() + word[1:]


class _Renderer:
    def __init__(self, spec: ToyLanguageSpec):
        self.spec = spec

    def surface(self, slot: str, value: str) -> list[str]:
        t = slot_type(slot)
        if t in ("PERSON", "LOCATION"):
            return [_cap(w) for w in value.split()]
        return value.split()

    def render(self, template: str, values: dict) -> list[tuple[str, str, str]]:
        """Template -> [(raw_word, pos, ner)]."""
        out = []
        for piece in template.split():
            m = SLOT_RE.fullmatch(piece)
            if m:
                slot = m.group(1)
                t = slot_type(slot)
                pos, ner = {"PERSON": ("PROPN", "PERSON"), "LOCATION": ("PROPN", "LOCATION"),
                            "DATE": ("NUM", "DATE"), "THING": ("NOUN", "O")}[t]
                out.extend((w, pos, ner) for w in self.surface(slot, values[slot]))
            else:
                out.append((piece, self.spec.pos_lexicon.get(piece.lower(), "NOUN"), "O"))
        return out


def _referenced(template: str) -> list[str]:
    return SLOT_RE.findall(template)


def _valid_questions(facts: Sequence[FactInstance], k: int, slot: str, spec: ToyLanguageSpec) -> list[str]:
    """Question templates for (facts[k], slot) whose referenced slots single out fact k."""
    fact = facts[k]
    answer = fact.values[slot]
    good = []
    for tpl in spec.questions.get(fact.name, {}).get(slot, ()):
        ref = _referenced(tpl)
        clash = any(
            j != k and other.name == fact.name and all(other.values[r] == fact.values[r] for r in ref)
            and other.values[slot] != answer
            for j, other in enumerate(facts))
        if not clash:
            good.append(tpl)
    return good


class ToyGenerator:
    def __init__(self, spec: ToyLanguageSpec, rng: random.Random):
        self.spec = spec
        self.rng = rng
        self.renderer = _Renderer(spec)

    def person(self) -> str:
        return f"{self.rng.choice(self.spec.first_names)} {self.rng.choice(self.spec.last_names)}"

    def value(self, slot: str) -> str:
        t = slot_type(slot)
        if t == "LOCATION":
            return self.rng.choice(self.spec.cities)
        if t == "DATE":
            return str(self.rng.randint(self.spec.year_min, self.spec.year_max))
        if t == "THING":
            return self.rng.choice(self.spec.fields)
        return self.person()

    def facts(self) -> list[FactInstance]:
        spec = self.spec
        people = []
        while len(people) < spec.persons_per_context:
            p = self.person()
            if p not in people or len(people) >= len(spec.first_names) * len(spec.last_names):
                people.append(p)
        names = sorted(spec.facts)
        used = set()
        out = []
        for i in range(spec.facts_per_context):
            subject = people[i % len(people)]
            options = [n for n in names if (n, subject) not in used] or names
            name = self.rng.choice(options)
            used.add((name, subject))
            values = {}
            for slot in _referenced(spec.facts[name]):
                if slot == "person":
                    values[slot] = subject
                else:
                    values[slot] = self.value(slot)
            out.append(FactInstance(name, values))
        return out

    def context(self, facts: Sequence[FactInstance]):
        words, pos, ner, slot_pos = [], [], [], []
        for k, fact in enumerate(facts):
            positions = {}
            pieces = self.spec.facts[fact.name].split()
            for piece in pieces:
                m = SLOT_RE.fullmatch(piece)
                rendered = self.renderer.render(piece, fact.values)
                if m:
                    positions[m.group(1)] = (len(words), len(words) + len(rendered))
                for w, p, n in rendered:
                    words.append(w)
                    pos.append(p)
                    ner.append(n)
            slot_pos.append(positions)
        offsets, cursor = [], 0
        for w in words:
            offsets.append(cursor)
            cursor += len(w) + 1
        return " ".join(words), words, pos, ner, offsets, slot_pos

    def record(self, rid: str, with_question: bool) -> ToyRecord:
        facts = self.facts()
        text, words, pos, ner, offsets, slot_pos = self.context(facts)
        candidates = []
        for k, fact in enumerate(facts):
            for slot in _referenced(self.spec.facts[fact.name]):
                valid = _valid_questions(facts, k, slot, self.spec)
                if valid:
                    candidates.append((k, slot, valid))
        if not candidates:
            raise ValueError("toy spec produced a context with no answerable question")
        k, slot, valid = self.rng.choice(candidates)
        tpl = self.rng.choice(valid)
        s, e = slot_pos[k][slot]
        start = offsets[s]
        end = offsets[e - 1] + len(words[e - 1])
        question = None
        if with_question:
            q = " ".join(w for w, _, _ in self.renderer.render(tpl, facts[k].values))
            question = _cap(q)
        ex = QAExample(id=rid, context=text, answer_text=text[start:end], answer_start=start, question=question)
        return ToyRecord(ex, pos, ner, slot_type(slot), facts[k].name, slot)


@dataclass
class ToyCorpus:
    train: list
    dev: list
    unlabeled: list
    records: dict = field(default_factory=dict)   # id -> ToyRecord (gold tags, answer type)


def make_toy_corpus(spec: ToyLanguageSpec, n_train: int, n_dev: int, n_unlabeled: int) -> ToyCorpus:
    """Three context-disjoint splits; unlabeled carries answer spans but no questions."""
    total = n_train + n_dev + n_unlabeled
    if total > spec.capacity():
        raise ValueError(f"requested {total} contexts but templates allow at most {spec.capacity()}")
    gen = ToyGenerator(spec, random.Random(spec.seed))
    seen: set = set()
    splits = {"train": [], "dev": [], "unlabeled": []}
    records = {}
    budget = 50 * total + 100
    for split, n in (("train", n_train), ("dev", n_dev), ("unlabeled", n_unlabeled)):
        width = max(4, int(math.log10(max(n, 1))) + 1)
        while len(splits[split]) < n:
            budget -= 1
            if budget < 0:
                raise ValueError("template capacity exhausted before reaching the requested size")
            rid = f"{split}-{len(splits[split]):0{width}d}"
            rec = gen.record(rid, with_question=(split != "unlabeled"))
            if rec.example.context in seen:
                continue
            seen.add(rec.example.context)
            splits[split].append(rec.example)
            records[rid] = rec
    return ToyCorpus(splits["train"], splits["dev"], splits["unlabeled"], records)


def answer_type(ner_tags: Sequence[str], span: tuple) -> str:
    tag = ner_tags[span[0]]
    return tag if tag in ("PERSON", "LOCATION", "DATE") else "THING"


def wh_words(tokens: Sequence[str]) -> set:
    return {t for t in tokens if t in WH_WORDS}


def wh_reward(question_tokens: Sequence[str], answer_kind: str) -> float:
    """1 if the question's only wh-word is the one expected for the answer type."""
    return 1.0 if wh_words(question_tokens) == {WH_BY_TYPE[answer_kind]} else 0.0


def make_paraphrase_pairs(spec: ToyLanguageSpec, n: int, seed: int) -> list[tuple[str, str, int]]:
    """Balanced (q1, q2, label) pairs.

    Positives render one (fact, slot, values) with two templates. Negatives ask
    about a different fact or slot, or change one value the second question mentions.
    """
    rng = random.Random(seed)
    gen = ToyGenerator(replace(spec, seed=seed), rng)
    ren = gen.renderer

    def text(tpl, values):
        return " ".join(w for w, _, _ in ren.render(tpl, values))

    pairs = []
    while len(pairs) < n:
        facts = gen.facts()
        k = rng.randrange(len(facts))
        fact = facts[k]
        slots = [s for s in spec.questions.get(fact.name, {}) if s in fact.values]
        if not slots:
            continue
        slot = rng.choice(slots)
        tpls = spec.questions[fact.name][slot]
        if len(pairs) % 2 == 0:
            if len(tpls) < 2:
                continue
            t1, t2 = rng.sample(list(tpls), 2)
            pairs.append((text(t1, fact.values), text(t2, fact.values), 1))
        else:
            t1 = rng.choice(tpls)
            if rng.random() < 0.5:
                other_name = rng.choice(sorted(spec.questions))
                other_slot = rng.choice(sorted(spec.questions[other_name]))
                if (other_name, other_slot) == (fact.name, slot):
                    continue
                vals = dict(fact.values)
                for s in _referenced(spec.facts[other_name]):
                    vals.setdefault(s, gen.value(s))
                t2 = rng.choice(spec.questions[other_name][other_slot])
                pairs.append((text(t1, fact.values), text(t2, vals), 0))
            else:
                t2 = rng.choice(tpls)
                refs = _referenced(t2)
                if not refs:
                    continue
                changed = rng.choice(refs)
                vals = dict(fact.values)
                vals[changed] = gen.value(changed)
                if vals[changed] == fact.values[changed]:
                    continue
                pairs.append((text(t1, fact.values), text(t2, vals), 0))
    return pairs


def load_spec(path: Optional[str]) -> ToyLanguageSpec:
    return ToyLanguageSpec.from_config(path) if path else ToyLanguageSpec()
