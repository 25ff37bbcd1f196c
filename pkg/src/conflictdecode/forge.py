"""Synthetic knowledge-conflict QA benchmark.

A seeded, typed knowledge base stands in for an encyclopedic graph. Every
fact is rendered into a *memory corpus* used to pretrain the toy model, so
the model's parametric knowledge is known exactly. QA instances pair a
question about one fact with a rendered context; conflict instances swap
the answer object for a different entity of the same type, so the context
contradicts what the model memorized.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, GenerationError, InjectionError, InputError
from .seeding import derive_seed
from .text import PROMPT_TEMPLATE, TEMPLATE_TOKENS, Vocabulary, tokenize

DEFAULT_TEMPLATES = ("{s} {r} {o} .", "the {r} of {s} is {o} .")
QUESTION_TEMPLATE = "what is the {r} of {s} ?"
REFUSAL_MARKERS = ("i'm sorry", "as an ai", "i cannot")
MAX_CONTEXT_TOKENS = 64
MAX_RETRIES = 20

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class Triple:
    subject: int
    relation: int
    obj: int
    object_type: int

    def ids(self):
        return [self.subject, self.relation, self.obj]


@dataclass(frozen=True)
class Relation:
    id: int
    name: str
    subject_type: int
    object_type: int


@dataclass(frozen=True)
class KBSpec:
    n_types: int = 4
    entities_per_type: int = 64
    n_relations: int = 8
    n_facts: int = 400
    seed: int = 0

    def validate(self):
        for name in ("n_types", "entities_per_type", "n_relations", "n_facts"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"kb.{name} must be >= 1")
        if self.entities_per_type < 2:
            raise ConfigurationError("kb.entities_per_type must be >= 2 so conflicts can be injected")
        capacity = self.n_relations * self.entities_per_type
        if self.n_facts > capacity:
            raise ConfigurationError(
                f"kb.n_facts={self.n_facts} exceeds the {capacity} distinct (subject, relation) pairs")


@dataclass(frozen=True)
class Subgraph:
    triples: tuple
    answer_index: int = 0

    def __post_init__(self):
        if not self.triples:
            raise InputError("subgraph must be nonempty")
        if not 0 <= self.answer_index < len(self.triples):
            raise InputError("answer_index out of range")

    @property
    def answer(self):
        return self.triples[self.answer_index]


@dataclass(frozen=True)
class QAInstance:
    id: str
    question: str
    context: str
    answer: str
    conflict: bool
    source: Subgraph
    perturbed: Subgraph | None = None
    noise: bool = False

    @property
    def perturbed_object(self):
        return None if self.perturbed is None else self.perturbed.answer.obj

    def to_record(self):
        return {
            "id": self.id,
            "question": self.question,
            "context": self.context,
            "answer": self.answer,
            "conflict": self.conflict,
            "noise": self.noise,
            "source_triples": [t.ids() for t in self.source.triples],
            "perturbed_object": self.perturbed_object,
        }

    @classmethod
    def from_record(cls, record, kb=None):
        def typ(entity):
            return kb.type_of[entity] if kb is not None else -1

        triples = tuple(Triple(s, r, o, typ(o)) for s, r, o in record["source_triples"])
        source = Subgraph(triples, 0)
        perturbed = None
        if record.get("perturbed_object") is not None:
            head = triples[0]
            swapped = Triple(head.subject, head.relation, record["perturbed_object"], typ(record["perturbed_object"]))
            perturbed = Subgraph((swapped,) + triples[1:], 0)
        return cls(record["id"], record["question"], record["context"], record["answer"],
                   bool(record["conflict"]), source, perturbed, bool(record.get("noise", False)))


@dataclass
class QualityResult:
    accepted: bool
    reasons: list = field(default_factory=list)


def _pseudo_words(rng, n, n_syllables, suffix="", taken=()):
    taken = set(taken)
    words = []
    while len(words) < n:
        word = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                       for _ in range(n_syllables)) + suffix
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


class KnowledgeBase:
    """Typed entities, a relation schema and a functional triple store."""

    def __init__(self, spec, names, type_of, relations, triples):
        self.spec = spec
        self.names = list(names)
        self.type_of = list(type_of)
        self.relations = list(relations)
        self.triples = list(triples)
        self.entities_by_type = [[e for e, t in enumerate(self.type_of) if t == k] for k in range(spec.n_types)]
        self._by_pair = {(t.subject, t.relation): t for t in self.triples}
        self._by_name = {n: i for i, n in enumerate(self.names)}

    def surface(self, entity):
        return self.names[entity]

    def relation_surface(self, relation):
        return self.relations[relation].name

    def lookup(self, subject, relation):
        return self._by_pair.get((subject, relation))

    def entity_by_name(self, name):
        return self._by_name.get(name)

    def __contains__(self, triple):
        found = self._by_pair.get((triple.subject, triple.relation))
        return found is not None and found.obj == triple.obj

    def free_pairs(self):
        """(subject, relation) pairs that the schema allows but the store leaves empty."""
        out = []
        for rel in self.relations:
            for s in self.entities_by_type[rel.subject_type]:
                if (s, rel.id) not in self._by_pair:
                    out.append((s, rel.id))
        return out

    def question_text(self, subject, relation):
        return QUESTION_TEMPLATE.format(r=self.relation_surface(relation), s=self.surface(subject))

    def memory_corpus(self):
        """One sentence per template per fact; this is what the model memorizes."""
        lines = []
        for t in self.triples:
            for template in DEFAULT_TEMPLATES:
                lines.append(template.format(s=self.surface(t.subject), r=self.relation_surface(t.relation),
                                             o=self.surface(t.obj)))
        return lines

    def vocabulary(self):
        fixed = set()
        for template in DEFAULT_TEMPLATES + (QUESTION_TEMPLATE,):
            fixed.update(tok for tok in tokenize(template.format(s="", r="", o="")))
        words = list(TEMPLATE_TOKENS) + sorted(fixed - set(TEMPLATE_TOKENS))
        words += [r.name for r in self.relations] + self.names
        return Vocabulary(words)

    def to_dict(self):
        return {
            "spec": dataclasses.asdict(self.spec),
            "entities": [{"id": i, "name": n, "type": t} for i, (n, t) in enumerate(zip(self.names, self.type_of))],
            "relations": [dataclasses.asdict(r) for r in self.relations],
            "triples": [t.ids() for t in self.triples],
        }

    def checksum(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def build_kb(spec):
    spec.validate()
    rng = np.random.default_rng(derive_seed(spec.seed, "kb"))
    reserved = set(TEMPLATE_TOKENS) | {"what", "is", "the", "of"}
    n_entities = spec.n_types * spec.entities_per_type
    names = _pseudo_words(rng, n_entities, 3, taken=reserved)
    type_of = [e // spec.entities_per_type for e in range(n_entities)]
    rel_names = _pseudo_words(rng, spec.n_relations, 2, suffix="r", taken=reserved | set(names))
    relations = [Relation(i, rel_names[i], int(rng.integers(spec.n_types)), int(rng.integers(spec.n_types)))
                 for i in range(spec.n_relations)]
    pairs = [(s, rel.id) for rel in relations for s in range(n_entities) if type_of[s] == rel.subject_type]
    chosen = sorted(rng.choice(len(pairs), size=spec.n_facts, replace=False))
    triples = []
    for idx in chosen:
        s, r = pairs[idx]
        pool = [e for e in range(n_entities) if type_of[e] == relations[r].object_type and e != s]
        o = int(pool[rng.integers(len(pool))])
        triples.append(Triple(s, r, o, type_of[o]))
    return KnowledgeBase(spec, names, type_of, relations, triples)


def extract_subgraph(kb, seed_triple, n_distractors, seed=0):
    """The seed fact plus ``n_distractors`` triples sharing one of its entities."""
    if seed_triple not in kb:
        raise InputError(f"triple {seed_triple.ids()} is not in the knowledge base")
    if n_distractors < 0:
        raise InputError("n_distractors must be >= 0")
    rng = np.random.default_rng(seed)
    ends = {seed_triple.subject, seed_triple.obj}
    others = [t for t in kb.triples if t != seed_triple]
    neighbours = [t for t in others if t.subject in ends or t.obj in ends]
    if len(neighbours) >= n_distractors:
        # subject-side neighbours first: triples repeating the answer object would
        # restate it next to a swapped answer and blur the conflict
        near = [t for t in neighbours if seed_triple.obj not in (t.subject, t.obj)]
        far = [t for t in neighbours if seed_triple.obj in (t.subject, t.obj)]
        k = min(n_distractors, len(near))
        picks = [near[i] for i in rng.choice(len(near), k, replace=False)] if k else []
        if n_distractors > k:
            picks += [far[i] for i in rng.choice(len(far), n_distractors - k, replace=False)]
        order = {t: i for i, t in enumerate(neighbours)}
        picks.sort(key=order.__getitem__)
    else:
        rest = [t for t in others if t not in neighbours]
        extra = min(n_distractors - len(neighbours), len(rest))
        picks = neighbours + [rest[i] for i in sorted(rng.choice(len(rest), extra, replace=False))]
    return Subgraph((seed_triple,) + tuple(picks), 0)


def inject_conflict(subgraph, kb, seed=0):
    """Swap the answer object for a different entity of the same type."""
    head = subgraph.answer
    pool = [e for e in kb.entities_by_type[head.object_type] if e != head.obj]
    if not pool:
        raise InjectionError(f"no alternative entity of type {head.object_type}")
    rng = np.random.default_rng(seed)
    new_obj = int(pool[rng.integers(len(pool))])
    triples = list(subgraph.triples)
    triples[subgraph.answer_index] = Triple(head.subject, head.relation, new_obj, head.object_type)
    return Subgraph(tuple(triples), subgraph.answer_index)


def _templates_for(template_set, relation):
    if isinstance(template_set, dict):
        found = template_set.get(relation)
        if not found:
            raise ConfigurationError(f"no sentence template for relation {relation}")
        return found
    if not template_set:
        raise ConfigurationError("template set is empty")
    return template_set


def render_context(subgraph, kb, template_set=DEFAULT_TEMPLATES, seed=0):
    """Render each triple with a seeded template choice, in seeded order."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subgraph.triples))
    sentences = []
    for i in order:
        t = subgraph.triples[int(i)]
        options = _templates_for(template_set, t.relation)
        template = options[int(rng.integers(len(options)))]
        sentences.append(template.format(s=kb.surface(t.subject), r=kb.relation_surface(t.relation),
                                         o=kb.surface(t.obj)))
    return " ".join(sentences)


def _contains(tokens, phrase):
    n = len(phrase)
    return n > 0 and any(tokens[i:i + n] == phrase for i in range(len(tokens) - n + 1))


def quality_filter(instance, kb=None, max_context_tokens=MAX_CONTEXT_TOKENS):
    """Structural checks: relevance, conflict validity and response quality."""
    reasons = []
    ctx_tokens = tokenize(instance.context)
    head = instance.source.answer
    if kb is not None:
        subject, relation = kb.surface(head.subject), kb.relation_surface(head.relation)
        if not (_contains(ctx_tokens, tokenize(subject)) and _contains(ctx_tokens, tokenize(relation))):
            reasons.append("relevance")
    if not _contains(ctx_tokens, tokenize(instance.answer)):
        reasons.append("answer_missing")

    if instance.conflict != (instance.perturbed is not None):
        reasons.append("conflict_validity")
    elif instance.perturbed is not None:
        new = instance.perturbed.answer
        same_type = new.object_type == head.object_type
        if kb is not None:
            same_type = kb.type_of[new.obj] == kb.type_of[head.obj]
        if new.obj == head.obj or not same_type or (new.subject, new.relation) != (head.subject, head.relation):
            reasons.append("conflict_validity")

    lowered = instance.context.lower()
    if not ctx_tokens or len(ctx_tokens) > max_context_tokens or any(m in lowered for m in REFUSAL_MARKERS):
        reasons.append("response_quality")
    return QualityResult(not reasons, reasons)


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def _make_instance(kb, slot_id, triple, conflict, n_distractors, seed, template_set):
    sub = extract_subgraph(kb, triple, n_distractors, seed=derive_seed(seed, "subgraph"))
    perturbed = inject_conflict(sub, kb, seed=derive_seed(seed, "inject")) if conflict else None
    shown = perturbed if conflict else sub
    context = render_context(shown, kb, template_set, seed=derive_seed(seed, "render"))
    return QAInstance(slot_id, kb.question_text(triple.subject, triple.relation), context,
                      kb.surface(shown.answer.obj), conflict, sub, perturbed, False)


def synthesize_dataset(kb, n_instances, conflict_ratio=0.5, n_distractors=3, seed=0,
                       template_set=DEFAULT_TEMPLATES, max_retries=MAX_RETRIES, stats=None):
    """Sample QA instances with exactly ``round(n * ratio)`` conflicts.

    Each slot derives its own seed from ``(seed, slot)``; rejected instances
    are resampled up to ``max_retries`` times. Pass a dict as ``stats`` to
    collect rejection counts.
    """
    if n_instances < 1:
        raise ConfigurationError("n_instances must be >= 1")
    if not 0.0 <= conflict_ratio <= 1.0:
        raise ConfigurationError("conflict_ratio must lie in [0, 1]")
    n_conflict = _round_half_up(n_instances * conflict_ratio)
    order = np.random.default_rng(derive_seed(seed, "conflict-slots")).permutation(n_instances)
    conflict_slots = set(int(i) for i in order[:n_conflict])
    width = max(5, len(str(n_instances - 1)))
    rejects = Counter()
    out = []
    for slot in range(n_instances):
        conflict = slot in conflict_slots
        slot_seed = derive_seed(seed, f"slot:{slot}")
        for attempt in range(max_retries + 1):
            attempt_seed = derive_seed(slot_seed, f"attempt:{attempt}")
            rng = np.random.default_rng(attempt_seed)
            triple = kb.triples[int(rng.integers(len(kb.triples)))]
            try:
                inst = _make_instance(kb, f"q{slot:0{width}d}", triple, conflict, n_distractors,
                                      attempt_seed, template_set)
            except InjectionError:
                rejects["injection"] += 1
                continue
            verdict = quality_filter(inst, kb)
            if verdict.accepted:
                out.append(inst)
                break
            rejects.update(verdict.reasons)
        else:
            raise GenerationError(f"slot {slot}: retry budget of {max_retries} exhausted ({dict(rejects)})")
    if stats is not None:
        stats.update({"instances": len(out), "conflicts": n_conflict, "rejects": dict(rejects)})
    return out


def inject_noise(dataset, noise_ratio, kb, seed=0, n_distractors=1, template_set=DEFAULT_TEMPLATES):
    """Prepend or append an unrelated rendered subgraph to a seeded fraction of instances."""
    if not 0.0 <= noise_ratio <= 1.0:
        raise ConfigurationError("noise_ratio must lie in [0, 1]")
    n_noisy = _round_half_up(len(dataset) * noise_ratio)
    order = np.random.default_rng(derive_seed(seed, "noise-slots")).permutation(len(dataset))
    noisy = set(int(i) for i in order[:n_noisy])
    out = []
    for i, inst in enumerate(dataset):
        if i not in noisy:
            out.append(inst)
            continue
        rng = np.random.default_rng(derive_seed(seed, f"noise:{inst.id}"))
        subject = inst.source.answer.subject
        candidates = [t for t in kb.triples if t.subject != subject and t.obj != subject]
        anchor = candidates[int(rng.integers(len(candidates)))]
        sub = extract_subgraph(kb, anchor, n_distractors, seed=int(rng.integers(2**63)))
        kept = tuple(t for t in sub.triples if t.subject != subject)
        text = render_context(Subgraph(kept, 0), kb, template_set, seed=int(rng.integers(2**63)))
        context = f"{text} {inst.context}" if rng.integers(2) == 0 else f"{inst.context} {text}"
        out.append(dataclasses.replace(inst, context=context, noise=True))
    return out


def build_training_corpus(kb, seed=0, n_distractors=3, open_book_per_fact=2, reading_variants=30,
                          update_fraction=0.0, template_set=DEFAULT_TEMPLATES):
    """Pretraining sequences that teach both recall and reading.

    * fact sentences (the memory corpus),
    * closed-book QA on every fact,
    * open-book QA whose context agrees with memory, except that a seeded
      ``update_fraction`` of them swap in a different object and take it as
      the answer (the context overrides memory),
    * reading QA on schema-valid pairs absent from the store, each seen with
      several different objects so the answer can only come from the context;
      their distractor count varies from 0 to ``n_distractors`` so the easy
      single-fact cases bootstrap copying.
    """
    rng = np.random.default_rng(derive_seed(seed, "training-corpus"))

    def qa(context, question, answer):
        return "<bos> " + PROMPT_TEMPLATE.format(context=context, question=question) + f" {answer} <end>"

    lines = [f"<bos> {s} <end>" for s in kb.memory_corpus()]
    for t in kb.triples:
        question = kb.question_text(t.subject, t.relation)
        lines.append(qa("", question, kb.surface(t.obj)))
        for _ in range(open_book_per_fact):
            sub = extract_subgraph(kb, t, n_distractors, seed=int(rng.integers(2**63)))
            answer = t.obj
            if update_fraction and rng.random() < update_fraction:
                sub = inject_conflict(sub, kb, seed=int(rng.integers(2**63)))
                answer = sub.answer.obj
            context = render_context(sub, kb, template_set, seed=int(rng.integers(2**63)))
            lines.append(qa(context, question, kb.surface(answer)))
    for s, r in kb.free_pairs():
        rel = kb.relations[r]
        pool = [e for e in kb.entities_by_type[rel.object_type] if e != s]
        neighbours = [t for t in kb.triples if t.subject == s or t.obj == s]
        for _ in range(reading_variants):
            obj = int(pool[rng.integers(len(pool))])
            fresh = Triple(s, r, obj, rel.object_type)
            want = int(rng.integers(0, n_distractors + 1))
            k = min(want, len(neighbours))
            picks = [neighbours[i] for i in sorted(rng.choice(len(neighbours), k, replace=False))] if k else []
            if len(picks) < want:
                picks += [kb.triples[int(i)] for i in rng.choice(len(kb.triples), want - len(picks), replace=False)]
            context = render_context(Subgraph((fresh,) + tuple(picks), 0), kb, template_set,
                                     seed=int(rng.integers(2**63)))
            lines.append(qa(context, kb.question_text(s, r), kb.surface(obj)))
    return lines


def write_jsonl(path, dataset):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in dataset:
            fh.write(json.dumps(inst.to_record(), sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path, kb=None):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(QAInstance.from_record(json.loads(line), kb))
    return out
