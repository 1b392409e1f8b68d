"""Rule-based parsing of free-form object descriptions.

A description is tokenized with lexicon-driven POS tags, noun phrases are
built around library nouns, pronouns are bound to the subject phrase and
relation phrases are matched (exactly, then fuzzily) against a relation
library.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

POS_TAGS = ("NOUN", "PRON", "ADJ", "VERB", "ADP", "DET", "OTHER")

PRONOUNS = {"it", "its", "they", "them", "their", "this", "that", "these", "those", "itself"}
DEMONSTRATIVES = {"this", "that", "these", "those"}
DETERMINERS = {"the", "a", "an", "some", "any", "each", "every", "another", "one"}
VERBS = {
    "is", "are", "was", "were", "be", "been", "being", "am", "located", "placed",
    "positioned", "situated", "sits", "sitting", "sit", "stands", "standing", "stand",
    "lies", "lying", "has", "have", "had", "looks", "look", "appears", "seems", "can",
    "see", "find", "found", "colored", "coloured", "there", "set", "kept", "rests", "resting",
}
COPULAS = {"is", "are", "was", "were", "looks", "appears", "seems", "be"}
CONJUNCTIONS = {"and", "but", "while", "also", "which", "where", "then"}
FILLERS = {"directly", "just", "also", "slightly", "right", "immediately", "very", "quite"}
SENTENCE_END = {".", "!", "?"}

_WORD_RE = re.compile(r"[A-Za-z]+(?:'[A-Za-z]+)?|[.!?,;]")


class ParseError(ValueError):
    pass


# ---------------------------------------------------------------- lexicons

@dataclass(frozen=True)
class NounLibrary:
    classes: dict[int, str]
    lookup: dict[str, tuple[int, str]]  # surface -> (class_id, lemma)
    attributes: dict[str, str]  # word -> category
    scene_classes: frozenset[int] = frozenset()

    @classmethod
    def from_entries(cls, nouns: list[dict], attributes: list[dict],
                     scene_nouns: tuple[str, ...] = ("room",)) -> "NounLibrary":
        classes: dict[int, str] = {}
        lookup: dict[str, tuple[int, str]] = {}
        scene = set()
        for e in nouns:
            cid = int(e["class_id"])
            if cid in classes:
                raise ValueError(f"duplicate class_id {cid}")
            classes[cid] = e["canonical"]
            singulars = [e["canonical"], *e.get("synonyms", [])]
            for s in singulars:
                _register(lookup, s.lower(), cid, s.lower())
            for p in e.get("plurals", []):
                _register(lookup, p.lower(), cid, _singular_for(p.lower(), singulars))
            if e["canonical"] in scene_nouns:
                scene.add(cid)
        attrs = {a["word"].lower(): a["category"] for a in attributes}
        return cls(classes, lookup, attrs, frozenset(scene))

    def class_of(self, word: str) -> int | None:
        hit = self.lookup.get(word.lower())
        return hit[0] if hit else None

    @property
    def object_classes(self) -> list[int]:
        return sorted(c for c in self.classes if c not in self.scene_classes)


def _register(lookup, word, cid, lemma):
    if word in lookup and lookup[word][0] != cid:
        raise ValueError(f"noun {word!r} maps to classes {lookup[word][0]} and {cid}")
    lookup[word] = (cid, lemma)


def _singular_for(plural: str, singulars: list[str]) -> str:
    best = max(singulars, key=lambda s: (_common_prefix(s, plural), -len(s)))
    return best.lower()


def _common_prefix(a: str, b: str) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


@dataclass(frozen=True)
class RelationLibrary:
    canonical: dict[int, str]
    variants: tuple[tuple[str, int], ...]  # (normalized variant, canonical_id)
    vocabulary: frozenset[str]

    @classmethod
    def from_entries(cls, entries: list[dict]) -> "RelationLibrary":
        canonical = {}
        variants = []
        vocab = set()
        for e in entries:
            cid = int(e["canonical_id"])
            canonical[cid] = e["canonical"]
            for v in [e["canonical"], *e.get("variants", [])]:
                words = v.lower().split()
                vocab.update(words)
                norm = " ".join(_normalize_words(words))
                if norm and (norm, cid) not in variants:
                    variants.append((norm, cid))
        return cls(canonical, tuple(variants), frozenset(vocab))

    def match(self, phrase: str, threshold: float = 0.34) -> tuple[int, float] | None:
        """Return (canonical_id, normalized distance) for the closest variant."""
        if not phrase:
            return None
        for v, cid in self.variants:
            if v == phrase:
                return cid, 0.0
        best = None
        for v, cid in self.variants:
            d = edit_distance(phrase, v) / max(len(phrase), len(v))
            key = (d, len(v))
            if d <= threshold and (best is None or key < best[0]):
                best = (key, cid)
        return (best[1], best[0][0]) if best else None


@dataclass(frozen=True)
class Lexicon:
    nouns: NounLibrary
    relations: RelationLibrary

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "Lexicon":
        if directory is None:
            base = resources.files("ground3d") / "lexicons"
            read = lambda n: json.loads((base / n).read_text())  # noqa: E731
        else:
            directory = Path(directory)
            read = lambda n: json.loads((directory / n).read_text())  # noqa: E731
        return cls(NounLibrary.from_entries(read("nouns.json"), read("attributes.json")),
                   RelationLibrary.from_entries(read("relations.json")))


_DEFAULT: Lexicon | None = None


def default_lexicon() -> Lexicon:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = Lexicon.load()
    return _DEFAULT


def color_words(lexicon: Lexicon | None = None) -> list[str]:
    """Color attributes in lexicon order; the index is the color label."""
    lex = lexicon or default_lexicon()
    return [w for w, cat in lex.nouns.attributes.items() if cat == "color"]


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _normalize_words(words: list[str]) -> list[str]:
    kept = [w for w in words
            if w not in VERBS and w not in {"a", "an"} and w not in CONJUNCTIONS
            and w not in FILLERS and w not in {",", ";"}]
    while kept and kept[-1] in DETERMINERS:
        kept.pop()
    while kept and kept[0] == "the":
        kept.pop(0)
    return kept


# ---------------------------------------------------------------- parsed structures

@dataclass(frozen=True)
class Token:
    surface: str
    lemma: str
    pos: str
    sentence_index: int
    ref: int | None = None  # phrase index for substituted pronoun tokens
    unresolved: bool = False


@dataclass
class NounPhrase:
    phrase_index: int
    head: Token
    attributes: list[Token]
    class_id: int
    span: tuple[int, int]
    is_subject: bool = False

    @property
    def sentence_index(self) -> int:
        return self.head.sentence_index

    @property
    def tokens(self) -> list[Token]:
        return [*self.attributes, self.head]

    @property
    def text(self) -> str:
        return " ".join(t.surface.lower() for t in self.tokens)


@dataclass
class RelationPhrase:
    source_phrase: int
    target_phrase: int
    predicate_tokens: list[Token]
    canonical_id: int
    canonical: str = ""
    distance: float = 0.0


@dataclass
class ParsedDescription:
    raw_text: str
    tokens: list[Token]
    noun_phrases: list[NounPhrase]
    relation_phrases: list[RelationPhrase]
    mentions: list[tuple[int, int, int]] = field(default_factory=list)
    unresolved: list[int] = field(default_factory=list)

    @property
    def subject(self) -> NounPhrase:
        return next(p for p in self.noun_phrases if p.is_subject)

    def to_dict(self) -> dict:
        return {
            "raw_text": self.raw_text,
            "tokens": [asdict(t) for t in self.tokens],
            "noun_phrases": [
                {"phrase_index": p.phrase_index, "text": p.text, "head": p.head.lemma,
                 "attributes": [a.lemma for a in p.attributes], "class_id": p.class_id,
                 "span": list(p.span), "is_subject": p.is_subject}
                for p in self.noun_phrases],
            "relation_phrases": [
                {"source": r.source_phrase, "target": r.target_phrase,
                 "predicate": " ".join(t.surface.lower() for t in r.predicate_tokens),
                 "canonical_id": r.canonical_id, "canonical": r.canonical,
                 "distance": r.distance}
                for r in self.relation_phrases],
            "unresolved_pronouns": self.unresolved,
        }


# ---------------------------------------------------------------- pipeline stages

def tokenize(text: str, lexicon: Lexicon | None = None) -> list[Token]:
    lexicon = lexicon or default_lexicon()
    raw = _WORD_RE.findall(text)
    words: list[tuple[str, int]] = []
    sent = 0
    for w in raw:
        if w in SENTENCE_END:
            if words and words[-1][1] == sent:
                sent += 1
            continue
        if w in {",", ";"}:
            continue
        words.append((w, sent))
    tokens: list[Token] = []
    for i, (w, s) in enumerate(words):
        low = w.lower()
        nxt = words[i + 1][0].lower() if i + 1 < len(words) and words[i + 1][1] == s else None
        tokens.append(Token(w, *_tag(low, nxt, tokens[-1] if tokens else None, lexicon), s))
    return tokens


def _tag(low: str, nxt: str | None, prev: Token | None, lexicon: Lexicon) -> tuple[str, str]:
    nouns = lexicon.nouns
    hit = nouns.lookup.get(low)
    if hit is not None:
        return hit[1], "NOUN"
    if low in nouns.attributes:
        return low, "ADJ"
    if low in PRONOUNS:
        if low in DEMONSTRATIVES:
            if nxt is not None and (nxt in nouns.lookup or nxt in nouns.attributes):
                return low, "DET"
            if low == "that" and prev is not None and prev.pos == "NOUN":
                return low, "OTHER"  # relative pronoun
        return low, "PRON"
    if low in DETERMINERS:
        return low, "DET"
    if low in VERBS:
        return low, "VERB"
    if low in lexicon.relations.vocabulary:
        return low, "ADP"
    return low, "OTHER"


def extract_noun_phrases(tokens: list[Token], lexicon: Lexicon | None = None) -> list[NounPhrase]:
    lexicon = lexicon or default_lexicon()
    phrases: list[NounPhrase] = []
    for i, tok in enumerate(tokens):
        if tok.pos != "NOUN":
            continue
        cid = lexicon.nouns.class_of(tok.lemma)
        if cid is None:
            continue
        start = i
        while start > 0 and tokens[start - 1].pos == "ADJ" \
                and tokens[start - 1].sentence_index == tok.sentence_index:
            start -= 1
        attrs = list(tokens[start:i])
        phrases.append(NounPhrase(len(phrases), tok, attrs, cid, (start, i + 1)))
    if not phrases:
        raise ParseError("description contains no resolvable noun")
    # predicate adjectives: "<noun> is [adv] ADJ+" with no noun right after
    by_end = {p.span[1]: p for p in phrases}
    for owner_end, adjs in _copula_adjectives(tokens):
        owner = by_end.get(owner_end)
        if owner is not None:
            owner.attributes.extend(adjs)
    return phrases


def _copula_adjectives(tokens: list[Token]):
    """Yield (end index of the word before the copula, adjective tokens)."""
    n = len(tokens)
    for i, tok in enumerate(tokens):
        if tok.lemma not in COPULAS or i == 0:
            continue
        if tokens[i - 1].sentence_index != tok.sentence_index:
            continue
        j = i + 1
        while j < n and tokens[j].lemma in FILLERS and tokens[j].sentence_index == tok.sentence_index:
            j += 1
        k = j
        while k < n and tokens[k].pos == "ADJ" and tokens[k].sentence_index == tok.sentence_index:
            k += 1
        if k == j:
            continue
        if k < n and tokens[k].pos == "NOUN" and tokens[k].sentence_index == tok.sentence_index:
            continue
        yield i, tokens[j:k]


def designate_subject(phrases: list[NounPhrase], tokens: list[Token] | None = None) -> list[NounPhrase]:
    """Mark the first noun phrase of the first sentence that has one as the subject."""
    for p in phrases:
        p.is_subject = False
    first = min(phrases, key=lambda p: (p.sentence_index, p.span[0]))
    first.is_subject = True
    return phrases


def resolve_pronouns(tokens: list[Token], phrases: list[NounPhrase]):
    """Replace third-person pronouns by the subject's tokens.

    Returns (new tokens, mentions, unresolved positions). ``mentions`` lists
    (phrase_index, start, end) spans in the new token stream, in surface order.
    Phrase spans are rewritten to the new stream.
    """
    subject = next(p for p in phrases if p.is_subject)
    subject_first = subject.span[0]
    start_of = {p.span[0]: p for p in phrases}
    end_to_pron: dict[int, int] = {}
    out: list[Token] = []
    mentions: list[tuple[int, int, int]] = []
    unresolved: list[int] = []
    spans: dict[int, tuple[int, int]] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        p = start_of.get(i)
        if p is not None:
            s = len(out)
            out.extend(tokens[p.span[0]:p.span[1]])
            spans[p.phrase_index] = (s, len(out))
            mentions.append((p.phrase_index, s, len(out)))
            i = p.span[1]
            continue
        if tok.pos == "PRON":
            if i < subject_first:
                unresolved.append(len(out))
                out.append(replace(tok, unresolved=True))
            else:
                s = len(out)
                sub_tokens = subject.tokens
                out.extend(Token(t.surface, t.lemma, t.pos, tok.sentence_index, ref=subject.phrase_index)
                           for t in sub_tokens)
                mentions.append((subject.phrase_index, s, len(out)))
                end_to_pron[s + len(sub_tokens)] = subject.phrase_index
            i += 1
            continue
        out.append(tok)
        i += 1
    for p in phrases:
        p.span = spans[p.phrase_index]
    # predicate adjectives linked to a pronoun attach to the subject
    for owner_end, adjs in _copula_adjectives(out):
        if end_to_pron.get(owner_end) == subject.phrase_index:
            known = {id(a) for a in subject.attributes}
            for a in adjs:
                if a.lemma not in {b.lemma for b in subject.attributes} and id(a) not in known:
                    subject.attributes.append(a)
    return out, mentions, unresolved


def extract_relations(tokens: list[Token], mentions: list[tuple[int, int, int]],
                      lexicon: Lexicon | None = None, threshold: float = 0.34) -> list[RelationPhrase]:
    lexicon = lexicon or default_lexicon()
    rel = lexicon.relations
    by_sentence: dict[int, list[tuple[int, int, int]]] = {}
    for m in mentions:
        by_sentence.setdefault(tokens[m[1]].sentence_index, []).append(m)
    edges: list[RelationPhrase] = []
    for sent, ms in sorted(by_sentence.items()):
        ms.sort(key=lambda m: m[1])
        sent_start = next(i for i, t in enumerate(tokens) if t.sentence_index == sent)
        last_edge: RelationPhrase | None = None
        # fronted predicate: "the <rel> of X is Y" puts Y at <rel> of X
        lead = tokens[sent_start:ms[0][1]]
        if len(ms) >= 2 and lead and lead[-1].lemma == "of":
            hit = rel.match(" ".join(_normalize_words([t.lemma for t in lead])), threshold)
            between = _normalize_words([t.lemma for t in tokens[ms[0][2]:ms[1][1]]])
            if hit and not between and ms[0][0] != ms[1][0]:
                last_edge = _edge(ms[1][0], ms[0][0], lead, hit, rel)
                edges.append(last_edge)
                ms = ms[1:]
        for a, b in zip(ms, ms[1:]):
            span = tokens[a[2]:b[1]]
            words = [t.lemma for t in span]
            norm = _normalize_words(words)
            if not norm:
                continue
            hit = rel.match(" ".join(norm), threshold)
            if hit is None:
                continue
            src = a[0]
            if words and words[0] in {"and", "or"} and last_edge is not None \
                    and last_edge.target_phrase == a[0]:
                src = last_edge.source_phrase
            if src == b[0]:
                continue
            last_edge = _edge(src, b[0], span, hit, rel)
            edges.append(last_edge)
    return edges


def _edge(src, dst, span, hit, rel: RelationLibrary) -> RelationPhrase:
    keep = [t for t in span if t.lemma in set(_normalize_words([t.lemma for t in span]))]
    return RelationPhrase(src, dst, keep or list(span), hit[0], rel.canonical[hit[0]], hit[1])


def parse(text: str, lexicon: Lexicon | None = None) -> ParsedDescription:
    """tokenize -> noun phrases -> subject -> pronouns -> relations."""
    if not text or not text.strip():
        raise ParseError("empty description")
    lexicon = lexicon or default_lexicon()
    tokens = tokenize(text, lexicon)
    phrases = extract_noun_phrases(tokens, lexicon)
    designate_subject(phrases, tokens)
    resolved, mentions, unresolved = resolve_pronouns(tokens, phrases)
    relations = extract_relations(resolved, mentions, lexicon)
    return ParsedDescription(text, resolved, phrases, relations, mentions, unresolved)


_LATERAL = re.compile(r"\b(right|left)(?= (?:of|side)\b)", re.IGNORECASE)
_DEPTH = re.compile(r"\b(in front of|in back of|behind)\b", re.IGNORECASE)


def _keep_case(src: str, word: str) -> str:
    return word[0].upper() + word[1:] if src[0].isupper() else word


def mirror_description(text: str, swap_lateral: bool, swap_depth: bool) -> str:
    """Rewrite directional predicates to match a mirrored scene.

    A flip across the x axis exchanges left and right; a flip across y
    exchanges in front of and behind. Other words are left alone.
    """
    if swap_lateral:
        text = _LATERAL.sub(
            lambda m: _keep_case(m.group(1), "left" if m.group(1).lower() == "right" else "right"), text)
    if swap_depth:
        text = _DEPTH.sub(
            lambda m: _keep_case(m.group(1), "behind" if m.group(1).lower().startswith("in ")
                                 else "in front of"), text)
    return text
