"""Regenerate the shared lexical test vectors and the golden bridge conversation.

Token F1 is computed here from scratch (Unicode punctuation categories,
whitespace split, multiset overlap) as an oracle independent of the Rust
implementation. Run from the repository root:

    python3 testdata/gen_vectors.py
"""

import json
import random
import unicodedata
from collections import Counter

ARTICLES = {"a", "an", "the"}


def tokens(text, remove_articles):
    lowered = text.lower()
    kept = "".join(ch for ch in lowered if not unicodedata.category(ch).startswith("P"))
    out = kept.split()
    if remove_articles:
        out = [t for t in out if t not in ARTICLES]
    return out


def f1(candidate, reference, remove_articles):
    c = tokens(candidate, remove_articles)
    r = tokens(reference, remove_articles)
    if not c and not r:
        return 1.0
    common = sum((Counter(c) & Counter(r)).values())
    if common == 0:
        return 0.0
    precision = common / len(c)
    recall = common / len(r)
    return 2.0 * precision * recall / (precision + recall)


FIXED = [
    ("Napoleon", "Napoleon's"),
    ("He never graduated from the university", "no"),
    ("the location of Warsaw within the border region of several big floral regions", "location"),
    ("rain", "infrequent rain"),
    ("P is not equal to NP", "NP is not equal to co-NP"),
    ("secondary school", "secondary school teachers"),
    ("Queen Bees", "women"),
    ("0.5–1.4 m", "50–140 cm"),
    ("", ""),
    ("the", "a"),
    ("The Eiffel Tower", "Eiffel Tower!"),
    ("«Zürich»", "Zurich"),
    ("naïve  \t spacing", "Naïve spacing"),
]

WORDS = [
    "the", "a", "an", "river", "River", "Warsaw", "napoleon's", "1806", "co-NP", "NP",
    "rain,", "sunny", "days.", "“quoted”", "café", "été", "50–140", "cm",
    "(IPCC)", "teachers", "school", "U.S.", "state-of-the-art", "x", "y", "!", "--", "¿qué?",
]


def random_phrase(rng):
    return " ".join(rng.choice(WORDS) for _ in range(rng.randint(0, 6)))


def vectors():
    rng = random.Random(20211015)
    pairs = list(FIXED)
    while len(pairs) < 100:
        pairs.append((random_phrase(rng), random_phrase(rng)))
    return [
        {
            "candidate": c,
            "reference": r,
            "f1_simple": f1(c, r, False),
            "f1_squad_official": f1(c, r, True),
        }
        for c, r in pairs
    ]


def line(obj):
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def conversation():
    """Two batches as a lexical-F1 bridge would answer them."""
    batches = [
        [
            ("ex1", "Whose army liberated Warsaw in 1806?", "Napoleon's", "Napoleon"),
            ("ex4", "Other than many sunny days, what characteristic is typical for the weather in Southern California?", "infrequent rain", "rain"),
            ("ex6", "What types of teachers are retiring the most?", "secondary school teachers", "secondary school"),
        ],
        [
            ("esc", "Quote \"this\" and a back\\slash\nnewline?", "Zürich — naïve", "zurich — NAÏVE"),
        ],
    ]
    out = []
    for b, batch in enumerate(batches):
        for id_, q, ref, cand in batch:
            request = {"id": id_, "question": q, "reference": ref, "candidate": cand}
            response = {"id": id_, "score": f1(cand, ref, False)}
            out.append({"batch": b, "request": line(request), "response": line(response)})
    return out


def main():
    with open("testdata/lexical_f1_vectors.jsonl", "w", encoding="utf-8") as fh:
        for v in vectors():
            fh.write(line(v) + "\n")
    with open("testdata/bridge/conversation.jsonl", "w", encoding="utf-8") as fh:
        for turn in conversation():
            fh.write(line(turn) + "\n")


if __name__ == "__main__":
    main()
