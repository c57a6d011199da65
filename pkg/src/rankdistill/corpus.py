"""Deterministic synthetic mixed-text corpora.

Four byte-level "domains" (templated prose, toy code snippets, arithmetic
lines, and fact-recall statements) drawn from a shared vocabulary so that
differently-seeded streams are disjoint in content but identically
distributed. The fact domain pairs each key word with an arbitrary fixed
digit string, so a model can only predict the digits by memorizing the
pairings. Used to generate the committed train/validation/eval files.
"""

import numpy as np

_CONS = "bcdfglmnprstvz"
_VOW = "aeiou"


def _word_list(rng, n, syllables):
    words = set()
    while len(words) < n:
        w = "".join(
            rng.choice(list(_CONS)) + rng.choice(list(_VOW))
            for _ in range(syllables)
        )
        words.add(w)
    return sorted(words)


def _language(seed=7):
    """Shared vocabulary for every stream, independent of the stream seed."""
    rng = np.random.default_rng(seed)
    lang = {
        "nouns": _word_list(rng, 400, 3),
        "verbs": _word_list(rng, 200, 3),
        "adjs": _word_list(rng, 200, 4),
        "names": _word_list(rng, 64, 2),
        "fact_keys": _word_list(rng, 128, 3),
    }
    digits = rng.integers(0, 10, size=(len(lang["fact_keys"]), 8))
    lang["fact_vals"] = ["".join(str(d) for d in row) for row in digits]
    return lang


_PROSE_TEMPLATES = [
    "the {a} {n} {v} the {n2}.",
    "a {n} {v} near the {a} {n2}.",
    "every {n} {v} when the {n2} is {a}.",
    "the {n} and the {n2} {v} again.",
    "no {a} {n} ever {v} the {n2}.",
]


def _prose(rng, lang):
    t = _PROSE_TEMPLATES[rng.integers(len(_PROSE_TEMPLATES))]
    return t.format(
        a=lang["adjs"][rng.integers(len(lang["adjs"]))],
        n=lang["nouns"][rng.integers(len(lang["nouns"]))],
        n2=lang["nouns"][rng.integers(len(lang["nouns"]))],
        v=lang["verbs"][rng.integers(len(lang["verbs"]))],
    ) + " "


def _code(rng, lang):
    name = lang["names"][rng.integers(len(lang["names"]))]
    arg = lang["names"][rng.integers(len(lang["names"]))]
    op = "+-*"[rng.integers(3)]
    k = rng.integers(1, 100)
    return f"def {name}({arg}):\n    return {arg} {op} {k}\n"


def _math(rng, _lang):
    a = int(rng.integers(1, 50))
    b = int(rng.integers(1, 50))
    return f"{a} + {b} = {a + b}. "


def _facts(rng, lang):
    i = rng.integers(len(lang["fact_keys"]))
    return f"{lang['fact_keys'][i]} means {lang['fact_vals'][i]}. "


_DOMAINS = (_prose, _code, _math, _facts)


def generate_corpus(n_bytes: int, seed: int,
                    mix=(0.45, 0.1, 0.1, 0.35)) -> bytes:
    """Deterministic mixed stream of roughly n_bytes ascii bytes."""
    lang = _language()
    rng = np.random.default_rng(seed)
    mix = np.asarray(mix, dtype=np.float64)
    mix = mix / mix.sum()
    parts = []
    total = 0
    while total < n_bytes:
        domain = _DOMAINS[rng.choice(len(_DOMAINS), p=mix)]
        s = domain(rng, lang)
        parts.append(s)
        total += len(s)
    return "".join(parts).encode("ascii")[:n_bytes]


def write_default_corpora(data_dir, train_bytes=786432, val_bytes=49152,
                          eval_bytes=131072):
    """Write the committed train/val/eval files with disjoint stream seeds."""
    from pathlib import Path

    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    out = {}
    for name, size, seed in (("train", train_bytes, 101),
                             ("val", val_bytes, 202),
                             ("eval", eval_bytes, 303)):
        path = data_dir / f"{name}.txt"
        path.write_bytes(generate_corpus(size, seed))
        out[name] = path
    return out
