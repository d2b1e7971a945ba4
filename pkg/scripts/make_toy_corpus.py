"""Regenerate src/hmt/data/toy_corpus.txt (deterministic, stdlib only)."""
import random
import sys
from pathlib import Path

TOPICS = {
    "river": {
        "noun": ["river", "bank", "mill", "bridge", "boat", "current", "willow", "ferry", "stone", "reed"],
        "verb": ["carries", "passes", "floods", "turns", "cools", "bends around", "feeds", "drowns"],
        "adj": ["cold", "slow", "muddy", "wide", "quiet", "green", "old", "shallow"],
    },
    "market": {
        "noun": ["trader", "stall", "coin", "basket", "price", "merchant", "scale", "ledger", "grain", "cloth"],
        "verb": ["sells", "weighs", "counts", "trades", "buys", "lends", "records", "haggles over"],
        "adj": ["busy", "cheap", "fair", "loud", "early", "dusty", "crowded", "honest"],
    },
    "forest": {
        "noun": ["oak", "fox", "path", "owl", "moss", "hunter", "clearing", "deer", "root", "fern"],
        "verb": ["hides", "watches", "follows", "crosses", "shelters", "climbs", "circles", "guards"],
        "adj": ["dark", "tall", "damp", "silent", "ancient", "thick", "wild", "hidden"],
    },
    "ship": {
        "noun": ["captain", "sail", "mast", "harbor", "crew", "anchor", "storm", "compass", "deck", "rope"],
        "verb": ["steers", "raises", "lowers", "repairs", "sights", "ties", "loses", "reaches"],
        "adj": ["salty", "broken", "swift", "heavy", "distant", "grey", "brave", "tired"],
    },
}
NAMES = ["Ada", "Bram", "Cora", "Dov", "Elin", "Finn", "Greta", "Hal", "Iris", "Jon", "Kai", "Lena"]


def sentence(rng, words, name):
    n, v, a = words["noun"], words["verb"], words["adj"]
    forms = [
        lambda: f"the {rng.choice(a)} {rng.choice(n)} {rng.choice(v)} the {rng.choice(n)}.",
        lambda: f"{name} {rng.choice(v)} the {rng.choice(a)} {rng.choice(n)}.",
        lambda: f"near the {rng.choice(n)}, {name} saw a {rng.choice(a)} {rng.choice(n)}.",
        lambda: f"every morning the {rng.choice(n)} {rng.choice(v)} the {rng.choice(n)} again.",
        lambda: f"{name} said the {rng.choice(n)} was {rng.choice(a)}.",
    ]
    return rng.choice(forms)()


def paragraph(rng, idx):
    topic = rng.choice(sorted(TOPICS))
    name = rng.choice(NAMES)
    body = " ".join(sentence(rng, TOPICS[topic], name) for _ in range(rng.randint(6, 14)))
    return f"{idx:04d} {topic}: {body}"


def main(out, n_paragraphs=600, seed=7):
    rng = random.Random(seed)
    text = "\n\n".join(paragraph(rng, i) for i in range(n_paragraphs)) + "\n"
    Path(out).write_text(text, encoding="ascii")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parents[1] / "src/hmt/data/toy_corpus.txt")
